#include "e2kd/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>

#include "e2kd/archive.hpp"
#include "e2kd/errors.hpp"
#include "e2kd/json_util.hpp"

namespace e2kd {
namespace {

using Rgb = std::array<float, 3>;

// Shape membership in object-normalized coordinates (u, v) in [-1, 1],
// v growing downwards.
using ShapeFn = std::function<bool(double, double)>;

const std::array<ShapeFn, kShapeClasses>& shape_table() {
  static const std::array<ShapeFn, kShapeClasses> table = {
      [](double u, double v) { return u * u + v * v <= 1.0; },                      // disk
      [](double u, double v) { return std::abs(u) <= 0.8 && std::abs(v) <= 0.8; },  // square
      [](double u, double v) { return v >= -0.9 && v <= 0.9 && std::abs(u) <= (v + 0.9) / 1.8; },  // triangle
      [](double u, double v) {                                                      // plus
        return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
      },
      [](double u, double v) {  // ring
        const double r2 = u * u + v * v;
        return r2 <= 1.0 && r2 >= 0.55 * 0.55;
      },
      [](double u, double v) { return std::abs(u) + std::abs(v) <= 1.0; },  // diamond
      [](double u, double v) {                                              // diagonal cross
        return std::abs(u) <= 0.9 && std::abs(v) <= 0.9 && (std::abs(u - v) <= 0.4 || std::abs(u + v) <= 0.4);
      },
      [](double u, double v) {  // L
        return (u >= -0.9 && u <= -0.3 && std::abs(v) <= 0.9) || (v >= 0.3 && v <= 0.9 && std::abs(u) <= 0.9);
      },
  };
  return table;
}

// Foreground shape classes of the biased dataset, per render family.
constexpr std::array<int, 2> kFamilyAShapes = {0, 3};  // disk, plus
constexpr std::array<int, 2> kFamilyBShapes = {2, 4};  // triangle, ring

const std::array<Rgb, 4> kFgPalette = {{{0.92f, 0.15f, 0.10f}, {0.95f, 0.85f, 0.15f}, {0.93f, 0.93f, 0.93f},
                                        {0.90f, 0.45f, 0.05f}}};

const std::array<Rgb, 8> kObjectPalette = {{{0.90f, 0.10f, 0.10f}, {0.10f, 0.75f, 0.15f}, {0.15f, 0.30f, 0.90f},
                                            {0.95f, 0.85f, 0.10f}, {0.85f, 0.15f, 0.80f}, {0.10f, 0.85f, 0.85f},
                                            {0.95f, 0.95f, 0.95f}, {0.95f, 0.50f, 0.05f}}};

class Canvas {
 public:
  explicit Canvas(int64_t size) : size_(size), px_(3 * size * size, 0.0f) {}

  int64_t size() const { return size_; }
  float& at(int c, int64_t y, int64_t x) { return px_[(c * size_ + y) * size_ + x]; }

  template <typename F>
  void fill(F&& colour_at) {
    for (int64_t y = 0; y < size_; ++y) {
      for (int64_t x = 0; x < size_; ++x) {
        const Rgb rgb = colour_at(y, x);
        for (int c = 0; c < 3; ++c) at(c, y, x) = rgb[c];
      }
    }
  }

  // Paints the shape and returns its mask.
  torch::Tensor paint(int shape, double cy, double cx, double r, const Rgb& colour) {
    auto mask = torch::zeros({size_, size_}, torch::kBool);
    auto acc = mask.accessor<bool, 2>();
    const auto& fn = shape_table()[shape];
    for (int64_t y = 0; y < size_; ++y) {
      for (int64_t x = 0; x < size_; ++x) {
        const double u = (static_cast<double>(x) + 0.5 - cx) / r;
        const double v = (static_cast<double>(y) + 0.5 - cy) / r;
        if (std::abs(u) > 1.0 || std::abs(v) > 1.0 || !fn(u, v)) continue;
        acc[y][x] = true;
        for (int c = 0; c < 3; ++c) at(c, y, x) = colour[c];
      }
    }
    return mask;
  }

  void add_noise(Rng& rng, double sigma) {
    std::normal_distribution<float> n(0.0f, static_cast<float>(sigma));
    for (auto& v : px_) v = std::clamp(v + n(rng), 0.0f, 1.0f);
  }

  torch::Tensor tensor() const {
    return torch::from_blob(const_cast<float*>(px_.data()), {3, size_, size_}, torch::kFloat32).clone();
  }

 private:
  int64_t size_;
  std::vector<float> px_;
};

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(rng); }

Rgb jitter(Rng& rng, Rgb base, double amount) {
  for (auto& c : base) c = static_cast<float>(std::clamp(c + uniform(rng, -amount, amount), 0.0, 1.0));
  return base;
}

Rgb shade(const Rgb& base, double delta) {
  Rgb out{};
  for (int c = 0; c < 3; ++c) out[c] = static_cast<float>(std::clamp(base[c] + delta, 0.0, 1.0));
  return out;
}

// Smooth random field made of a few Gaussian bumps, roughly in [-1, 1].
std::function<double(int64_t, int64_t)> blob_field(Rng& rng, int64_t size, int count) {
  struct Bump {
    double y, x, s, a;
  };
  std::vector<Bump> bumps;
  for (int i = 0; i < count; ++i) {
    bumps.push_back({uniform(rng, 0, size), uniform(rng, 0, size), uniform(rng, 4, 10), uniform(rng, -1, 1)});
  }
  return [bumps](int64_t y, int64_t x) {
    double v = 0;
    for (const auto& b : bumps) {
      const double dy = y - b.y, dx = x - b.x;
      v += b.a * std::exp(-(dy * dy + dx * dx) / (2 * b.s * b.s));
    }
    return std::clamp(v, -1.0, 1.0);
  };
}

// Thin horizontal streaks: Gaussian bumps elongated along x.
std::function<double(int64_t, int64_t)> streak_field(Rng& rng, int64_t size, int count) {
  struct Streak {
    double y, x, sy, sx, a;
  };
  std::vector<Streak> streaks;
  for (int i = 0; i < count; ++i) {
    streaks.push_back({uniform(rng, 0, size), uniform(rng, 0, size), uniform(rng, 1.0, 2.5), uniform(rng, 10, 24),
                       uniform(rng, -1, 1)});
  }
  return [streaks](int64_t y, int64_t x) {
    double v = 0;
    for (const auto& s : streaks) {
      const double dy = (y - s.y) / s.sy, dx = (x - s.x) / s.sx;
      v += s.a * std::exp(-0.5 * (dy * dy + dx * dx));
    }
    return std::clamp(v, -1.0, 1.0);
  };
}

void paint_background(Canvas& canvas, RenderFamily family, int64_t bg, Rng& rng) {
  const auto n = canvas.size();
  if (family == RenderFamily::A) {
    if (bg == 0) {  // blue horizontal streaks (aperiodic, so shift curves see no texture period)
      const Rgb base = jitter(rng, {0.15f, 0.35f, 0.75f}, 0.08);
      auto field = streak_field(rng, n, 24);
      canvas.fill([&](int64_t y, int64_t x) { return shade(base, 0.15 * field(y, x)); });
    } else {  // green blotches
      const Rgb base = jitter(rng, {0.30f, 0.60f, 0.20f}, 0.08);
      auto field = blob_field(rng, n, 6);
      canvas.fill([&](int64_t y, int64_t x) { return shade(base, 0.15 * field(y, x)); });
    }
  } else {
    if (bg == 0) {  // purple checkerboard
      const Rgb base = jitter(rng, {0.50f, 0.30f, 0.60f}, 0.08);
      const int64_t cell = uniform_int(rng, 4, 8);
      canvas.fill([&](int64_t y, int64_t x) { return shade(base, ((y / cell + x / cell) % 2) ? 0.1 : -0.1); });
    } else {  // brown diagonal stripes
      const Rgb base = jitter(rng, {0.55f, 0.40f, 0.25f}, 0.08);
      const double period = uniform(rng, 6, 10), phase = uniform(rng, 0, 2 * M_PI);
      canvas.fill([&](int64_t y, int64_t x) { return shade(base, 0.12 * std::sin(2 * M_PI * (x + y) / period + phase)); });
    }
  }
}

void paint_clutter(Canvas& canvas, Rng& rng) {
  const Rgb base = jitter(rng, {0.45f, 0.45f, 0.45f}, 0.15);
  std::array<std::function<double(int64_t, int64_t)>, 3> fields = {
      blob_field(rng, canvas.size(), 5), blob_field(rng, canvas.size(), 5), blob_field(rng, canvas.size(), 5)};
  canvas.fill([&](int64_t y, int64_t x) {
    Rgb out{};
    for (int c = 0; c < 3; ++c) out[c] = static_cast<float>(std::clamp(base[c] + 0.18 * fields[c](y, x), 0.0, 1.0));
    return out;
  });
}

Rng sample_rng(uint64_t seed, uint64_t stream, uint64_t split, uint64_t index) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(stream),
                    static_cast<uint32_t>(split), static_cast<uint32_t>(index)};
  return Rng(seq);
}

std::string sample_id(const std::string& tag, uint64_t seed, const std::string& split, int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05lld", static_cast<long long>(i));
  return tag + "-s" + std::to_string(seed) + "-" + split + "-" + buf;
}

ObjectAnnotation make_object(int64_t class_id, torch::Tensor mask) {
  ObjectAnnotation obj;
  obj.class_id = class_id;
  obj.bbox = tight_bbox(mask);
  obj.mask = std::move(mask);
  return obj;
}

torch::Tensor one_hot(const std::vector<int64_t>& classes, int64_t k) {
  auto t = torch::zeros({k}, torch::kFloat32);
  for (auto c : classes) t[c] = 1.0f;
  return t;
}

Sample render_biased(const BiasedParams& p, const std::string& id, int64_t label, int64_t bg, Rng rng) {
  Canvas canvas(p.image_size);
  paint_background(canvas, p.family, bg, rng);
  const auto& shapes = p.family == RenderFamily::A ? kFamilyAShapes : kFamilyBShapes;
  const double r = uniform(rng, 7.0, 11.0);
  const double cy = uniform(rng, r + 1, p.image_size - r - 1), cx = uniform(rng, r + 1, p.image_size - r - 1);
  const Rgb colour = jitter(rng, kFgPalette[uniform_int(rng, 0, kFgPalette.size() - 1)], 0.05);
  auto mask = canvas.paint(shapes[label], cy, cx, r, colour);
  canvas.add_noise(rng, 0.02);

  Sample s;
  s.sample_id = id;
  s.image = canvas.tensor();
  s.label = label;
  s.bg_class = bg;
  s.targets = one_hot({label}, 2);
  s.objects.push_back(make_object(label, std::move(mask)));
  return s;
}

bool boxes_overlap(const std::array<double, 3>& a, const std::array<double, 3>& b, double gap) {
  return std::abs(a[0] - b[0]) < a[2] + b[2] + gap && std::abs(a[1] - b[1]) < a[2] + b[2] + gap;
}

Sample render_shapes(const ShapesParams& p, const std::string& id, int64_t first_class, Rng rng) {
  Canvas canvas(p.image_size);
  paint_clutter(canvas, rng);
  const auto n = p.image_size;

  std::vector<int64_t> classes = {first_class};
  if (p.multilabel) {
    const int64_t extra = uniform_int(rng, 0, 2);
    std::vector<int64_t> pool;
    for (int64_t c = 0; c < kShapeClasses; ++c) {
      if (c != first_class) pool.push_back(c);
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    classes.insert(classes.end(), pool.begin(), pool.begin() + extra);
  }

  Sample s;
  s.sample_id = id;
  std::vector<std::array<double, 3>> placed;  // cy, cx, r
  std::vector<int64_t> present;
  for (auto cls : classes) {
    const double r = p.multilabel ? uniform(rng, 6.0, 10.0) : uniform(rng, 8.0, 14.0);
    std::optional<std::array<double, 3>> where;
    for (int attempt = 0; attempt < 50 && !where; ++attempt) {
      std::array<double, 3> cand = {uniform(rng, r + 1, n - r - 1), uniform(rng, r + 1, n - r - 1), r};
      if (std::none_of(placed.begin(), placed.end(), [&](const auto& b) { return boxes_overlap(cand, b, 2.0); })) {
        where = cand;
      }
    }
    if (!where) continue;  // crowded image: drop the extra object
    placed.push_back(*where);
    const Rgb colour = jitter(rng, kObjectPalette[uniform_int(rng, 0, kObjectPalette.size() - 1)], 0.05);
    auto mask = canvas.paint(static_cast<int>(cls), (*where)[0], (*where)[1], r, colour);
    s.objects.push_back(make_object(cls, std::move(mask)));
    present.push_back(cls);
  }
  canvas.add_noise(rng, 0.02);
  s.image = canvas.tensor();
  s.label = first_class;
  s.targets = one_hot(present, kShapeClasses);
  return s;
}

std::string family_tag(RenderFamily f) { return f == RenderFamily::A ? "biasedA" : "biasedB"; }

Dataset biased_split(const BiasedParams& p, const std::string& split, int64_t n, int64_t split_idx,
                     double aligned_fraction) {
  Dataset ds;
  ds.name = family_tag(p.family) + "/" + split;
  ds.num_classes = 2;
  // Exact aligned count; labels alternate so both classes stay balanced.
  const auto n_aligned = static_cast<int64_t>(std::llround(aligned_fraction * static_cast<double>(n)));
  std::vector<std::pair<int64_t, bool>> plan;
  for (int64_t i = 0; i < n; ++i) plan.emplace_back(i % 2, false);
  std::vector<int64_t> order(n);
  for (int64_t i = 0; i < n; ++i) order[i] = i;
  auto plan_rng = sample_rng(p.seed, static_cast<uint64_t>(p.family) + 10, split_idx, 1u << 30);
  std::shuffle(order.begin(), order.end(), plan_rng);
  for (int64_t i = 0; i < n_aligned; ++i) plan[order[i]].second = true;

  for (int64_t i = 0; i < n; ++i) {
    const auto [label, aligned] = plan[i];
    const int64_t bg = aligned ? label : 1 - label;
    ds.samples.push_back(render_biased(p, sample_id(family_tag(p.family), p.seed, split, i), label, bg,
                                       sample_rng(p.seed, static_cast<uint64_t>(p.family), split_idx, i)));
  }
  return ds;
}

Dataset shapes_split(const ShapesParams& p, const std::string& split, int64_t n, int64_t split_idx) {
  Dataset ds;
  const std::string tag = p.multilabel ? "shapesML" : "shapesSL";
  ds.name = tag + "/" + split;
  ds.num_classes = kShapeClasses;
  ds.multilabel = p.multilabel;
  for (int64_t i = 0; i < n; ++i) {
    ds.samples.push_back(render_shapes(p, sample_id(tag, p.seed, split, i), i % kShapeClasses,
                                       sample_rng(p.seed, 100 + p.multilabel, split_idx, i)));
  }
  return ds;
}

void check_positive(int64_t v, const char* field) {
  if (v <= 0) throw ConfigError(std::string(field) + ": must be positive");
}

std::map<int64_t, std::vector<int64_t>> by_class(const Dataset& d) {
  std::map<int64_t, std::vector<int64_t>> out;
  for (int64_t i = 0; i < static_cast<int64_t>(d.size()); ++i) out[d.samples[i].label].push_back(i);
  return out;
}

Dataset select(const Dataset& d, std::vector<int64_t> idx, const std::string& suffix) {
  std::sort(idx.begin(), idx.end());
  Dataset out{d.name + suffix, d.num_classes, d.multilabel, {}};
  for (auto i : idx) out.samples.push_back(d.samples[i]);
  return out;
}

const std::array<const char*, 4> kSplitNames = {"train", "val", "test_id", "test_ood"};

std::array<const Dataset*, 4> splits_of(const DatasetSplit& s) { return {&s.train, &s.val, &s.test_id, &s.test_ood}; }
std::array<Dataset*, 4> splits_of(DatasetSplit& s) { return {&s.train, &s.val, &s.test_id, &s.test_ood}; }

}  // namespace

BBox tight_bbox(const torch::Tensor& mask) {
  auto m = mask.to(torch::kBool);
  if (m.dim() != 2) throw DataError("tight_bbox: expected a [H,W] mask");
  auto rows = m.any(1).nonzero().view({-1});
  auto cols = m.any(0).nonzero().view({-1});
  if (rows.numel() == 0) throw DataError("tight_bbox: empty mask");
  const auto top = rows.min().item<int64_t>(), bottom = rows.max().item<int64_t>();
  const auto left = cols.min().item<int64_t>(), right = cols.max().item<int64_t>();
  return {top, left, bottom - top + 1, right - left + 1};
}

torch::Tensor Sample::fg_mask() const {
  auto m = torch::zeros({image.size(1), image.size(2)}, torch::kBool);
  for (const auto& o : objects) m |= o.mask;
  return m;
}

std::string group_name(std::pair<int64_t, int64_t> group) {
  if (group.second < 0) return "y" + std::to_string(group.first);
  return "y" + std::to_string(group.first) + "_b" + std::to_string(group.second);
}

torch::Tensor Dataset::images(const std::vector<int64_t>& indices) const {
  std::vector<torch::Tensor> parts;
  if (indices.empty()) {
    for (const auto& s : samples) parts.push_back(s.image);
  } else {
    for (auto i : indices) parts.push_back(samples.at(i).image);
  }
  if (parts.empty()) throw DataError("Dataset::images: no samples in " + name);
  return torch::stack(parts);
}

torch::Tensor Dataset::labels() const {
  std::vector<int64_t> v;
  for (const auto& s : samples) v.push_back(s.label);
  return torch::tensor(v, torch::kLong);
}

torch::Tensor Dataset::targets() const {
  std::vector<torch::Tensor> parts;
  for (const auto& s : samples) parts.push_back(s.targets);
  if (parts.empty()) return torch::zeros({0, num_classes});
  return torch::stack(parts);
}

json to_json(const BiasedParams& p) {
  return {{"n_train", p.n_train}, {"n_eval", p.n_eval}, {"correlation", p.correlation}, {"seed", p.seed},
          {"family", p.family == RenderFamily::A ? "A" : "B"}, {"image_size", p.image_size}};
}

json to_json(const ShapesParams& p) {
  return {{"n_train", p.n_train}, {"n_eval", p.n_eval}, {"multilabel", p.multilabel}, {"seed", p.seed},
          {"image_size", p.image_size}};
}

BiasedParams biased_params_from_json(const json& j) {
  require_known_keys(j, {"n_train", "n_eval", "correlation", "seed", "family", "image_size"}, "biased params");
  BiasedParams p;
  read_optional(j, "n_train", p.n_train, "biased params");
  read_optional(j, "n_eval", p.n_eval, "biased params");
  read_optional(j, "correlation", p.correlation, "biased params");
  read_optional(j, "seed", p.seed, "biased params");
  read_optional(j, "image_size", p.image_size, "biased params");
  std::string family = "A";
  read_optional(j, "family", family, "biased params");
  if (family != "A" && family != "B") throw ConfigError("biased params: family must be \"A\" or \"B\"");
  p.family = family == "A" ? RenderFamily::A : RenderFamily::B;
  return p;
}

ShapesParams shapes_params_from_json(const json& j) {
  require_known_keys(j, {"n_train", "n_eval", "multilabel", "seed", "image_size"}, "shapes params");
  ShapesParams p;
  read_optional(j, "n_train", p.n_train, "shapes params");
  read_optional(j, "n_eval", p.n_eval, "shapes params");
  read_optional(j, "multilabel", p.multilabel, "shapes params");
  read_optional(j, "seed", p.seed, "shapes params");
  read_optional(j, "image_size", p.image_size, "shapes params");
  return p;
}

DatasetSplit generate_biased_dataset(const BiasedParams& p) {
  // Fewer than 4 samples cannot populate both classes in both alignments.
  if (p.n_train < 4) throw ConfigError("n_train: at least 4 samples required to populate all groups");
  if (p.n_eval < 4) throw ConfigError("n_eval: at least 4 samples required to populate all groups");
  if (!(p.correlation >= 0.0 && p.correlation <= 1.0)) throw ConfigError("correlation: must lie in [0, 1]");
  if (p.image_size < 32) throw ConfigError("image_size: must be at least 32");
  DatasetSplit out;
  out.kind = "biased";
  out.correlation = p.correlation;
  out.seed = p.seed;
  out.params = to_json(p);
  out.train = biased_split(p, "train", p.n_train, 0, p.correlation);
  out.val = biased_split(p, "val", p.n_eval, 1, p.correlation);
  out.test_id = biased_split(p, "test_id", p.n_eval, 2, 1.0);
  out.test_ood = biased_split(p, "test_ood", p.n_eval, 3, 0.0);
  return out;
}

DatasetSplit generate_shapes_dataset(const ShapesParams& p) {
  check_positive(p.n_train, "n_train");
  check_positive(p.n_eval, "n_eval");
  if (p.image_size < 48) throw ConfigError("image_size: must be at least 48");
  DatasetSplit out;
  out.kind = "shapes";
  out.correlation = 0.0;
  out.seed = p.seed;
  out.params = to_json(p);
  out.train = shapes_split(p, "train", p.n_train, 0);
  out.val = shapes_split(p, "val", p.n_eval, 1);
  out.test_id = shapes_split(p, "test_id", p.n_eval, 2);
  out.test_ood = Dataset{out.train.name.substr(0, out.train.name.find('/')) + "/test_ood", kShapeClasses,
                         p.multilabel, {}};
  return out;
}

Dataset subsample_shots(const Dataset& dataset, int64_t k, uint64_t seed) {
  if (k <= 0) throw ConfigError("shots: must be positive");
  Rng rng(seed);
  std::vector<int64_t> keep;
  for (auto& [cls, idx] : by_class(dataset)) {
    if (static_cast<int64_t>(idx.size()) < k) {
      throw DataError("subsample_shots: class " + std::to_string(cls) + " has " + std::to_string(idx.size()) +
                      " samples, " + std::to_string(k) + " requested");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    keep.insert(keep.end(), idx.begin(), idx.begin() + k);
  }
  for (int64_t c = 0; c < dataset.num_classes; ++c) {
    if (by_class(dataset).count(c) == 0) throw DataError("subsample_shots: class " + std::to_string(c) + " is empty");
  }
  return select(dataset, keep, "@" + std::to_string(k) + "shot");
}

Dataset subsample_fraction(const Dataset& dataset, double fraction, uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction: must lie in (0, 1]");
  Rng rng(seed);
  std::vector<int64_t> keep;
  for (auto& [cls, idx] : by_class(dataset)) {
    const auto n = std::max<int64_t>(1, std::llround(fraction * static_cast<double>(idx.size())));
    std::shuffle(idx.begin(), idx.end(), rng);
    keep.insert(keep.end(), idx.begin(), idx.begin() + n);
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "@%.3g", fraction);
  return select(dataset, keep, buf);
}

GeometricTransform sample_transform(Rng& rng, int64_t h, int64_t w, const AugmentParams& params) {
  if (!params.enabled) return GeometricTransform::identity(h, w);
  GeometricTransform t = GeometricTransform::identity(h, w);
  const double area = static_cast<double>(h * w);
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * uniform(rng, params.scale_min, params.scale_max);
    const double ratio = std::exp(uniform(rng, std::log(params.ratio_min), std::log(params.ratio_max)));
    const auto cw = static_cast<int64_t>(std::llround(std::sqrt(target * ratio)));
    const auto ch = static_cast<int64_t>(std::llround(std::sqrt(target / ratio)));
    if (cw <= 0 || ch <= 0 || cw > w || ch > h) continue;
    t.top = uniform_int(rng, 0, h - ch);
    t.left = uniform_int(rng, 0, w - cw);
    t.height = ch;
    t.width = cw;
    found = true;
  }
  t.hflip = uniform(rng, 0.0, 1.0) < params.flip_prob;
  return t;
}

AugmentedPair augment_pair(const torch::Tensor& image, const std::optional<torch::Tensor>& map, Rng& rng,
                           const AugmentParams& params) {
  const int64_t h = image.size(-2), w = image.size(-1);
  auto t = sample_transform(rng, h, w, params);
  AugmentedPair out;
  out.transform = t;
  out.image = t.is_identity(h, w) ? image : apply_geometry(image, t, h, w);
  if (map) out.map = t.is_identity(h, w) ? *map : apply_geometry(*map, t, h, w);
  return out;
}

DistillationView make_unrelated_split(const DatasetSplit& a, const DatasetSplit& b) {
  std::set<std::string> a_ids;
  for (const auto* d : splits_of(a)) {
    for (const auto& s : d->samples) a_ids.insert(s.sample_id);
  }
  for (const auto& s : b.train.samples) {
    if (a_ids.count(s.sample_id)) {
      throw ConfigError("make_unrelated_split: sample id '" + s.sample_id + "' appears in both datasets");
    }
  }
  DistillationView v;
  v.train = b.train;
  v.val = a.val;
  v.test_id = a.test_id;
  v.test_ood = a.test_ood;
  return v;
}

std::string dataset_fingerprint(const Dataset& dataset) {
  std::string buf = dataset.name + "\n";
  for (const auto& s : dataset.samples) {
    buf += s.sample_id + ":" + std::to_string(s.label) + ":" + std::to_string(s.bg_class) + "\n";
    auto img = s.image.contiguous();
    buf.append(static_cast<const char*>(img.data_ptr()), img.numel() * img.element_size());
  }
  return bytes_digest(buf);
}

std::string dataset_fingerprint(const DatasetSplit& split) {
  std::string buf;
  for (const auto* d : splits_of(split)) buf += dataset_fingerprint(*d);
  return bytes_digest(buf);
}

void save_dataset(const DatasetSplit& split, const std::filesystem::path& path) {
  ArchiveWriter w;
  json meta{{"format", "e2kd-dataset"}, {"kind", split.kind}, {"correlation", split.correlation},
            {"seed", split.seed}, {"params", split.params}, {"fingerprint", dataset_fingerprint(split)}};
  const auto parts = splits_of(split);
  for (size_t k = 0; k < parts.size(); ++k) {
    const Dataset& d = *parts[k];
    json samples = json::array();
    std::vector<torch::Tensor> masks;
    for (const auto& s : d.samples) {
      json objs = json::array();
      for (const auto& o : s.objects) {
        objs.push_back({{"class", o.class_id}, {"bbox", {o.bbox.top, o.bbox.left, o.bbox.height, o.bbox.width}}});
        masks.push_back(o.mask.to(torch::kUInt8));
      }
      samples.push_back({{"id", s.sample_id}, {"label", s.label}, {"bg", s.bg_class}, {"objects", objs}});
    }
    meta["splits"][kSplitNames[k]] = {
        {"name", d.name}, {"num_classes", d.num_classes}, {"multilabel", d.multilabel}, {"samples", samples}};
    if (!d.samples.empty()) {
      w.add(std::string(kSplitNames[k]) + "/images", d.images());
      w.add(std::string(kSplitNames[k]) + "/targets", d.targets());
      w.add(std::string(kSplitNames[k]) + "/masks", torch::stack(masks));
    }
  }
  w.set_meta(std::move(meta));
  w.write(path);
}

DatasetSplit load_dataset(const std::filesystem::path& path) {
  auto ar = Archive::read(path);
  const auto& meta = ar.meta();
  if (meta.value("format", "") != "e2kd-dataset") throw DataError("load_dataset: not a dataset archive: " + path.string());
  DatasetSplit out;
  try {
    out.kind = meta.at("kind").get<std::string>();
    out.correlation = meta.at("correlation").get<double>();
    out.seed = meta.at("seed").get<uint64_t>();
    out.params = meta.at("params");
    auto parts = splits_of(out);
    for (size_t k = 0; k < parts.size(); ++k) {
      const auto& sm = meta.at("splits").at(kSplitNames[k]);
      Dataset& d = *parts[k];
      d.name = sm.at("name").get<std::string>();
      d.num_classes = sm.at("num_classes").get<int64_t>();
      d.multilabel = sm.at("multilabel").get<bool>();
      const auto& samples = sm.at("samples");
      if (samples.empty()) continue;
      const std::string prefix = kSplitNames[k];
      auto images = ar.get(prefix + "/images");
      auto targets = ar.get(prefix + "/targets");
      auto masks = ar.get(prefix + "/masks").to(torch::kBool);
      int64_t mi = 0;
      for (size_t i = 0; i < samples.size(); ++i) {
        const auto& js = samples[i];
        Sample s;
        s.sample_id = js.at("id").get<std::string>();
        s.label = js.at("label").get<int64_t>();
        s.bg_class = js.at("bg").get<int64_t>();
        s.image = images[static_cast<int64_t>(i)].clone();
        s.targets = targets[static_cast<int64_t>(i)].clone();
        for (const auto& jo : js.at("objects")) {
          ObjectAnnotation o;
          o.class_id = jo.at("class").get<int64_t>();
          const auto b = jo.at("bbox").get<std::vector<int64_t>>();
          o.bbox = {b.at(0), b.at(1), b.at(2), b.at(3)};
          o.mask = masks[mi++].clone();
          s.objects.push_back(std::move(o));
        }
        d.samples.push_back(std::move(s));
      }
    }
  } catch (const json::exception& e) {
    throw DataError("load_dataset: malformed metadata in " + path.string() + ": " + e.what());
  } catch (const StorageError&) {
    throw;
  }
  if (meta.contains("fingerprint") && meta.at("fingerprint") != dataset_fingerprint(out)) {
    throw IntegrityError("load_dataset: content fingerprint mismatch in " + path.string());
  }
  return out;
}

}  // namespace e2kd
