#include "e2kd/explain.hpp"

#include <cmath>
#include <fstream>

#include "e2kd/errors.hpp"

namespace e2kd {
namespace {

torch::Tensor class_tensor(int64_t class_id) { return torch::tensor({class_id}, torch::kLong); }

void check_class(const Model& model, int64_t class_id) {
  if (class_id < 0 || class_id >= model.spec().num_classes) {
    throw InputError("explain: class_id " + std::to_string(class_id) + " out of range");
  }
}

void check_single(const torch::Tensor& x) {
  if (x.dim() != 3) throw InputError("explain: expected a single model input [C,H,W]");
}

// Source sample positions and weights for resizing the interval
// [start, start+extent) of a length-`size` axis onto `out` pixels, using the
// pixel-center (align_corners=false) convention.
struct AxisSampler {
  torch::Tensor lo, hi, frac;
};

AxisSampler axis_sampler(double start, double extent, int64_t out, int64_t size) {
  std::vector<int64_t> lo(out), hi(out);
  std::vector<double> frac(out);
  const double step = extent / static_cast<double>(out);
  for (int64_t u = 0; u < out; ++u) {
    double src = start + (static_cast<double>(u) + 0.5) * step - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(size - 1));
    const auto base = static_cast<int64_t>(std::floor(src));
    lo[u] = base;
    hi[u] = std::min(base + 1, size - 1);
    frac[u] = src - static_cast<double>(base);
  }
  return {torch::tensor(lo, torch::kLong), torch::tensor(hi, torch::kLong), torch::tensor(frac, torch::kFloat64)};
}

torch::Tensor resample_axis(const torch::Tensor& v, int64_t dim, const AxisSampler& s) {
  std::vector<int64_t> shape(v.dim(), 1);
  shape[dim] = s.frac.size(0);
  auto f = s.frac.to(v.scalar_type()).view(shape);
  return v.index_select(dim, s.lo) * (1 - f) + v.index_select(dim, s.hi) * f;
}

}  // namespace

std::string to_string(ExplainMethod m) {
  switch (m) {
    case ExplainMethod::Cam: return "cam";
    case ExplainMethod::GradCam: return "gradcam";
    case ExplainMethod::Bcos: return "bcos";
  }
  return "?";
}

ExplainMethod explain_method_from_string(const std::string& s) {
  if (s == "cam") return ExplainMethod::Cam;
  if (s == "gradcam") return ExplainMethod::GradCam;
  if (s == "bcos") return ExplainMethod::Bcos;
  throw ConfigError("explanation method: unknown value '" + s + "'");
}

void check_compatible(Family family, ExplainMethod method) {
  const bool ok = is_bcos(family) ? method == ExplainMethod::Bcos : method != ExplainMethod::Bcos;
  if (!ok) {
    throw UnsupportedError("explain: method '" + to_string(method) + "' is not supported for family " +
                           to_string(family));
  }
}

ExplainMethod default_method(Family family) { return is_bcos(family) ? ExplainMethod::Bcos : ExplainMethod::GradCam; }

torch::Tensor explain_batch(const Model& model, const torch::Tensor& batch, const torch::Tensor& class_ids,
                            ExplainMethod method, bool differentiable) {
  check_compatible(model.family(), method);
  auto cls = class_ids.to(torch::kLong).view({-1});
  if (cls.size(0) != batch.size(0)) throw InputError("explain_batch: one class id per sample required");
  torch::AutoGradMode grad_mode(true);

  switch (method) {
    case ExplainMethod::Cam: {
      auto feats = model.features(batch);
      auto weights = model.head_weight().index_select(0, cls);  // [N,K]
      auto maps = (weights.unsqueeze(-1).unsqueeze(-1) * feats).sum(1);
      return differentiable ? maps : maps.detach();
    }
    case ExplainMethod::GradCam: {
      auto feats = model.features(batch);
      if (!differentiable) feats = feats.detach().requires_grad_(true);
      auto logits = model.classify(feats);
      auto selected = logits.gather(1, cls.view({-1, 1})).sum();
      auto grads = torch::autograd::grad({selected}, {feats}, {}, /*retain_graph=*/differentiable,
                                         /*create_graph=*/differentiable)[0];
      auto alpha = grads.sum({2, 3}, true);
      auto maps = torch::relu((alpha * feats).sum(1));
      return differentiable ? maps : maps.detach();
    }
    case ExplainMethod::Bcos: {
      auto x = batch.to(model.dtype());
      auto weights = effective_weights_for(model, x, cls, differentiable);
      auto maps = weights * x;
      return differentiable ? maps : maps.detach();
    }
  }
  throw UnsupportedError("explain: unknown method");
}

ExplanationMap explain(const Model& model, const torch::Tensor& x, int64_t class_id, ExplainMethod method) {
  check_single(x);
  check_class(model, class_id);
  auto maps = explain_batch(model, x.unsqueeze(0), class_tensor(class_id), method, false);
  return {maps[0], class_id, method, model.model_id()};
}

ExplanationMap cam(const Model& model, const torch::Tensor& x, int64_t class_id) {
  return explain(model, x, class_id, ExplainMethod::Cam);
}

ExplanationMap gradcam(const Model& model, const torch::Tensor& x, int64_t class_id) {
  return explain(model, x, class_id, ExplainMethod::GradCam);
}

torch::Tensor gradcam_weights(const Model& model, const torch::Tensor& x, int64_t class_id) {
  check_compatible(model.family(), ExplainMethod::GradCam);
  check_single(x);
  check_class(model, class_id);
  torch::AutoGradMode grad_mode(true);
  auto feats = model.features(x.unsqueeze(0)).detach().requires_grad_(true);
  auto logit = model.classify(feats)[0][class_id];
  return torch::autograd::grad({logit}, {feats})[0][0].sum({1, 2});
}

torch::Tensor apply_geometry(const torch::Tensor& values, const GeometricTransform& t, int64_t base_h,
                             int64_t base_w) {
  if (values.dim() < 2) throw GeometryError("apply_geometry: map needs two spatial dims");
  if (t.height <= 0 || t.width <= 0 || t.top < 0 || t.left < 0 || t.top + t.height > base_h ||
      t.left + t.width > base_w) {
    throw GeometryError("apply_geometry: crop box (" + std::to_string(t.top) + "," + std::to_string(t.left) + "," +
                        std::to_string(t.height) + "," + std::to_string(t.width) + ") outside " +
                        std::to_string(base_h) + "x" + std::to_string(base_w));
  }
  if (t.out_height <= 0 || t.out_width <= 0) throw GeometryError("apply_geometry: output size must be positive");
  const int64_t hd = values.dim() - 2, wd = values.dim() - 1;
  const int64_t h = values.size(hd), w = values.size(wd);
  const double sy = static_cast<double>(h) / static_cast<double>(base_h);
  const double sx = static_cast<double>(w) / static_cast<double>(base_w);
  const auto out_h = std::max<int64_t>(1, std::llround(static_cast<double>(t.out_height) * sy));
  const auto out_w = std::max<int64_t>(1, std::llround(static_cast<double>(t.out_width) * sx));

  auto out = resample_axis(values, hd, axis_sampler(t.top * sy, t.height * sy, out_h, h));
  out = resample_axis(out, wd, axis_sampler(t.left * sx, t.width * sx, out_w, w));
  if (t.hflip) out = out.flip({wd});
  return out;
}

ExplanationMap apply_geometry(const ExplanationMap& map, const GeometricTransform& t, int64_t base_h,
                              int64_t base_w) {
  return {apply_geometry(map.values, t, base_h, base_w), map.class_id, map.source, map.model_id};
}

torch::Tensor downsample_map(const torch::Tensor& values, int64_t target_h, int64_t target_w) {
  if (values.dim() < 2) throw GeometryError("downsample_map: map needs two spatial dims");
  const int64_t h = values.size(-2), w = values.size(-1);
  if (target_h <= 0 || target_w <= 0 || target_h > h || target_w > w) {
    throw GeometryError("downsample_map: target " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                        " larger than source " + std::to_string(h) + "x" + std::to_string(w));
  }
  if (target_h == h && target_w == w) return values;
  auto lead = values.sizes().slice(0, values.dim() - 2).vec();
  auto flat = values.reshape({-1, 1, h, w});
  auto pooled = torch::adaptive_avg_pool2d(flat, {target_h, target_w});
  lead.push_back(target_h);
  lead.push_back(target_w);
  return pooled.reshape(lead);
}

ExplanationMap downsample_map(const ExplanationMap& map, int64_t target_h, int64_t target_w) {
  return {downsample_map(map.values, target_h, target_w), map.class_id, map.source, map.model_id};
}

torch::Tensor match_geometry(const torch::Tensor& maps, at::IntArrayRef target_sample_shape) {
  auto sample_shape = maps.sizes().slice(1);
  if (sample_shape.equals(target_sample_shape)) return maps;
  if (sample_shape.size() != target_sample_shape.size()) {
    // Input-space maps against feature-space maps: collapse channels first.
    if (sample_shape.size() == 3 && target_sample_shape.size() == 2) {
      return match_geometry(maps.sum(1), target_sample_shape);
    }
    throw GeometryError("match_geometry: incompatible map ranks");
  }
  const auto th = target_sample_shape[target_sample_shape.size() - 2];
  const auto tw = target_sample_shape[target_sample_shape.size() - 1];
  if (sample_shape.size() == 3 && sample_shape[0] != target_sample_shape[0]) {
    throw GeometryError("match_geometry: channel count mismatch");
  }
  auto x = sample_shape.size() == 2 ? maps.unsqueeze(1) : maps;
  auto resized = torch::nn::functional::interpolate(
      x, torch::nn::functional::InterpolateFuncOptions()
             .size(std::vector<int64_t>{th, tw})
             .mode(torch::kBilinear)
             .align_corners(false));
  return sample_shape.size() == 2 ? resized.squeeze(1) : resized;
}

void write_map_image(const ExplanationMap& map, const std::string& path) {
  auto v = map.values.detach().to(torch::kFloat64);
  if (v.dim() == 3) v = v.clamp_min(0).sum(0);
  const double lo = v.min().item<double>(), hi = v.max().item<double>();
  auto norm = hi > lo ? (v - lo) / (hi - lo) : torch::zeros_like(v);
  auto bytes = (norm * 255.0).round().to(torch::kUInt8).contiguous();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StorageError("write_map_image: cannot open '" + path + "'");
  out << "P5\n" << bytes.size(1) << " " << bytes.size(0) << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data_ptr<uint8_t>()), bytes.numel());
}

}  // namespace e2kd
