#include "e2kd/metrics.hpp"

#include <cmath>
#include <sstream>

#include "e2kd/errors.hpp"
#include "e2kd/json_util.hpp"
#include "e2kd/losses.hpp"

namespace e2kd {
namespace {

torch::Tensor upsample(const torch::Tensor& maps, int64_t h, int64_t w) {
  namespace F = torch::nn::functional;
  return F::interpolate(maps, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{h, w})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
}

torch::Tensor box_mask(const BBox& b, int64_t h, int64_t w) {
  if (b.top < 0 || b.left < 0 || b.height <= 0 || b.width <= 0 || b.top + b.height > h || b.left + b.width > w) {
    throw InputError("bbox outside the map geometry");
  }
  auto m = torch::zeros({h, w}, torch::kBool);
  m.slice(0, b.top, b.top + b.height).slice(1, b.left, b.left + b.width).fill_(true);
  return m;
}

void check_eval(const Model& m, const char* who) {
  if (m.mode() != Mode::Eval) throw StateError(std::string("evaluate: ") + who + " must be in eval mode");
}

}  // namespace

double agreement(const torch::Tensor& preds_a, const torch::Tensor& preds_b) {
  if (preds_a.numel() == 0 || preds_a.numel() != preds_b.numel()) {
    throw InputError("agreement: predictions must be non-empty and of equal length");
  }
  auto eq = (preds_a.reshape(-1).to(torch::kLong) == preds_b.reshape(-1).to(torch::kLong));
  return static_cast<double>(eq.sum().item<int64_t>()) / static_cast<double>(preds_a.numel());
}

torch::Tensor top1_correct(const torch::Tensor& logits, const Dataset& dataset) {
  auto pred = logits.argmax(1);
  if (!dataset.multilabel) return pred == dataset.labels();
  return dataset.targets().gather(1, pred.view({-1, 1})).view({-1}) > 0.5;
}

torch::Tensor predict_logits(const Model& model, const Dataset& dataset, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> out;
  const auto n = static_cast<int64_t>(dataset.size());
  for (int64_t start = 0; start < n; start += batch_size) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    out.push_back(model.forward(prepare_input(model, dataset.images(idx))).to(torch::kFloat64));
  }
  if (out.empty()) return torch::zeros({0, model.spec().num_classes}, torch::kFloat64);
  return torch::cat(out);
}

torch::Tensor spatial_attribution(const torch::Tensor& map, int64_t height, int64_t width) {
  auto m = map.detach().to(torch::kFloat64);
  if (m.dim() == 3) m = m.clamp_min(0).sum(0);
  if (m.dim() != 2) throw InputError("spatial_attribution: expected [h,w] or [C,H,W]");
  if (m.size(0) != height || m.size(1) != width) m = upsample(m.unsqueeze(0).unsqueeze(0), height, width)[0][0];
  return m;
}

Score epg(const torch::Tensor& map, const BBox& bbox, int64_t height, int64_t width) {
  auto pos = spatial_attribution(map, height, width).clamp_min(0);
  const double total = pos.sum().item<double>();
  if (!(total > 0)) return {0.0, true};
  const double inside = pos.masked_select(box_mask(bbox, height, width)).sum().item<double>();
  return {inside / total, false};
}

Score epg(const ExplanationMap& map, const BBox& bbox, int64_t height, int64_t width) {
  return epg(map.values, bbox, height, width);
}

Score iou(const torch::Tensor& map, const BBox& bbox, int64_t height, int64_t width, double threshold) {
  auto pos = spatial_attribution(map, height, width).clamp_min(0);
  const double hi = pos.max().item<double>(), lo = pos.min().item<double>();
  if (!(hi > lo)) return {0.0, true};
  auto mask = (pos - lo) / (hi - lo) > threshold;
  auto box = box_mask(bbox, height, width);
  const double inter = (mask & box).sum().item<int64_t>();
  const double uni = (mask | box).sum().item<int64_t>();
  return {uni > 0 ? inter / uni : 0.0, false};
}

Score iou(const ExplanationMap& map, const BBox& bbox, int64_t height, int64_t width, double threshold) {
  return iou(map.values, bbox, height, width, threshold);
}

Explainer model_explainer(const Model& model, ExplainMethod method) {
  check_compatible(model.family(), method);
  return [&model, method](const torch::Tensor& images, const torch::Tensor& class_ids) {
    auto maps = explain_batch(model, prepare_input(model, images), class_ids, method, false);
    const int64_t h = images.size(2), w = images.size(3);
    if (maps.dim() == 3 && (maps.size(1) != h || maps.size(2) != w)) {
      maps = upsample(maps.unsqueeze(1), h, w).squeeze(1);
    }
    return maps;
  };
}

torch::Tensor shift_diagonal(const torch::Tensor& images, int64_t t) {
  const int64_t h = images.size(-2), w = images.size(-1);
  if (t < 0 || t >= h || t >= w) throw InputError("shift_diagonal: shift out of range");
  if (t == 0) return images;
  auto out = torch::zeros_like(images);
  out.slice(-2, t, h).slice(-1, t, w).copy_(images.slice(-2, 0, h - t).slice(-1, 0, w - t));
  return out;
}

std::vector<double> shift_similarity_curve(const Explainer& explainer, const torch::Tensor& images,
                                           const torch::Tensor& class_ids, int64_t max_shift) {
  if (images.dim() != 4) throw InputError("shift_similarity_curve: expected images [N,3,H,W]");
  const int64_t h = images.size(2), w = images.size(3);
  if (max_shift < 0 || max_shift >= std::min(h, w)) {
    throw InputError("shift_similarity_curve: max_shift must lie in [0, image side)");
  }
  auto base = explainer(images, class_ids).to(torch::kFloat64);
  std::vector<double> curve{1.0};
  for (int64_t t = 1; t <= max_shift; ++t) {
    auto shifted = explainer(shift_diagonal(images, t), class_ids).to(torch::kFloat64);
    auto a = shifted.slice(-2, t, h).slice(-1, t, w);
    auto b = base.slice(-2, 0, h - t).slice(-1, 0, w - t);
    auto cos = 1.0 - exp_loss_per_sample(b, a);
    curve.push_back(std::clamp(cos.mean().item<double>(), -1.0, 1.0));
  }
  return curve;
}

std::vector<double> shift_similarity_curve(const Model& model, ExplainMethod method, const torch::Tensor& images,
                                           int64_t max_shift) {
  torch::Tensor cls;
  {
    torch::NoGradGuard no_grad;
    cls = model.forward(prepare_input(model, images)).argmax(1);
  }
  return shift_similarity_curve(model_explainer(model, method), images, cls, max_shift);
}

std::optional<int64_t> estimate_period(const std::vector<double>& curve, double eps) {
  if (curve.size() < 3) throw InputError("estimate_period: curve needs at least 3 points");
  double best = -std::numeric_limits<double>::infinity();
  for (size_t t = 1; t < curve.size(); ++t) best = std::max(best, curve[t]);
  for (size_t t = 1; t + 1 < curve.size(); ++t) {
    const bool local_max = curve[t] > curve[t - 1] && curve[t] >= curve[t + 1];
    if (local_max && curve[t] >= best - eps) return static_cast<int64_t>(t);
  }
  return std::nullopt;
}

json to_json(const EvalConfig& c) {
  return {{"batch_size", c.batch_size},       {"localization", c.localization},
          {"localization_limit", c.localization_limit}, {"iou_threshold", c.iou_threshold},
          {"shift_curve", c.shift_curve},     {"max_shift", c.max_shift},
          {"shift_images", c.shift_images}};
}

EvalConfig eval_config_from_json(const json& j) {
  constexpr std::string_view ctx = "eval";
  require_known_keys(j, {"batch_size", "localization", "localization_limit", "iou_threshold", "shift_curve",
                         "max_shift", "shift_images"},
                     ctx);
  EvalConfig c;
  read_optional(j, "batch_size", c.batch_size, ctx);
  read_optional(j, "localization", c.localization, ctx);
  read_optional(j, "localization_limit", c.localization_limit, ctx);
  read_optional(j, "iou_threshold", c.iou_threshold, ctx);
  read_optional(j, "shift_curve", c.shift_curve, ctx);
  read_optional(j, "max_shift", c.max_shift, ctx);
  read_optional(j, "shift_images", c.shift_images, ctx);
  if (c.batch_size <= 0) throw ConfigError("eval.batch_size: must be positive");
  if (c.max_shift < 2) throw ConfigError("eval.max_shift: must be at least 2");
  if (c.shift_images <= 0) throw ConfigError("eval.shift_images: must be positive");
  return c;
}

json to_json(const MetricsReport& r) {
  json curve = json::array();
  for (const auto& [t, v] : r.shift_curve) curve.push_back({t, v});
  return {{"accuracy", r.accuracy},
          {"agreement", r.agreement},
          {"per_group_accuracy", r.per_group_accuracy},
          {"group_sizes", r.group_sizes},
          {"id_accuracy", r.id_accuracy},
          {"ood_accuracy", r.ood_accuracy},
          {"id_agreement", r.id_agreement},
          {"ood_agreement", r.ood_agreement},
          {"epg", r.epg},
          {"iou", r.iou},
          {"localization_count", r.localization_count},
          {"degenerate_maps", r.degenerate_maps},
          {"shift_curve", curve},
          {"estimated_period", r.estimated_period ? json(*r.estimated_period) : json("aperiodic")},
          {"shift_images", r.shift_images},
          {"n_id", r.n_id},
          {"n_ood", r.n_ood}};
}

MetricsReport metrics_report_from_json(const json& j) {
  MetricsReport r;
  try {
    r.accuracy = j.at("accuracy").get<double>();
    r.agreement = j.at("agreement").get<double>();
    r.per_group_accuracy = j.at("per_group_accuracy").get<std::map<std::string, double>>();
    r.group_sizes = j.at("group_sizes").get<std::map<std::string, int64_t>>();
    r.id_accuracy = j.at("id_accuracy").get<double>();
    r.ood_accuracy = j.at("ood_accuracy").get<double>();
    r.id_agreement = j.at("id_agreement").get<double>();
    r.ood_agreement = j.at("ood_agreement").get<double>();
    r.epg = j.at("epg").get<double>();
    r.iou = j.at("iou").get<double>();
    r.localization_count = j.at("localization_count").get<int64_t>();
    r.degenerate_maps = j.at("degenerate_maps").get<int64_t>();
    for (const auto& p : j.at("shift_curve")) r.shift_curve.emplace_back(p.at(0).get<int64_t>(), p.at(1).get<double>());
    if (j.at("estimated_period").is_number_integer()) r.estimated_period = j.at("estimated_period").get<int64_t>();
    r.shift_images = j.at("shift_images").get<int64_t>();
    r.n_id = j.at("n_id").get<int64_t>();
    r.n_ood = j.at("n_ood").get<int64_t>();
  } catch (const json::exception& e) {
    throw DataError(std::string("metrics report: malformed record: ") + e.what());
  }
  return r;
}

std::string shift_curve_tsv(const MetricsReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "shift\tsimilarity\n";
  for (const auto& [t, v] : r.shift_curve) out << t << "\t" << v << "\n";
  return out.str();
}

MetricsReport evaluate(const Model& student, const Model& teacher, const Dataset& test_id, const Dataset& test_ood,
                       const EvalConfig& config) {
  check_eval(student, "student");
  check_eval(teacher, "teacher");
  if (test_id.samples.empty()) throw DataError("evaluate: test_id is empty");
  MetricsReport r;
  r.n_id = static_cast<int64_t>(test_id.size());
  r.n_ood = static_cast<int64_t>(test_ood.size());

  int64_t correct_total = 0, agree_total = 0;
  std::map<std::string, std::pair<int64_t, int64_t>> groups;  // correct, count
  for (const auto* split : {&test_id, &test_ood}) {
    if (split->samples.empty()) continue;
    auto zs = predict_logits(student, *split, config.batch_size);
    auto zt = predict_logits(teacher, *split, config.batch_size);
    auto correct = top1_correct(zs, *split);
    auto agree = zs.argmax(1) == zt.argmax(1);
    const auto n = static_cast<double>(split->size());
    const auto c = correct.sum().item<int64_t>(), a = agree.sum().item<int64_t>();
    (split == &test_id ? r.id_accuracy : r.ood_accuracy) = c / n;
    (split == &test_id ? r.id_agreement : r.ood_agreement) = a / n;
    correct_total += c;
    agree_total += a;
    auto cacc = correct.accessor<bool, 1>();
    for (size_t i = 0; i < split->size(); ++i) {
      auto& g = groups[group_name(split->samples[i].group())];
      g.first += cacc[static_cast<int64_t>(i)];
      g.second += 1;
    }
  }
  const double n_all = static_cast<double>(r.n_id + r.n_ood);
  r.accuracy = correct_total / n_all;
  r.agreement = agree_total / n_all;
  for (const auto& [name, g] : groups) {
    r.per_group_accuracy[name] = static_cast<double>(g.first) / static_cast<double>(g.second);
    r.group_sizes[name] = g.second;
  }

  const auto method = default_method(student.family());
  const int64_t h = test_id.samples.front().image.size(1), w = test_id.samples.front().image.size(2);
  if (config.localization) {
    // One (sample, object) pair per annotated object, explained for its class.
    std::vector<int64_t> sample_idx, classes;
    std::vector<BBox> boxes;
    const auto limit = config.localization_limit > 0 ? std::min<int64_t>(config.localization_limit, r.n_id) : r.n_id;
    for (int64_t i = 0; i < limit; ++i) {
      for (const auto& o : test_id.samples[i].objects) {
        sample_idx.push_back(i);
        classes.push_back(o.class_id);
        boxes.push_back(o.bbox);
      }
    }
    auto explainer = model_explainer(student, method);
    double epg_sum = 0, iou_sum = 0;
    for (size_t start = 0; start < sample_idx.size(); start += config.batch_size) {
      const auto end = std::min(sample_idx.size(), start + static_cast<size_t>(config.batch_size));
      std::vector<int64_t> idx(sample_idx.begin() + start, sample_idx.begin() + end);
      std::vector<int64_t> cls(classes.begin() + start, classes.begin() + end);
      auto maps = explainer(test_id.images(idx), torch::tensor(cls, torch::kLong));
      for (size_t k = start; k < end; ++k) {
        auto m = maps[static_cast<int64_t>(k - start)];
        const auto e = epg(m, boxes[k], h, w);
        const auto u = iou(m, boxes[k], h, w, config.iou_threshold);
        epg_sum += e.value;
        iou_sum += u.value;
        r.degenerate_maps += e.degenerate || u.degenerate;
      }
    }
    r.localization_count = static_cast<int64_t>(sample_idx.size());
    if (r.localization_count > 0) {
      r.epg = epg_sum / r.localization_count;
      r.iou = iou_sum / r.localization_count;
    }
  }

  if (config.shift_curve) {
    const auto n = std::min<int64_t>(config.shift_images, r.n_id);
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < n; ++i) idx.push_back(i);
    const auto max_shift = std::min<int64_t>(config.max_shift, std::min(h, w) - 1);
    auto curve = shift_similarity_curve(student, method, test_id.images(idx), max_shift);
    for (size_t t = 0; t < curve.size(); ++t) r.shift_curve.emplace_back(static_cast<int64_t>(t), curve[t]);
    r.estimated_period = estimate_period(curve);
    r.shift_images = n;
  }
  return r;
}

}  // namespace e2kd
