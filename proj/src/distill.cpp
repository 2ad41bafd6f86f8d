#include "e2kd/distill.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "e2kd/errors.hpp"
#include "e2kd/json_util.hpp"
#include "e2kd/metrics.hpp"

namespace e2kd {
namespace {

json augment_to_json(const AugmentParams& a) {
  return {{"enabled", a.enabled},     {"scale_min", a.scale_min}, {"scale_max", a.scale_max},
          {"ratio_min", a.ratio_min}, {"ratio_max", a.ratio_max}, {"flip_prob", a.flip_prob}};
}

AugmentParams augment_from_json(const json& j) {
  constexpr std::string_view ctx = "augment";
  require_known_keys(j, {"enabled", "scale_min", "scale_max", "ratio_min", "ratio_max", "flip_prob"}, ctx);
  AugmentParams a;
  read_optional(j, "enabled", a.enabled, ctx);
  read_optional(j, "scale_min", a.scale_min, ctx);
  read_optional(j, "scale_max", a.scale_max, ctx);
  read_optional(j, "ratio_min", a.ratio_min, ctx);
  read_optional(j, "ratio_max", a.ratio_max, ctx);
  read_optional(j, "flip_prob", a.flip_prob, ctx);
  if (!(a.scale_min > 0 && a.scale_min <= a.scale_max && a.scale_max <= 1)) {
    throw ConfigError("augment.scale_min/scale_max: need 0 < min <= max <= 1");
  }
  if (!(a.ratio_min > 0 && a.ratio_min <= a.ratio_max)) throw ConfigError("augment.ratio_min/ratio_max: need 0 < min <= max");
  if (!(a.flip_prob >= 0 && a.flip_prob <= 1)) throw ConfigError("augment.flip_prob: must lie in [0, 1]");
  return a;
}

// Per-sample augmentation stream: independent of batch composition, so
// online and frozen runs (and any loader order) see the same transforms.
Rng augment_rng(uint64_t seed, int64_t epoch, int64_t sample) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(epoch),
                    static_cast<uint32_t>(sample), 0xA5A5u};
  return Rng(seq);
}

Rng order_rng(uint64_t seed, int64_t epoch) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(epoch),
                    0x5EEDu};
  return Rng(seq);
}

struct LoopParams {
  int64_t epochs, batch_size;
  double lr_peak;
  int64_t warmup_epochs;
  double weight_decay;
  ClipMode clip;
  uint64_t seed;
  AugmentParams augment;
};

struct Batch {
  std::vector<int64_t> indices;
  torch::Tensor images;  // augmented raw RGB
  std::vector<GeometricTransform> transforms;
};

using StepFn = std::function<LossBreakdown(const Batch&)>;
// Validation accuracy and agreement of the current model.
using EvalFn = std::function<std::pair<double, double>(const Model&)>;

double grad_norm(const std::vector<torch::Tensor>& params) {
  double sq = 0;
  for (const auto& p : params) {
    if (p.grad().defined()) sq += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  }
  return std::sqrt(sq);
}

std::string describe(const LossBreakdown& l) {
  std::ostringstream s;
  s << "logit=" << l.logit.item<double>() << " exp=" << l.exp.item<double>() << " total=" << l.total.item<double>();
  return s.str();
}

TrainResult run_loop(Model& model, const Dataset& train, const LoopParams& p, const StepFn& step_fn,
                     const EvalFn& eval_fn, const TrainOptions& options, TrainHistory history) {
  if (train.samples.empty()) throw DataError("training set is empty");
  const auto n = static_cast<int64_t>(train.size());
  const int64_t h = train.samples.front().image.size(1), w = train.samples.front().image.size(2);
  const int64_t steps_per_epoch = (n + p.batch_size - 1) / p.batch_size;
  const int64_t total_steps = p.epochs * steps_per_epoch;
  const int64_t warmup_steps = p.warmup_epochs * steps_per_epoch;

  auto params = model.parameters();
  torch::optim::AdamW optimizer(params, torch::optim::AdamWOptions(p.lr_peak).weight_decay(p.weight_decay));
  model.set_mode(Mode::Train);

  std::optional<Model> best;
  double best_val = -std::numeric_limits<double>::infinity();
  int64_t step = 0;
  bool stop = false;
  for (int64_t epoch = 0; epoch < p.epochs && !stop; ++epoch) {
    std::vector<int64_t> order(n);
    for (int64_t i = 0; i < n; ++i) order[i] = i;
    auto rng = order_rng(p.seed, epoch);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0;
    int64_t loss_count = 0;
    for (int64_t start = 0; start < n && !stop; start += p.batch_size) {
      Batch batch;
      std::vector<torch::Tensor> imgs;
      for (int64_t k = start; k < std::min(n, start + p.batch_size); ++k) {
        const auto i = order[k];
        auto arng = augment_rng(p.seed, epoch, i);
        auto t = sample_transform(arng, h, w, p.augment);
        const auto& img = train.samples[i].image;
        imgs.push_back(t.is_identity(h, w) ? img : apply_geometry(img, t, h, w));
        batch.indices.push_back(i);
        batch.transforms.push_back(t);
      }
      batch.images = torch::stack(imgs);

      const double lr = lr_schedule(step, total_steps, warmup_steps, p.lr_peak);
      for (auto& group : optimizer.param_groups()) {
        static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
      }
      optimizer.zero_grad();
      auto loss = step_fn(batch);
      if (!std::isfinite(loss.total.item<double>())) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                            ": " + describe(loss));
      }
      double norm = 0;
      if (loss.total.requires_grad()) {
        loss.total.backward();
        norm = grad_norm(params);
        if (p.clip == ClipMode::Norm) {
          torch::nn::utils::clip_grad_norm_(params, 1.0);
        } else {
          clip_adaptive(params);
        }
        optimizer.step();
      }
      history.steps.push_back({epoch, step, loss.logit.item<double>(), loss.exp.item<double>(),
                               loss.total.item<double>(), lr, norm});
      loss_sum += loss.total.item<double>();
      ++loss_count;
      ++step;
      stop = options.max_steps > 0 && step >= options.max_steps;
    }

    EpochRecord rec{epoch, loss_count ? loss_sum / loss_count : 0.0, 0.0, 0.0};
    if (options.validate_each_epoch) {
      model.set_mode(Mode::Eval);
      std::tie(rec.val_accuracy, rec.val_agreement) = eval_fn(model);
      model.set_mode(Mode::Train);
    }
    history.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
    if (options.checkpoint_dir) {
      std::filesystem::create_directories(*options.checkpoint_dir);
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03lld.ckpt", static_cast<long long>(epoch));
      save_checkpoint(model, *options.checkpoint_dir / name, {{"epoch", epoch}});
    }
    if (rec.val_accuracy >= best_val) {  // ties go to the later epoch
      best_val = rec.val_accuracy;
      best = model.clone();
    }
  }
  history.best_epoch = select_checkpoint(history);
  if (options.checkpoint_dir) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03lld.ckpt", static_cast<long long>(history.best_epoch));
    history.best_checkpoint = (*options.checkpoint_dir / name).string();
  }
  best->set_mode(Mode::Eval);
  return {std::move(*best), std::move(history)};
}

// Classes explained per sample for the explanation term.
struct MapPairs {
  std::vector<int64_t> sample;  // index into the batch
  std::vector<int64_t> cls;
  std::vector<double> weight;   // 1 / (pairs of that sample · batch size)
};

MapPairs select_classes(const torch::Tensor& teacher_logits, bool multilabel) {
  MapPairs out;
  const auto n = teacher_logits.size(0);
  auto top = teacher_logits.argmax(1);
  if (!multilabel) {
    for (int64_t i = 0; i < n; ++i) {
      out.sample.push_back(i);
      out.cls.push_back(top[i].item<int64_t>());
      out.weight.push_back(1.0 / static_cast<double>(n));
    }
    return out;
  }
  // Every class with teacher probability above 0.5; the top class otherwise.
  auto positive = torch::sigmoid(teacher_logits) > 0.5;
  for (int64_t i = 0; i < n; ++i) {
    std::vector<int64_t> cls;
    for (int64_t c = 0; c < teacher_logits.size(1); ++c) {
      if (positive[i][c].item<bool>()) cls.push_back(c);
    }
    if (cls.empty()) cls.push_back(top[i].item<int64_t>());
    for (auto c : cls) {
      out.sample.push_back(i);
      out.cls.push_back(c);
      out.weight.push_back(1.0 / static_cast<double>(cls.size() * n));
    }
  }
  return out;
}

ExplainMethod explain_method(DistillMethod m) {
  return m == DistillMethod::Bcos ? ExplainMethod::Bcos : ExplainMethod::GradCam;
}

std::pair<double, double> validation(const Model& model, const Dataset& val, const torch::Tensor& teacher_val) {
  if (val.samples.empty()) return {0.0, 0.0};
  auto logits = predict_logits(model, val);
  const double acc = top1_correct(logits, val).to(torch::kFloat64).mean().item<double>();
  const double agr = teacher_val.defined() ? agreement(logits.argmax(1), teacher_val.argmax(1)) : 0.0;
  return {acc, agr};
}

}  // namespace

std::string to_string(DistillMethod m) {
  switch (m) {
    case DistillMethod::None: return "none";
    case DistillMethod::GradCam: return "gradcam";
    case DistillMethod::Bcos: return "bcos";
  }
  return "?";
}

DistillMethod distill_method_from_string(const std::string& s) {
  if (s == "none") return DistillMethod::None;
  if (s == "gradcam") return DistillMethod::GradCam;
  if (s == "bcos") return DistillMethod::Bcos;
  throw ConfigError("method: unknown value '" + s + "' (expected none, gradcam or bcos)");
}

std::string to_string(ClipMode m) { return m == ClipMode::Norm ? "norm" : "adaptive"; }

ClipMode clip_mode_from_string(const std::string& s) {
  if (s == "norm") return ClipMode::Norm;
  if (s == "adaptive") return ClipMode::Adaptive;
  throw ConfigError("clip: unknown value '" + s + "' (expected norm or adaptive)");
}

bool DistillConfig::operator==(const DistillConfig& o) const { return to_json(*this) == to_json(o); }

DistillConfig default_distill_config(Family student_family) {
  DistillConfig c;
  if (is_bcos(student_family)) {
    c.lr_peak = 1e-3;
    c.clip = ClipMode::Adaptive;
    c.weight_decay = 0.0;
  }
  return c;
}

void validate(const DistillConfig& cfg) {
  validate(cfg.loss);
  if (cfg.epochs <= 0) throw ConfigError("epochs: must be positive");
  if (cfg.batch_size <= 0) throw ConfigError("batch_size: must be positive");
  if (!(cfg.lr_peak >= 0)) throw ConfigError("lr_peak: must be >= 0");
  if (cfg.warmup_epochs < 0 || cfg.warmup_epochs >= cfg.epochs) {
    throw ConfigError("warmup_epochs: must lie in [0, epochs)");
  }
  if (!(cfg.weight_decay >= 0)) throw ConfigError("weight_decay: must be >= 0");
  if (cfg.shots && *cfg.shots <= 0) throw ConfigError("shots: must be positive");
  if (cfg.frozen_maps_only && !cfg.frozen) throw ConfigError("frozen_maps_only: requires frozen=true");
  if (cfg.frozen && cfg.method == DistillMethod::None && !cfg.frozen_maps_only) {
    // Frozen logits alone are allowed (fixed-teacher vanilla KD).
  }
}

void validate(const DistillConfig& cfg, Family student_family) {
  validate(cfg);
  if (cfg.method == DistillMethod::Bcos && !is_bcos(student_family)) {
    throw ConfigError("method: bcos requires a bcos_* student");
  }
  if (cfg.method == DistillMethod::GradCam && student_family != Family::StdCnn) {
    throw ConfigError("method: gradcam requires a std_cnn student");
  }
  if (is_bcos(student_family) && cfg.weight_decay != 0.0) {
    throw ConfigError("weight_decay: must be 0 for bcos_* students");
  }
}

json to_json(const DistillConfig& c) {
  return {{"loss", to_json(c.loss)},
          {"method", to_string(c.method)},
          {"frozen", c.frozen},
          {"frozen_maps_only", c.frozen_maps_only},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_peak", c.lr_peak},
          {"warmup_epochs", c.warmup_epochs},
          {"clip", to_string(c.clip)},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"shots", c.shots ? json(*c.shots) : json(nullptr)},
          {"augment", augment_to_json(c.augment)}};
}

DistillConfig distill_config_from_json(const json& j) {
  constexpr std::string_view ctx = "distill";
  require_known_keys(j, {"loss", "method", "frozen", "frozen_maps_only", "epochs", "batch_size", "lr_peak",
                         "warmup_epochs", "clip", "weight_decay", "seed", "shots", "augment"},
                     ctx);
  DistillConfig c;
  if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
  std::string method = to_string(c.method), clip = to_string(c.clip);
  read_optional(j, "method", method, ctx);
  read_optional(j, "clip", clip, ctx);
  c.method = distill_method_from_string(method);
  c.clip = clip_mode_from_string(clip);
  read_optional(j, "frozen", c.frozen, ctx);
  read_optional(j, "frozen_maps_only", c.frozen_maps_only, ctx);
  read_optional(j, "epochs", c.epochs, ctx);
  read_optional(j, "batch_size", c.batch_size, ctx);
  read_optional(j, "lr_peak", c.lr_peak, ctx);
  read_optional(j, "warmup_epochs", c.warmup_epochs, ctx);
  read_optional(j, "weight_decay", c.weight_decay, ctx);
  read_optional(j, "seed", c.seed, ctx);
  if (j.contains("shots") && !j.at("shots").is_null()) {
    int64_t k = 0;
    read_optional(j, "shots", k, ctx);
    c.shots = k;
  }
  if (j.contains("augment")) c.augment = augment_from_json(j.at("augment"));
  validate(c);
  return c;
}

json to_json(const TeacherConfig& c) {
  return {{"epochs", c.epochs},         {"batch_size", c.batch_size},
          {"lr_peak", c.lr_peak},       {"warmup_epochs", c.warmup_epochs},
          {"weight_decay", c.weight_decay}, {"clip", to_string(c.clip)},
          {"seed", c.seed},             {"augment", augment_to_json(c.augment)}};
}

TeacherConfig teacher_config_from_json(const json& j) {
  constexpr std::string_view ctx = "teacher";
  require_known_keys(j, {"epochs", "batch_size", "lr_peak", "warmup_epochs", "weight_decay", "clip", "seed", "augment"},
                     ctx);
  TeacherConfig c;
  read_optional(j, "epochs", c.epochs, ctx);
  read_optional(j, "batch_size", c.batch_size, ctx);
  read_optional(j, "lr_peak", c.lr_peak, ctx);
  read_optional(j, "warmup_epochs", c.warmup_epochs, ctx);
  read_optional(j, "weight_decay", c.weight_decay, ctx);
  std::string clip = to_string(c.clip);
  read_optional(j, "clip", clip, ctx);
  c.clip = clip_mode_from_string(clip);
  read_optional(j, "seed", c.seed, ctx);
  if (j.contains("augment")) c.augment = augment_from_json(j.at("augment"));
  if (c.epochs <= 0 || c.batch_size <= 0) throw ConfigError("teacher: epochs and batch_size must be positive");
  if (c.warmup_epochs < 0 || c.warmup_epochs >= c.epochs) throw ConfigError("teacher.warmup_epochs: must lie in [0, epochs)");
  return c;
}

double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr_peak) {
  if (total_steps <= 0 || step < 0 || step >= total_steps) {
    throw ConfigError("lr_schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
  }
  if (warmup_steps < 0 || warmup_steps >= total_steps) throw ConfigError("lr_schedule: warmup must be < total steps");
  if (step < warmup_steps) return lr_peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return lr_peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void clip_adaptive(const std::vector<torch::Tensor>& params, double factor) {
  torch::NoGradGuard no_grad;
  for (const auto& p : params) {
    if (!p.grad().defined()) continue;
    const double limit = factor * std::max(p.norm().item<double>(), 1e-3);
    const double g = p.grad().norm().item<double>();
    if (g > limit) p.grad().mul_(limit / g);
  }
}

json to_json(const StepRecord& s) {
  return {{"epoch", s.epoch}, {"step", s.step},   {"logit", s.logit},         {"exp", s.exp},
          {"total", s.total}, {"lr", s.lr},       {"grad_norm", s.grad_norm}};
}

json to_json(const EpochRecord& e) {
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"val_accuracy", e.val_accuracy},
          {"val_agreement", e.val_agreement}};
}

json to_json(const TrainHistory& h) {
  json steps = json::array(), epochs = json::array();
  for (const auto& s : h.steps) steps.push_back(to_json(s));
  for (const auto& e : h.epochs) epochs.push_back(to_json(e));
  return {{"steps", steps},
          {"epochs", epochs},
          {"best_epoch", h.best_epoch},
          {"best_checkpoint", h.best_checkpoint},
          {"inputs", h.inputs}};
}

int64_t select_checkpoint(const TrainHistory& history, SelectCriterion criterion) {
  if (history.epochs.empty()) throw StateError("select_checkpoint: history has no epoch metrics");
  int64_t best = 0;
  for (size_t i = 0; i < history.epochs.size(); ++i) {
    const auto& e = history.epochs[i];
    const auto& b = history.epochs[best];
    const double v = criterion == SelectCriterion::ValAccuracy ? e.val_accuracy : e.val_agreement;
    const double bv = criterion == SelectCriterion::ValAccuracy ? b.val_accuracy : b.val_agreement;
    if (v >= bv) best = static_cast<int64_t>(i);
  }
  return best;
}

TrainResult train_teacher(Model model, const TrainData& data, const TeacherConfig& cfg, const TrainOptions& options) {
  if (cfg.epochs <= 0 || cfg.batch_size <= 0) throw ConfigError("teacher: epochs and batch_size must be positive");
  const bool multilabel = data.train.multilabel;
  const auto& train = data.train;
  StepFn step = [&](const Batch& b) {
    auto logits = model.forward(prepare_input(model, b.images));
    torch::Tensor loss;
    if (multilabel) {
      std::vector<torch::Tensor> t;
      for (auto i : b.indices) t.push_back(train.samples[i].targets);
      loss = torch::binary_cross_entropy_with_logits(logits, torch::stack(t).to(logits.scalar_type()));
    } else {
      std::vector<int64_t> y;
      for (auto i : b.indices) y.push_back(train.samples[i].label);
      loss = torch::cross_entropy_loss(logits, torch::tensor(y, torch::kLong));
    }
    return LossBreakdown{loss, torch::zeros({}, logits.options()), loss};
  };
  EvalFn eval = [&](const Model& m) { return validation(m, data.val, torch::Tensor()); };
  LoopParams p{cfg.epochs, cfg.batch_size, cfg.lr_peak, cfg.warmup_epochs, cfg.weight_decay, cfg.clip, cfg.seed,
               cfg.augment};
  TrainHistory history;
  history.inputs = {{"train_dataset", train.name},
                    {"train_fingerprint", dataset_fingerprint(train)},
                    {"train_fields_consumed", json::array({"sample_id", "image", multilabel ? "targets" : "label"})},
                    {"supervision", "labels"}};
  return run_loop(model, train, p, step, eval, options, std::move(history));
}

TrainResult distill(const Model& teacher, Model student, const TrainData& data, const DistillConfig& cfg,
                    const FrozenStore* store, const TrainOptions& options) {
  validate(cfg, student.family());
  if (teacher.mode() != Mode::Eval) throw StateError("distill: teacher must be in eval mode");
  if (teacher.spec().num_classes != student.spec().num_classes) {
    throw ConfigError("distill: teacher and student class counts differ");
  }
  if (cfg.method != DistillMethod::None && is_bcos(teacher.family()) != is_bcos(student.family())) {
    throw ConfigError("distill: explanation distillation needs teacher and student of the same kind (std or bcos)");
  }
  if (cfg.frozen && store == nullptr) throw IntegrityError("distill: frozen=true but no frozen store was given");
  if (cfg.frozen && cfg.method != DistillMethod::None &&
      store->manifest().value("method", "") != to_string(explain_method(cfg.method))) {
    throw IntegrityError("distill: frozen store method does not match the configured method");
  }

  Dataset train = cfg.shots ? subsample_shots(data.train, *cfg.shots, cfg.seed) : data.train;
  if (cfg.frozen) {
    if (store->manifest().value("model_id", "") != teacher.model_id()) {
      throw IntegrityError("distill: frozen store was built from a different teacher");
    }
    for (const auto& s : train.samples) store->at(s.sample_id);  // DataError if missing
  }
  const bool multilabel = cfg.loss.multilabel;
  const int64_t h = train.samples.front().image.size(1), w = train.samples.front().image.size(2);
  const auto t_method = default_method(teacher.family());
  const auto s_method = default_method(student.family());

  StepFn step = [&](const Batch& b) {
    const Model& s_model = student;
    const auto n = static_cast<int64_t>(b.indices.size());
    auto t_in = prepare_input(teacher, b.images);
    torch::Tensor zt;
    if (!cfg.frozen || cfg.frozen_maps_only) {
      torch::NoGradGuard no_grad;
      zt = teacher.forward(t_in);
    } else {
      std::vector<torch::Tensor> rows;
      for (auto i : b.indices) rows.push_back(store->at(train.samples[i].sample_id).teacher_logits);
      zt = torch::stack(rows);
    }
    auto zs = s_model.forward(prepare_input(s_model, b.images));
    zt = zt.to(zs.scalar_type());
    auto logit = logit_loss(zt, zs, cfg.loss);
    if (cfg.method == DistillMethod::None) return LossBreakdown{logit, torch::zeros_like(logit), logit};

    MapPairs pairs;
    torch::Tensor t_maps;
    if (cfg.frozen) {
      // The store holds one map per sample, for the teacher's top class.
      std::vector<torch::Tensor> maps;
      for (int64_t k = 0; k < n; ++k) {
        const auto& rec = store->at(train.samples[b.indices[k]].sample_id);
        const auto& t = b.transforms[k];
        maps.push_back(t.is_identity(h, w) ? rec.explanation.values
                                           : apply_geometry(rec.explanation.values, t, h, w));
        pairs.sample.push_back(k);
        pairs.cls.push_back(rec.explanation.class_id);
        pairs.weight.push_back(1.0 / static_cast<double>(n));
      }
      t_maps = torch::stack(maps);
    } else {
      pairs = select_classes(zt, multilabel);
    }
    auto sample_idx = torch::tensor(pairs.sample, torch::kLong);
    auto cls = torch::tensor(pairs.cls, torch::kLong);
    if (!cfg.frozen) t_maps = explain_batch(teacher, t_in.index_select(0, sample_idx), cls, t_method, false);
    const bool train_maps = cfg.loss.lambda_exp != 0.0;
    auto s_in = prepare_input(s_model, b.images).index_select(0, sample_idx);
    auto s_maps = explain_batch(s_model, s_in, cls, s_method, train_maps);
    t_maps = match_geometry(t_maps.to(s_maps.scalar_type()), s_maps.sizes().slice(1));
    if (cfg.loss.ablation_downsample) {
      const auto r = *cfg.loss.ablation_downsample;
      t_maps = downsample_map(t_maps, r, r);
      s_maps = downsample_map(s_maps, r, r);
    }
    auto per_pair = exp_loss_per_sample(t_maps, s_maps);
    auto weights = torch::tensor(pairs.weight, per_pair.options());
    auto exp = (per_pair * weights).sum();
    if (!train_maps) return LossBreakdown{logit, exp.detach(), logit};
    return LossBreakdown{logit, exp, logit + cfg.loss.lambda_exp * exp};
  };

  torch::Tensor teacher_val;
  if (!data.val.samples.empty()) teacher_val = predict_logits(teacher, data.val);
  EvalFn eval = [&](const Model& m) { return validation(m, data.val, teacher_val); };

  TrainHistory history;
  history.inputs = {{"train_dataset", train.name},
                    {"train_fingerprint", dataset_fingerprint(train)},
                    {"train_fields_consumed", json::array({"sample_id", "image"})},
                    {"val_dataset", data.val.name},
                    {"supervision", "teacher"},
                    {"teacher", teacher.model_id()},
                    {"frozen_store", cfg.frozen ? store->manifest() : json(nullptr)},
                    {"shots", cfg.shots ? json(*cfg.shots) : json(nullptr)}};
  LoopParams p{cfg.epochs, cfg.batch_size, cfg.lr_peak, cfg.warmup_epochs, cfg.weight_decay, cfg.clip, cfg.seed,
               cfg.augment};
  return run_loop(student, train, p, step, eval, options, std::move(history));
}

std::vector<SweepPoint> make_grid(const std::vector<double>& taus, const std::vector<double>& lambdas) {
  std::vector<SweepPoint> grid;
  for (double t : taus) {
    for (double l : lambdas) grid.push_back({t, l});
  }
  return grid;
}

SweepResult sweep(const std::vector<SweepPoint>& grid, const DistillConfig& base, const SweepRunner& run) {
  if (grid.empty()) throw ConfigError("sweep: grid is empty");
  SweepResult result;
  for (const auto& point : grid) {
    DistillConfig cfg = base;
    cfg.loss.tau = point.tau;
    cfg.loss.lambda_exp = point.lambda;
    SweepRun r;
    try {
      r = run(cfg);
      r.ok = true;
    } catch (const Error& e) {
      r = SweepRun{};
      r.error = e.what();
    }
    r.point = point;
    result.runs.push_back(std::move(r));
  }
  auto better = [](const SweepRun& a, const SweepRun& b) {
    if (a.val_accuracy != b.val_accuracy) return a.val_accuracy > b.val_accuracy;
    if (a.val_agreement != b.val_agreement) return a.val_agreement > b.val_agreement;
    if (a.point.tau != b.point.tau) return a.point.tau < b.point.tau;
    return a.point.lambda < b.point.lambda;
  };
  for (size_t i = 0; i < result.runs.size(); ++i) {
    if (!result.runs[i].ok) continue;
    if (result.best_index < 0 || better(result.runs[i], result.runs[result.best_index])) {
      result.best_index = static_cast<int64_t>(i);
    }
  }
  if (result.best_index < 0) throw StateError("sweep: every grid point failed");
  result.best = base;
  result.best.loss.tau = result.runs[result.best_index].point.tau;
  result.best.loss.lambda_exp = result.runs[result.best_index].point.lambda;
  return result;
}

SweepRunner distill_runner(const Model& teacher, const ModelSpec& student_spec, const TrainData& data,
                           const FrozenStore* store) {
  return [&teacher, student_spec, &data, store](const DistillConfig& cfg) {
    auto result = distill(teacher, make_model(student_spec), data, cfg, store);
    SweepRun r;
    const auto& e = result.history.epochs.at(result.history.best_epoch);
    r.val_accuracy = e.val_accuracy;
    r.val_agreement = e.val_agreement;
    r.history = std::move(result.history);
    return r;
  };
}

}  // namespace e2kd
