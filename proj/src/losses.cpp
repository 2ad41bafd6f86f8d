#include "e2kd/losses.hpp"

#include "e2kd/errors.hpp"
#include "e2kd/json_util.hpp"

namespace e2kd {
namespace {

std::pair<torch::Tensor, torch::Tensor> as_batch(const torch::Tensor& t, const torch::Tensor& s, const char* what) {
  if (!t.sizes().equals(s.sizes())) {
    throw InputError(std::string(what) + ": teacher/student logit shapes differ");
  }
  if (t.dim() == 1) return {t.unsqueeze(0), s.unsqueeze(0)};
  if (t.dim() != 2) throw InputError(std::string(what) + ": expected [K] or [N,K] logits");
  return {t, s};
}

void check_tau(double tau) {
  if (!(tau > 0)) throw ConfigError("tau: must be > 0");
}

}  // namespace

void validate(const LossConfig& cfg) {
  check_tau(cfg.tau);
  if (!(cfg.lambda_exp >= 0)) throw ConfigError("lambda_exp: must be >= 0");
  if (cfg.ablation_downsample && *cfg.ablation_downsample <= 0) {
    throw ConfigError("ablation_downsample: must be positive");
  }
}

json to_json(const LossConfig& cfg) {
  json j{{"tau", cfg.tau}, {"lambda_exp", cfg.lambda_exp}, {"multilabel", cfg.multilabel}};
  j["ablation_downsample"] = cfg.ablation_downsample ? json(*cfg.ablation_downsample) : json(nullptr);
  return j;
}

LossConfig loss_config_from_json(const json& j) {
  constexpr std::string_view ctx = "loss";
  require_known_keys(j, {"tau", "lambda_exp", "multilabel", "ablation_downsample"}, ctx);
  LossConfig cfg;
  read_optional(j, "tau", cfg.tau, ctx);
  read_optional(j, "lambda_exp", cfg.lambda_exp, ctx);
  read_optional(j, "multilabel", cfg.multilabel, ctx);
  if (j.contains("ablation_downsample") && !j.at("ablation_downsample").is_null()) {
    int64_t r = 0;
    read_optional(j, "ablation_downsample", r, ctx);
    cfg.ablation_downsample = r;
  }
  validate(cfg);
  return cfg;
}

torch::Tensor kd_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits, double tau) {
  check_tau(tau);
  auto [t, s] = as_batch(teacher_logits.detach(), student_logits, "kd_loss");
  auto log_p_t = torch::log_softmax(t / tau, 1);
  auto log_p_s = torch::log_softmax(s / tau, 1);
  auto kl = (log_p_t.exp() * (log_p_t - log_p_s)).sum(1);
  return tau * tau * kl.mean();
}

torch::Tensor mld_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits, double tau) {
  check_tau(tau);
  auto [t, s] = as_batch(teacher_logits.detach(), student_logits, "mld_loss");
  // log σ(z) and log(1-σ(z)) = log σ(-z), computed stably.
  auto lp_t = torch::log_sigmoid(t / tau), lq_t = torch::log_sigmoid(-t / tau);
  auto lp_s = torch::log_sigmoid(s / tau), lq_s = torch::log_sigmoid(-s / tau);
  auto kl = lp_t.exp() * (lp_t - lp_s) + lq_t.exp() * (lq_t - lq_s);
  return tau * kl.sum(1).mean();
}

torch::Tensor exp_loss_per_sample(const torch::Tensor& teacher_maps, const torch::Tensor& student_maps) {
  if (!teacher_maps.sizes().equals(student_maps.sizes())) {
    throw InputError("exp_loss: teacher/student map shapes differ (resize first)");
  }
  auto t = teacher_maps.detach().flatten(1).to(student_maps.scalar_type());
  auto s = student_maps.flatten(1);
  auto dot = (t * s).sum(1);
  auto tn = t.norm(2, 1);
  // Norm of s through a safe sqrt so zero maps produce no NaN gradient.
  auto s_sq = (s * s).sum(1);
  auto valid = (tn > 0) & (s_sq > 0);
  auto safe_sq = torch::where(valid, s_sq, torch::ones_like(s_sq));
  auto sn = torch::sqrt(safe_sq);
  auto denom = torch::where(valid, tn * sn, torch::ones_like(sn));
  auto cos = torch::where(valid, dot / denom, torch::zeros_like(dot));
  return 1.0 - cos;
}

torch::Tensor exp_loss(const torch::Tensor& teacher_maps, const torch::Tensor& student_maps) {
  return exp_loss_per_sample(teacher_maps, student_maps).mean();
}

torch::Tensor exp_loss(const ExplanationMap& teacher, const ExplanationMap& student) {
  return exp_loss(teacher.values.unsqueeze(0), student.values.unsqueeze(0));
}

double map_cosine(const torch::Tensor& a, const torch::Tensor& b) {
  torch::NoGradGuard no_grad;
  return 1.0 - exp_loss(a.to(torch::kFloat64).unsqueeze(0), b.to(torch::kFloat64).unsqueeze(0)).item<double>();
}

torch::Tensor logit_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits,
                         const LossConfig& cfg) {
  validate(cfg);
  return cfg.multilabel ? mld_loss(teacher_logits, student_logits, cfg.tau)
                        : kd_loss(teacher_logits, student_logits, cfg.tau);
}

LossBreakdown composite_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits,
                             const torch::Tensor& teacher_maps, const torch::Tensor& student_maps,
                             const LossConfig& cfg) {
  auto logit = logit_loss(teacher_logits, student_logits, cfg);
  auto t_maps = teacher_maps, s_maps = student_maps;
  if (cfg.ablation_downsample) {
    t_maps = downsample_map(t_maps, *cfg.ablation_downsample, *cfg.ablation_downsample);
    s_maps = downsample_map(s_maps, *cfg.ablation_downsample, *cfg.ablation_downsample);
  }
  auto exp = exp_loss(t_maps, s_maps);
  if (cfg.lambda_exp == 0.0) return {logit, exp.detach(), logit};
  return {logit, exp, logit + cfg.lambda_exp * exp};
}

}  // namespace e2kd
