#pragma once

// Distillation objectives. Teacher-side arguments are always detached.

#include <optional>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "e2kd/explain.hpp"

namespace e2kd {

using json = nlohmann::json;

struct LossConfig {
  double tau = 1.0;
  double lambda_exp = 0.0;
  bool multilabel = false;
  /// When set, both maps are average-pooled to this square resolution
  /// before comparison (explanation-downsampling ablation).
  std::optional<int64_t> ablation_downsample;

  bool operator==(const LossConfig&) const = default;
};

void validate(const LossConfig& cfg);
json to_json(const LossConfig& cfg);
LossConfig loss_config_from_json(const json& j);

/// tau^2 · KL(softmax(z_T/tau) || softmax(z_S/tau)), averaged over the batch.
/// Accepts [K] or [N,K] logits.
torch::Tensor kd_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits, double tau);

/// tau · sum_j KL([σ(z_T,j/tau), 1-σ(z_T,j/tau)] || [σ(z_S,j/tau), 1-σ(z_S,j/tau)]),
/// averaged over the batch.
torch::Tensor mld_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits, double tau);

/// Per-sample 1 - cos(flatten(E_T), flatten(E_S)) for batched maps [N,...].
/// A zero-norm map on either side gives similarity 0 (loss 1) and no gradient.
torch::Tensor exp_loss_per_sample(const torch::Tensor& teacher_maps, const torch::Tensor& student_maps);

/// Batch mean of exp_loss_per_sample.
torch::Tensor exp_loss(const torch::Tensor& teacher_maps, const torch::Tensor& student_maps);
torch::Tensor exp_loss(const ExplanationMap& teacher, const ExplanationMap& student);

/// Cosine similarity used by the explanation loss and the shift curves.
double map_cosine(const torch::Tensor& a, const torch::Tensor& b);

struct LossBreakdown {
  torch::Tensor logit;  // kd_loss or mld_loss
  torch::Tensor exp;    // explanation term (0 when not computed)
  torch::Tensor total;
};

/// L = L_logit + lambda · L_exp. With lambda = 0 the total is the logit loss
/// tensor itself, so the objective is bit-identical to plain distillation.
LossBreakdown composite_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits,
                             const torch::Tensor& teacher_maps, const torch::Tensor& student_maps,
                             const LossConfig& cfg);

/// Logit term only (for runs where no explanation is involved).
torch::Tensor logit_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits,
                         const LossConfig& cfg);

}  // namespace e2kd
