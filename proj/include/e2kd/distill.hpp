#pragma once

// Training engine: supervised teacher training, online and frozen-teacher
// distillation, learning-rate schedule, clipping, checkpoint selection and
// (tau, lambda) sweeps.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "e2kd/data.hpp"
#include "e2kd/frozen_store.hpp"
#include "e2kd/losses.hpp"
#include "e2kd/nets.hpp"

namespace e2kd {

using json = nlohmann::json;

enum class DistillMethod { None, GradCam, Bcos };
enum class ClipMode { Norm, Adaptive };

std::string to_string(DistillMethod m);
DistillMethod distill_method_from_string(const std::string& s);
std::string to_string(ClipMode m);
ClipMode clip_mode_from_string(const std::string& s);

struct DistillConfig {
  LossConfig loss;
  DistillMethod method = DistillMethod::None;
  bool frozen = false;
  /// Frozen explanations with online teacher logits (not on the default path).
  bool frozen_maps_only = false;
  int64_t epochs = 60;
  int64_t batch_size = 64;
  double lr_peak = 1e-2;
  int64_t warmup_epochs = 5;
  ClipMode clip = ClipMode::Norm;
  double weight_decay = 1e-4;
  uint64_t seed = 0;
  std::optional<int64_t> shots;
  AugmentParams augment;

  bool operator==(const DistillConfig& o) const;
};

/// Desk-scale defaults for a student family (B-cos: lr 1e-3, adaptive
/// clipping, no weight decay; std: lr 1e-2, norm clipping, weight decay 1e-4).
DistillConfig default_distill_config(Family student_family);

/// Family-independent checks (positive sizes, warmup < epochs, loss config).
void validate(const DistillConfig& cfg);
/// Adds the student-dependent rules: method/family match, no weight decay
/// for B-cos students.
void validate(const DistillConfig& cfg, Family student_family);

json to_json(const DistillConfig& cfg);
/// Strict: unknown keys are rejected.
DistillConfig distill_config_from_json(const json& j);

/// Linear warmup 0 -> lr_peak, then cosine decay to 0 at total_steps.
double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr_peak);

/// Per-tensor clipping of gradient norm to factor * max(|p|, 1e-3).
void clip_adaptive(const std::vector<torch::Tensor>& params, double factor = 0.01);

struct StepRecord {
  int64_t epoch = 0, step = 0;
  double logit = 0, exp = 0, total = 0, lr = 0, grad_norm = 0;
};

struct EpochRecord {
  int64_t epoch = 0;
  double train_loss = 0;
  double val_accuracy = 0;
  double val_agreement = 0;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  int64_t best_epoch = -1;
  std::string best_checkpoint;  // path when checkpoints were written
  json inputs;                  // audit of consumed data fields and artifacts
};

json to_json(const TrainHistory& h);
json to_json(const StepRecord& s);
json to_json(const EpochRecord& e);

enum class SelectCriterion { ValAccuracy, ValAgreement };

/// Index into history.epochs maximizing the criterion, ties to the later
/// epoch. Throws StateError when there are no epoch metrics.
int64_t select_checkpoint(const TrainHistory& history, SelectCriterion criterion = SelectCriterion::ValAccuracy);

struct TrainData {
  Dataset train;
  Dataset val;
};

struct TrainOptions {
  /// When set, per-epoch checkpoints and the selected one go here.
  std::optional<std::filesystem::path> checkpoint_dir;
  /// Called after each epoch with its record (progress logs).
  std::function<void(const EpochRecord&)> on_epoch;
  /// Stop after this many optimizer steps (tests); 0 = no limit.
  int64_t max_steps = 0;
  /// Skip per-epoch validation (tests of the step loop only).
  bool validate_each_epoch = true;
};

struct TrainResult {
  Model model;  // selected checkpoint, eval mode
  TrainHistory history;
};

struct TeacherConfig {
  int64_t epochs = 30;
  int64_t batch_size = 64;
  double lr_peak = 2e-3;
  int64_t warmup_epochs = 2;
  double weight_decay = 1e-4;
  ClipMode clip = ClipMode::Norm;
  uint64_t seed = 0;
  AugmentParams augment;
};

json to_json(const TeacherConfig& cfg);
TeacherConfig teacher_config_from_json(const json& j);

/// Label-supervised training (cross-entropy, or binary cross-entropy for
/// multi-label data). Selection by validation accuracy.
TrainResult train_teacher(Model model, const TrainData& data, const TeacherConfig& cfg,
                          const TrainOptions& options = {});

/// Distillation with the composite objective. Online mode runs the teacher
/// on the same augmented batch as the student; frozen mode looks teacher
/// outputs up in `store` and co-augments the stored maps. The teacher is
/// never modified. Labels of the training set are never read.
TrainResult distill(const Model& teacher, Model student, const TrainData& data, const DistillConfig& cfg,
                    const FrozenStore* store = nullptr, const TrainOptions& options = {});

struct SweepPoint {
  double tau = 1.0;
  double lambda = 0.0;
  bool operator==(const SweepPoint&) const = default;
};

std::vector<SweepPoint> make_grid(const std::vector<double>& taus, const std::vector<double>& lambdas);

struct SweepRun {
  SweepPoint point;
  bool ok = false;
  std::string error;
  double val_accuracy = 0;
  double val_agreement = 0;
  TrainHistory history;
};

struct SweepResult {
  DistillConfig best;
  int64_t best_index = -1;
  std::vector<SweepRun> runs;
};

/// Trains (via `run`) one configuration per grid point and picks the best
/// validation accuracy; ties go to higher validation agreement, then to the
/// lexicographically smaller (tau, lambda). Failed runs are recorded and
/// excluded. Throws StateError when every run failed.
using SweepRunner = std::function<SweepRun(const DistillConfig&)>;
SweepResult sweep(const std::vector<SweepPoint>& grid, const DistillConfig& base, const SweepRunner& run);

/// Runner that calls distill() and reads the selected epoch's metrics.
SweepRunner distill_runner(const Model& teacher, const ModelSpec& student_spec, const TrainData& data,
                           const FrozenStore* store = nullptr);

}  // namespace e2kd
