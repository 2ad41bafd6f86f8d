#pragma once

// Evaluation: accuracy, teacher-student agreement, per-group accuracy,
// localization scores (EPG, thresholded IoU) and shift-similarity curves.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "e2kd/data.hpp"
#include "e2kd/explain.hpp"
#include "e2kd/nets.hpp"

namespace e2kd {

using json = nlohmann::json;

/// Fraction of equal entries. Throws InputError for empty or mismatched input.
double agreement(const torch::Tensor& preds_a, const torch::Tensor& preds_b);

/// Top-1 correctness per sample: argmax == label, or (multi-label) argmax is
/// one of the positive labels.
torch::Tensor top1_correct(const torch::Tensor& logits, const Dataset& dataset);

/// Logits for a whole dataset, evaluated in batches without augmentation.
torch::Tensor predict_logits(const Model& model, const Dataset& dataset, int64_t batch_size = 64);

struct Score {
  double value = 0.0;
  bool degenerate = false;  // set when the map carries no usable mass
};

/// Spatial attribution at input resolution: B-cos maps [C,H,W] reduce to the
/// channel sum of positive parts; feature maps [h,w] are bilinearly
/// upsampled to (height, width).
torch::Tensor spatial_attribution(const torch::Tensor& map, int64_t height, int64_t width);

/// Positive mass inside the box over total positive mass.
Score epg(const torch::Tensor& map, const BBox& bbox, int64_t height, int64_t width);
Score epg(const ExplanationMap& map, const BBox& bbox, int64_t height, int64_t width);

/// IoU between the box and the map's positive part, min-max normalized and
/// binarized at `threshold` (strictly greater).
Score iou(const torch::Tensor& map, const BBox& bbox, int64_t height, int64_t width, double threshold = 0.05);
Score iou(const ExplanationMap& map, const BBox& bbox, int64_t height, int64_t width, double threshold = 0.05);

/// Explains a batch of raw RGB images [N,3,H,W] for the given classes;
/// returns maps at input resolution, [N,H,W] or [N,C,H,W].
using Explainer = std::function<torch::Tensor(const torch::Tensor& images, const torch::Tensor& class_ids)>;

/// The explainer for a model and method; feature-space maps are upsampled.
Explainer model_explainer(const Model& model, ExplainMethod method);

/// Diagonal integer shift by t pixels (content moves down-right). Vacated
/// pixels are zero and lie outside the region compared by the curve.
torch::Tensor shift_diagonal(const torch::Tensor& images, int64_t t);

/// Cosine similarity of maps of shifted images against the unshifted map,
/// over the intersecting region only, averaged over images. curve[0] = 1.
/// Classes are fixed to `class_ids` (typically the T=0 prediction).
std::vector<double> shift_similarity_curve(const Explainer& explainer, const torch::Tensor& images,
                                           const torch::Tensor& class_ids, int64_t max_shift);
std::vector<double> shift_similarity_curve(const Model& model, ExplainMethod method, const torch::Tensor& images,
                                           int64_t max_shift);

/// Smallest T >= 1 at a local maximum within `eps` of the global maximum
/// over T >= 1; nullopt ("aperiodic") when none qualifies.
std::optional<int64_t> estimate_period(const std::vector<double>& curve, double eps = 0.02);

struct EvalConfig {
  int64_t batch_size = 64;
  bool localization = true;       // EPG / IoU on test_id
  int64_t localization_limit = 0; // 0 = all test_id samples
  double iou_threshold = 0.05;
  bool shift_curve = true;
  int64_t max_shift = 16;
  int64_t shift_images = 8;
};

json to_json(const EvalConfig& c);
EvalConfig eval_config_from_json(const json& j);

struct MetricsReport {
  double accuracy = 0;   // over test_id ∪ test_ood
  double agreement = 0;  // with the teacher, same samples
  std::map<std::string, double> per_group_accuracy;
  std::map<std::string, int64_t> group_sizes;
  double id_accuracy = 0, ood_accuracy = 0;
  double id_agreement = 0, ood_agreement = 0;
  double epg = 0, iou = 0;
  int64_t localization_count = 0, degenerate_maps = 0;
  std::vector<std::pair<int64_t, double>> shift_curve;
  std::optional<int64_t> estimated_period;
  int64_t shift_images = 0;
  int64_t n_id = 0, n_ood = 0;
};

json to_json(const MetricsReport& r);
MetricsReport metrics_report_from_json(const json& j);
/// Two-column "shift<TAB>similarity" table.
std::string shift_curve_tsv(const MetricsReport& r);

/// Fills every report field. Both models must be in eval mode (StateError).
MetricsReport evaluate(const Model& student, const Model& teacher, const Dataset& test_id, const Dataset& test_ood,
                       const EvalConfig& config = {});

}  // namespace e2kd
