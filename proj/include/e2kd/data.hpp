#pragma once

// Synthetic datasets: a two-class foreground/background dataset with a
// controllable class-background correlation, and an 8-class shapes dataset
// (single- or multi-label) with per-object masks. Plus few-shot subsampling,
// joint image/map augmentation and the unrelated-data distillation view.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "e2kd/explain.hpp"

namespace e2kd {

using json = nlohmann::json;
using Rng = std::mt19937_64;

struct BBox {
  int64_t top = 0, left = 0, height = 0, width = 0;
  bool operator==(const BBox&) const = default;
};

/// Tight box of a boolean [H,W] mask. Throws DataError for an empty mask.
BBox tight_bbox(const torch::Tensor& mask);

struct ObjectAnnotation {
  int64_t class_id = 0;
  BBox bbox;
  torch::Tensor mask;  // bool [H,W]
};

struct Sample {
  std::string sample_id;
  torch::Tensor image;   // float32 [3,H,W] in [0,1]
  int64_t label = 0;     // foreground class (first object for multi-label)
  int64_t bg_class = -1; // background class; -1 when the dataset has none
  torch::Tensor targets; // float32 [classes], multi-hot
  std::vector<ObjectAnnotation> objects;

  std::pair<int64_t, int64_t> group() const { return {label, bg_class}; }
  torch::Tensor fg_mask() const;
  /// Box of the first object (the foreground object in the biased dataset).
  BBox bbox() const { return objects.front().bbox; }
};

std::string group_name(std::pair<int64_t, int64_t> group);

struct Dataset {
  std::string name;
  int64_t num_classes = 2;
  bool multilabel = false;
  std::vector<Sample> samples;

  size_t size() const { return samples.size(); }
  /// Images [N,3,H,W] for the given indices (all when empty).
  torch::Tensor images(const std::vector<int64_t>& indices = {}) const;
  torch::Tensor labels() const;
  torch::Tensor targets() const;
};

struct DatasetSplit {
  std::string kind;  // "biased" or "shapes"
  Dataset train, val, test_id, test_ood;
  double correlation = 0.5;
  uint64_t seed = 0;
  json params;  // generator parameters, recorded in archives
};

enum class RenderFamily { A, B };

struct BiasedParams {
  int64_t n_train = 400;
  int64_t n_eval = 200;  // val, test_id and test_ood each
  double correlation = 0.5;
  uint64_t seed = 0;
  RenderFamily family = RenderFamily::A;
  int64_t image_size = 64;
};

/// Two foreground shapes on two texture/colour-distinct backgrounds. A sample
/// is aligned when label == bg_class. Train and val contain round(correlation·n)
/// aligned samples; test_id is all aligned, test_ood all anti-aligned.
/// Family B uses disjoint shapes and textures (for unrelated-data runs).
DatasetSplit generate_biased_dataset(const BiasedParams& params);

struct ShapesParams {
  int64_t n_train = 800;
  int64_t n_eval = 400;  // val and test_id each
  bool multilabel = false;
  uint64_t seed = 0;
  int64_t image_size = 64;
};

inline constexpr int64_t kShapeClasses = 8;

/// 8 shape classes on cluttered backgrounds. Single-label: one object per
/// image, balanced classes. Multi-label: 1..3 objects of distinct classes.
/// test_ood is empty.
DatasetSplit generate_shapes_dataset(const ShapesParams& params);

json to_json(const BiasedParams& p);
json to_json(const ShapesParams& p);
/// Strict readers; missing keys keep their defaults, unknown keys throw ConfigError.
BiasedParams biased_params_from_json(const json& j);
ShapesParams shapes_params_from_json(const json& j);

/// Exactly k samples per class (single-label), drawn without replacement.
/// Keeps the original relative order. Throws DataError naming a short class.
Dataset subsample_shots(const Dataset& dataset, int64_t k, uint64_t seed);

/// Random subset of the given fraction, stratified by class.
Dataset subsample_fraction(const Dataset& dataset, double fraction, uint64_t seed);

struct AugmentParams {
  bool enabled = true;
  double scale_min = 0.6, scale_max = 1.0;
  double ratio_min = 3.0 / 4.0, ratio_max = 4.0 / 3.0;
  double flip_prob = 0.5;
};

/// Random crop (area scale and aspect ratio bounds) plus flip, resized back
/// to the base size. Returns the identity when augmentation is disabled.
GeometricTransform sample_transform(Rng& rng, int64_t h, int64_t w, const AugmentParams& params = {});

struct AugmentedPair {
  torch::Tensor image;
  std::optional<torch::Tensor> map;
  GeometricTransform transform;
};

/// Samples one transform and applies it to the image and (if given) the map.
AugmentedPair augment_pair(const torch::Tensor& image, const std::optional<torch::Tensor>& map, Rng& rng,
                           const AugmentParams& params = {});

/// Training images from one dataset, evaluation on another's test splits.
struct DistillationView {
  Dataset train;     // images only; labels are never consumed
  Dataset val;       // from the evaluation dataset
  Dataset test_id;
  Dataset test_ood;
};

/// Distill on B, evaluate on A. Throws ConfigError when sample ids overlap.
DistillationView make_unrelated_split(const DatasetSplit& a, const DatasetSplit& b);

/// Content digest over sample ids, labels and pixels.
std::string dataset_fingerprint(const Dataset& dataset);
std::string dataset_fingerprint(const DatasetSplit& split);

void save_dataset(const DatasetSplit& split, const std::filesystem::path& path);
DatasetSplit load_dataset(const std::filesystem::path& path);

}  // namespace e2kd
