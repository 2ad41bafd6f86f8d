#pragma once

// Attribution maps: CAM and GradCAM over the final feature map of a standard
// CNN, and B-cos contribution maps W(x)[c] ⊙ x in input space. Also the
// geometric operations shared by the image and the map pipelines.

#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "e2kd/nets.hpp"

namespace e2kd {

enum class ExplainMethod { Cam, GradCam, Bcos };

std::string to_string(ExplainMethod m);
ExplainMethod explain_method_from_string(const std::string& s);

/// Throws UnsupportedError unless (family, method) is one of
/// std_cnn ↔ {cam, gradcam} or bcos_* ↔ bcos.
void check_compatible(Family family, ExplainMethod method);

/// Natural explanation method of a family: gradcam for std_cnn, bcos otherwise.
ExplainMethod default_method(Family family);

struct ExplanationMap {
  torch::Tensor values;  // [h,w] (cam/gradcam) or [C,H,W] (bcos)
  int64_t class_id = 0;
  ExplainMethod source = ExplainMethod::GradCam;
  std::string model_id;
};

/// Single-image explanation for `class_id`; `x` is the model input [C,H,W].
/// The result is detached (a target, not a training signal).
ExplanationMap explain(const Model& model, const torch::Tensor& x, int64_t class_id, ExplainMethod method);

/// Raw CAM: sum_k w[c,k] A^k over the final feature maps. No ReLU.
ExplanationMap cam(const Model& model, const torch::Tensor& x, int64_t class_id);

/// GradCAM: ReLU(sum_k alpha_k A^k) with alpha_k = sum_ij dz_c/dA^k_ij, i.e.
/// the spatial mean of the gradient rescaled by h·w, so that alpha equals the
/// head weights on a GAP+linear head.
ExplanationMap gradcam(const Model& model, const torch::Tensor& x, int64_t class_id);

/// GradCAM channel weights alpha [K] for one image.
torch::Tensor gradcam_weights(const Model& model, const torch::Tensor& x, int64_t class_id);

/// Batched maps, one class per sample: [N,h,w] or [N,C,H,W]. With
/// `differentiable` the maps carry gradients to the model parameters (used
/// on the student); otherwise they are detached.
torch::Tensor explain_batch(const Model& model, const torch::Tensor& batch, const torch::Tensor& class_ids,
                            ExplainMethod method, bool differentiable);

/// Crop box in base-image pixel coordinates, optional horizontal flip, and
/// the output size in image pixels.
struct GeometricTransform {
  int64_t top = 0;
  int64_t left = 0;
  int64_t height = 0;
  int64_t width = 0;
  bool hflip = false;
  int64_t out_height = 0;
  int64_t out_width = 0;

  static GeometricTransform identity(int64_t h, int64_t w) { return {0, 0, h, w, false, h, w}; }
  bool is_identity(int64_t base_h, int64_t base_w) const {
    return top == 0 && left == 0 && height == base_h && width == base_w && !hflip && out_height == base_h &&
           out_width == base_w;
  }
  bool operator==(const GeometricTransform&) const = default;
};

/// Crop, optional flip, bilinear resize of the trailing two (spatial) dims
/// of `values`. Maps whose resolution differs from the base image (feature
/// maps) are handled by scaling the box; the output resolution scales the
/// same way. Throws GeometryError for boxes outside the base image.
torch::Tensor apply_geometry(const torch::Tensor& values, const GeometricTransform& t, int64_t base_h,
                             int64_t base_w);
ExplanationMap apply_geometry(const ExplanationMap& map, const GeometricTransform& t, int64_t base_h,
                              int64_t base_w);

/// Average pooling of the trailing spatial dims to target resolution.
/// Throws GeometryError when the target exceeds the source.
torch::Tensor downsample_map(const torch::Tensor& values, int64_t target_h, int64_t target_w);
ExplanationMap downsample_map(const ExplanationMap& map, int64_t target_h, int64_t target_w);

/// Bilinear resize of batched maps [N,(C,)h,w] to another map shape
/// (used to compare maps of different geometry). Identity when shapes match.
torch::Tensor match_geometry(const torch::Tensor& maps, at::IntArrayRef target_sample_shape);

/// Min-max normalized 8-bit grayscale PGM export of a map (channels summed
/// over positive parts). For visualization only.
void write_map_image(const ExplanationMap& map, const std::string& path);

}  // namespace e2kd
