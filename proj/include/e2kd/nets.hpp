#pragma once

// Desk-scale model zoo: standard CNNs with a GAP+linear head, bias-free
// B-cos CNNs, and a small patch-tokenized B-cos ViT.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace e2kd {

using json = nlohmann::json;

enum class Family { StdCnn, BcosCnn, BcosVit };
enum class DepthPreset { Teacher, Student };
enum class Mode { Train, Eval };

std::string to_string(Family f);
std::string to_string(DepthPreset p);
Family family_from_string(const std::string& s);
DepthPreset preset_from_string(const std::string& s);

inline bool is_bcos(Family f) { return f == Family::BcosCnn || f == Family::BcosVit; }

struct ModelSpec {
  Family family = Family::StdCnn;
  DepthPreset depth_preset = DepthPreset::Student;
  int64_t num_classes = 2;
  int64_t input_channels = 3;
  int64_t input_size = 64;
  int64_t patch_size = 8;        // bcos_vit only
  double bcos_b = 2.0;           // bcos_* only
  double logit_scale = 10.0;     // bcos_* only, fixed output multiplier
  int64_t cnn_total_stride = 4;  // std_cnn / bcos_cnn only
  int64_t embed_dim = 64;        // bcos_vit only
  int64_t vit_depth = 4;         // bcos_vit only
  int64_t num_heads = 4;         // bcos_vit only
  uint64_t seed = 0;

  bool operator==(const ModelSpec&) const = default;
};

/// Spec with the desk-scale defaults for a family (6 input channels for B-cos).
ModelSpec default_spec(Family family, DepthPreset preset, int64_t num_classes, uint64_t seed);

/// Throws ConfigError naming the offending field.
void validate(const ModelSpec& spec);

json to_json(const ModelSpec& spec);
/// Strict: unknown keys are rejected.
ModelSpec spec_from_json(const json& j);

/// Number of ViT tokens, (H/patch)·(W/patch).
int64_t vit_token_count(const ModelSpec& spec);

/// Functional B-cos layers (bias-free, unit-norm weight rows/filters). The
/// networks are built from these; exposed for layer-level checks.
torch::Tensor bcos_linear(const torch::Tensor& x, const torch::Tensor& weight, double b);
torch::Tensor bcos_conv2d(const torch::Tensor& x, const torch::Tensor& weight, int64_t stride, int64_t padding,
                          double b);

/// Stride of each CNN stage for a spec (product equals cnn_total_stride).
std::vector<int64_t> cnn_stage_strides(const ModelSpec& spec);
std::vector<int64_t> cnn_stage_channels(const ModelSpec& spec);

/// While an instance is alive on the current thread, every B-cos scaling
/// factor (|cos|^(B-1), normalization scales, attention matrices) is detached,
/// so the network is exactly linear in its input: z(x) = W(x) x.
class DynamicLinearScope {
 public:
  DynamicLinearScope();
  ~DynamicLinearScope();
  DynamicLinearScope(const DynamicLinearScope&) = delete;
  DynamicLinearScope& operator=(const DynamicLinearScope&) = delete;
  static bool active();

 private:
  bool previous_;
};

/// Common interface of the concrete torch modules behind Model.
class Network : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& x) = 0;

  /// Final feature map [N,K,h,w] (CNN families only).
  virtual torch::Tensor features(const torch::Tensor& x);
  /// Head applied to the final feature map.
  virtual torch::Tensor classify(const torch::Tensor& feats);
  /// GAP+linear head weight [classes, K] and bias [classes] (std_cnn only).
  virtual torch::Tensor head_weight();
  virtual torch::Tensor head_bias();
};

class Model {
 public:
  explicit Model(ModelSpec spec);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const { return spec_; }
  Family family() const { return spec_.family; }
  Mode mode() const { return mode_; }
  void set_mode(Mode mode);

  /// Logits [N, num_classes]. Throws InputError on shape mismatch or
  /// non-finite input.
  torch::Tensor forward(const torch::Tensor& batch) const;
  torch::Tensor features(const torch::Tensor& batch) const;
  torch::Tensor classify(const torch::Tensor& feats) const;
  torch::Tensor head_weight() const;
  torch::Tensor head_bias() const;

  std::vector<torch::Tensor> parameters() const;
  /// Sorted by registration order.
  std::vector<std::pair<std::string, torch::Tensor>> named_parameters() const;
  int64_t parameter_count() const;

  /// Overwrites parameter values by name; every name must exist with a matching shape.
  void load_parameters(const std::vector<std::pair<std::string, torch::Tensor>>& params);
  void zero_parameters();
  bool all_parameters_finite() const;

  Model clone() const;
  void to(torch::Dtype dtype);
  torch::Dtype dtype() const;

  /// "<family>-<preset>-s<seed>-<12 hex chars of a parameter digest>".
  std::string model_id() const;
  /// Full hex digest over spec and parameter bytes.
  std::string digest() const;

 private:
  void check_input(const torch::Tensor& batch) const;

  ModelSpec spec_;
  std::shared_ptr<Network> net_;
  Mode mode_ = Mode::Train;
};

Model make_model(const ModelSpec& spec);

/// [N,3,H,W] in [0,1] -> [N,6,H,W] with channels (r,g,b,1-r,1-g,1-b).
torch::Tensor encode_bcos_input(const torch::Tensor& images);

/// Adapts raw RGB images to what the model consumes (identity for std_cnn).
torch::Tensor prepare_input(const Model& model, const torch::Tensor& rgb);

/// Dynamic linear weights W(x) for every class: [classes, C, H, W] for a
/// single image x [C,H,W]. With create_graph the result stays differentiable
/// w.r.t. the model parameters.
torch::Tensor effective_weights(const Model& model, const torch::Tensor& x, bool create_graph = false);

/// W(x)[c] for one class per batch element: [N,C,H,W].
torch::Tensor effective_weights_for(const Model& model, const torch::Tensor& batch,
                                    const torch::Tensor& class_ids, bool create_graph);

void save_checkpoint(const Model& model, const std::filesystem::path& path, const json& extra_meta = json::object());
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace e2kd
