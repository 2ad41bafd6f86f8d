#include "e2kd/nets.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <sstream>

#include "e2kd/archive.hpp"
#include "e2kd/errors.hpp"
#include "e2kd/json_util.hpp"

namespace e2kd {
namespace {

thread_local bool g_dynamic_linear = false;
// Set while the batch is [x; x.detach()]: the first half then reuses the
// scaling factors of the second, constant in x yet still parameter-dependent.
thread_local bool g_paired = false;

constexpr double kNormEps = 1e-6;

// Holds the |cos|^(B-1) factor constant when explaining.
torch::Tensor dynamic(const torch::Tensor& t) {
  if (!g_dynamic_linear) return t;
  if (!g_paired) return t.detach();
  auto frozen = t.narrow(0, t.size(0) / 2, t.size(0) / 2);
  return torch::cat({frozen, frozen}, 0);
}

struct PairedScope {
  bool previous = g_paired;
  PairedScope() { g_paired = true; }
  ~PairedScope() { g_paired = previous; }
};


torch::Tensor bcos_scale(const torch::Tensor& linear, const torch::Tensor& input_norm, double b) {
  if (b == 1.0) return torch::ones_like(linear);
  auto cos = linear / input_norm;
  auto scale = b == 2.0 ? cos.abs() : cos.abs().pow(b - 1.0);
  return dynamic(scale);
}

}  // namespace

// out = w_hat^T x * |cos(x, w_hat)|^(B-1), bias-free, unit-norm weight rows.
torch::Tensor bcos_conv2d(const torch::Tensor& x, const torch::Tensor& weight, int64_t stride, int64_t padding,
                          double b) {
  auto w = weight / weight.flatten(1).norm(2, 1).clamp_min(1e-12).view({-1, 1, 1, 1});
  auto lin = torch::conv2d(x, w, {}, stride, padding);
  if (b == 1.0) return lin;
  auto ones = torch::ones({1, weight.size(1), weight.size(2), weight.size(3)}, x.options());
  auto norm = torch::sqrt(torch::conv2d(x * x, ones, {}, stride, padding) + kNormEps);
  return lin * bcos_scale(lin, norm, b);
}

torch::Tensor bcos_linear(const torch::Tensor& x, const torch::Tensor& weight, double b) {
  auto w = weight / weight.norm(2, 1, true).clamp_min(1e-12);
  auto lin = torch::matmul(x, w.t());
  if (b == 1.0) return lin;
  auto norm = torch::sqrt((x * x).sum(-1, true) + kNormEps);
  return lin * bcos_scale(lin, norm, b);
}

namespace {

class BcosConv2dImpl : public torch::nn::Module {
 public:
  BcosConv2dImpl(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding, double b)
      : stride_(stride), padding_(padding), b_(b) {
    weight = register_parameter("weight", torch::empty({out, in, kernel, kernel}));
  }

  torch::Tensor forward(const torch::Tensor& x) { return bcos_conv2d(x, weight, stride_, padding_, b_); }

  torch::Tensor weight;

 private:
  int64_t stride_, padding_;
  double b_;
};
TORCH_MODULE(BcosConv2d);

class BcosLinearImpl : public torch::nn::Module {
 public:
  BcosLinearImpl(int64_t in, int64_t out, double b) : b_(b) {
    weight = register_parameter("weight", torch::empty({out, in}));
  }

  torch::Tensor forward(const torch::Tensor& x) { return bcos_linear(x, weight, b_); }

  torch::Tensor weight;

 private:
  double b_;
};
TORCH_MODULE(BcosLinear);

// Per-position normalization over channels: centering is linear and the
// 1/std factor is a dynamic scaling, so the layer is linear when explaining.
class PositionNorm2dImpl : public torch::nn::Module {
 public:
  explicit PositionNorm2dImpl(int64_t channels) {
    gain = register_parameter("gain", torch::empty({channels}));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto centered = x - x.mean(1, true);
    auto std = torch::sqrt((centered * centered).mean(1, true) + kNormEps);
    return centered * dynamic(1.0 / std) * gain.view({1, -1, 1, 1});
  }
  torch::Tensor gain;
};
TORCH_MODULE(PositionNorm2d);

// Centered, bias-free layer norm over the last dim; 1/std is dynamic.
class TokenNormImpl : public torch::nn::Module {
 public:
  explicit TokenNormImpl(int64_t dim) { gain = register_parameter("gain", torch::empty({dim})); }
  torch::Tensor forward(const torch::Tensor& x) {
    auto centered = x - x.mean(-1, true);
    auto std = torch::sqrt((centered * centered).mean(-1, true) + kNormEps);
    return centered * dynamic(1.0 / std) * gain;
  }
  torch::Tensor gain;
};
TORCH_MODULE(TokenNorm);

int64_t fan_in(const torch::Tensor& w) { return w.dim() <= 1 ? 1 : w.numel() / w.size(0); }

// ---------------------------------------------------------------------------

class StdCnn : public Network {
 public:
  explicit StdCnn(const ModelSpec& spec) {
    const auto channels = cnn_stage_channels(spec);
    const auto strides = cnn_stage_strides(spec);
    int64_t in = spec.input_channels;
    for (size_t i = 0; i < channels.size(); ++i) {
      convs_.push_back(register_module(
          "conv" + std::to_string(i),
          torch::nn::Conv2d(torch::nn::Conv2dOptions(in, channels[i], 3).stride(strides[i]).padding(1).bias(true))));
      norms_.push_back(register_module("norm" + std::to_string(i),
                                       torch::nn::GroupNorm(torch::nn::GroupNormOptions(8, channels[i]))));
      in = channels[i];
    }
    fc_ = register_module("fc", torch::nn::Linear(in, spec.num_classes));
  }

  torch::Tensor features(const torch::Tensor& x) override {
    auto h = x;
    for (size_t i = 0; i < convs_.size(); ++i) h = torch::relu(norms_[i]->forward(convs_[i]->forward(h)));
    return h;
  }
  torch::Tensor classify(const torch::Tensor& feats) override {
    return fc_->forward(feats.mean({2, 3}));
  }
  torch::Tensor forward(const torch::Tensor& x) override { return classify(features(x)); }
  torch::Tensor head_weight() override { return fc_->weight; }
  torch::Tensor head_bias() override { return fc_->bias; }

  void reset(torch::Generator& gen) {
    torch::NoGradGuard no_grad;
    for (auto& conv : convs_) {
      auto& w = conv->weight;
      w.copy_(torch::randn(w.sizes(), gen, w.options()) * std::sqrt(2.0 / fan_in(w)));
      conv->bias.zero_();
    }
    for (auto& norm : norms_) {
      norm->weight.fill_(1.0);
      norm->bias.zero_();
    }
    auto& w = fc_->weight;
    w.copy_(torch::randn(w.sizes(), gen, w.options()) * std::sqrt(1.0 / fan_in(w)));
    fc_->bias.zero_();
  }

 private:
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<torch::nn::GroupNorm> norms_;
  torch::nn::Linear fc_{nullptr};
};

class BcosCnn : public Network {
 public:
  explicit BcosCnn(const ModelSpec& spec) {
    const auto channels = cnn_stage_channels(spec);
    const auto strides = cnn_stage_strides(spec);
    int64_t in = spec.input_channels;
    for (size_t i = 0; i < channels.size(); ++i) {
      convs_.push_back(register_module("conv" + std::to_string(i),
                                       BcosConv2d(in, channels[i], 3, strides[i], 1, spec.bcos_b)));
      norms_.push_back(register_module("norm" + std::to_string(i), PositionNorm2d(channels[i])));
      in = channels[i];
    }
    head_ = register_module("head", BcosConv2d(in, spec.num_classes, 1, 1, 0, spec.bcos_b));
    logit_scale_ = spec.logit_scale;
  }

  torch::Tensor features(const torch::Tensor& x) override {
    auto h = x;
    for (size_t i = 0; i < convs_.size(); ++i) h = norms_[i]->forward(convs_[i]->forward(h));
    return h;
  }
  torch::Tensor classify(const torch::Tensor& feats) override {
    return head_->forward(feats).mean({2, 3}) * logit_scale_;
  }
  torch::Tensor forward(const torch::Tensor& x) override { return classify(features(x)); }

  void reset(torch::Generator& gen) {
    torch::NoGradGuard no_grad;
    auto init = [&](torch::Tensor& w) {
      w.copy_(torch::randn(w.sizes(), gen, w.options()) * std::sqrt(1.0 / fan_in(w)));
    };
    for (auto& conv : convs_) init(conv->weight);
    for (auto& norm : norms_) norm->gain.fill_(1.0);
    init(head_->weight);
  }

 private:
  std::vector<BcosConv2d> convs_;
  std::vector<PositionNorm2d> norms_;
  BcosConv2d head_{nullptr};
  double logit_scale_ = 1.0;
};

class VitBlockImpl : public torch::nn::Module {
 public:
  VitBlockImpl(int64_t dim, int64_t heads, double b) : heads_(heads) {
    norm1 = register_module("norm1", TokenNorm(dim));
    query = register_module("query", torch::nn::Linear(torch::nn::LinearOptions(dim, dim).bias(false)));
    key = register_module("key", torch::nn::Linear(torch::nn::LinearOptions(dim, dim).bias(false)));
    value = register_module("value", BcosLinear(dim, dim, b));
    proj = register_module("proj", BcosLinear(dim, dim, b));
    norm2 = register_module("norm2", TokenNorm(dim));
    mlp1 = register_module("mlp1", BcosLinear(dim, 2 * dim, b));
    mlp2 = register_module("mlp2", BcosLinear(2 * dim, dim, b));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    const auto n = x.size(0), tokens = x.size(1), dim = x.size(2), hd = dim / heads_;
    auto h = norm1->forward(x);
    auto split = [&](const torch::Tensor& t) { return t.view({n, tokens, heads_, hd}).transpose(1, 2); };
    auto q = split(query->forward(h));
    auto k = split(key->forward(h));
    auto v = split(value->forward(h));
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
    auto mixed = torch::matmul(dynamic(attn), v).transpose(1, 2).reshape({n, tokens, dim});
    auto y = x + proj->forward(mixed);
    return y + mlp2->forward(mlp1->forward(norm2->forward(y)));
  }

  TokenNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Linear query{nullptr}, key{nullptr};
  BcosLinear value{nullptr}, proj{nullptr}, mlp1{nullptr}, mlp2{nullptr};

 private:
  int64_t heads_;
};
TORCH_MODULE(VitBlock);

// Positions enter multiplicatively (per-token gain) so the network stays
// bias-free and dynamic-linear.
class BcosVit : public Network {
 public:
  explicit BcosVit(const ModelSpec& spec) : spec_(spec) {
    const int64_t side = spec.input_size / spec.patch_size;
    embed_ = register_module("embed", BcosConv2d(spec.input_channels, spec.embed_dim, spec.patch_size,
                                                 spec.patch_size, 0, spec.bcos_b));
    pos_gain_ = register_parameter("pos_gain", torch::empty({side * side, spec.embed_dim}));
    for (int64_t i = 0; i < spec.vit_depth; ++i) {
      blocks_.push_back(register_module("block" + std::to_string(i),
                                        VitBlock(spec.embed_dim, spec.num_heads, spec.bcos_b)));
    }
    norm_ = register_module("norm", TokenNorm(spec.embed_dim));
    head_ = register_module("head", BcosLinear(spec.embed_dim, spec.num_classes, spec.bcos_b));
  }

  torch::Tensor tokens(const torch::Tensor& x) {
    auto t = embed_->forward(x).flatten(2).transpose(1, 2);  // [N, L, D]
    return t * pos_gain_;
  }

  torch::Tensor forward(const torch::Tensor& x) override {
    auto h = tokens(x);
    for (auto& block : blocks_) h = block->forward(h);
    return head_->forward(norm_->forward(h).mean(1)) * spec_.logit_scale;
  }

  void reset(torch::Generator& gen) {
    torch::NoGradGuard no_grad;
    for (auto& item : named_parameters()) {
      const auto& name = item.key();
      auto& p = item.value();
      if (name.find("gain") != std::string::npos && name != "pos_gain") {
        p.fill_(1.0);
      } else if (name == "pos_gain") {
        p.copy_(1.0 + 0.02 * torch::randn(p.sizes(), gen, p.options()));
      } else {
        p.copy_(torch::randn(p.sizes(), gen, p.options()) * std::sqrt(1.0 / fan_in(p)));
      }
    }
  }

 private:
  ModelSpec spec_;
  BcosConv2d embed_{nullptr};
  torch::Tensor pos_gain_;
  std::vector<VitBlock> blocks_;
  TokenNorm norm_{nullptr};
  BcosLinear head_{nullptr};
};

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(Family f) {
  switch (f) {
    case Family::StdCnn: return "std_cnn";
    case Family::BcosCnn: return "bcos_cnn";
    case Family::BcosVit: return "bcos_vit";
  }
  return "?";
}

std::string to_string(DepthPreset p) { return p == DepthPreset::Teacher ? "teacher" : "student"; }

Family family_from_string(const std::string& s) {
  if (s == "std_cnn") return Family::StdCnn;
  if (s == "bcos_cnn") return Family::BcosCnn;
  if (s == "bcos_vit") return Family::BcosVit;
  throw ConfigError("family: unknown value '" + s + "'");
}

DepthPreset preset_from_string(const std::string& s) {
  if (s == "teacher") return DepthPreset::Teacher;
  if (s == "student") return DepthPreset::Student;
  throw ConfigError("depth_preset: unknown value '" + s + "'");
}

ModelSpec default_spec(Family family, DepthPreset preset, int64_t num_classes, uint64_t seed) {
  ModelSpec spec;
  spec.family = family;
  spec.depth_preset = preset;
  spec.num_classes = num_classes;
  spec.input_channels = is_bcos(family) ? 6 : 3;
  spec.seed = seed;
  if (family == Family::BcosVit && preset == DepthPreset::Teacher) {
    spec.embed_dim = 96;
    spec.vit_depth = 6;
  }
  return spec;
}

int64_t vit_token_count(const ModelSpec& spec) {
  const auto side = spec.input_size / spec.patch_size;
  return side * side;
}

std::vector<int64_t> cnn_stage_channels(const ModelSpec& spec) {
  if (spec.depth_preset == DepthPreset::Teacher) return {24, 48, 64, 64};
  return {16, 32, 48};
}

std::vector<int64_t> cnn_stage_strides(const ModelSpec& spec) {
  const auto stages = static_cast<int64_t>(cnn_stage_channels(spec).size());
  int64_t halvings = 0;
  for (int64_t s = spec.cnn_total_stride; s > 1; s /= 2) ++halvings;
  std::vector<int64_t> strides(stages, 1);
  // Keep the first stage at full resolution when there is room for it.
  const int64_t first = halvings < stages ? 1 : 0;
  for (int64_t i = 0; i < halvings; ++i) strides[first + i] = 2;
  return strides;
}

void validate(const ModelSpec& spec) {
  if (spec.num_classes <= 0) throw ConfigError("num_classes: must be positive");
  if (spec.input_channels <= 0) throw ConfigError("input_channels: must be positive");
  if (spec.input_size <= 0) throw ConfigError("input_size: must be positive");
  if (is_bcos(spec.family)) {
    if (spec.input_channels != 6) throw ConfigError("input_channels: B-cos models require the 6-channel encoding");
    if (!(spec.bcos_b >= 1.0)) throw ConfigError("bcos_b: must be >= 1");
    if (!(spec.logit_scale > 0.0)) throw ConfigError("logit_scale: must be positive");
  }
  if (spec.family == Family::BcosVit) {
    if (spec.patch_size <= 0 || spec.input_size % spec.patch_size != 0) {
      throw ConfigError("patch_size: must divide the input side length");
    }
    if (spec.embed_dim <= 0 || spec.num_heads <= 0 || spec.embed_dim % spec.num_heads != 0) {
      throw ConfigError("num_heads: must divide embed_dim");
    }
    if (spec.vit_depth <= 0) throw ConfigError("vit_depth: must be positive");
  } else {
    const auto s = spec.cnn_total_stride;
    if (s <= 0 || (s & (s - 1)) != 0) throw ConfigError("cnn_total_stride: must be a power of two");
    int64_t halvings = 0;
    for (int64_t v = s; v > 1; v /= 2) ++halvings;
    if (halvings > static_cast<int64_t>(cnn_stage_channels(spec).size())) {
      throw ConfigError("cnn_total_stride: exceeds what the preset's stages can realize");
    }
    if (spec.input_size % s != 0) throw ConfigError("cnn_total_stride: must divide the input side length");
  }
}

json to_json(const ModelSpec& spec) {
  return json{{"family", to_string(spec.family)},
              {"depth_preset", to_string(spec.depth_preset)},
              {"num_classes", spec.num_classes},
              {"input_channels", spec.input_channels},
              {"input_size", spec.input_size},
              {"patch_size", spec.patch_size},
              {"bcos_b", spec.bcos_b},
              {"logit_scale", spec.logit_scale},
              {"cnn_total_stride", spec.cnn_total_stride},
              {"embed_dim", spec.embed_dim},
              {"vit_depth", spec.vit_depth},
              {"num_heads", spec.num_heads},
              {"seed", spec.seed}};
}

ModelSpec spec_from_json(const json& j) {
  constexpr std::string_view ctx = "model spec";
  require_known_keys(j,
                     {"family", "depth_preset", "num_classes", "input_channels", "input_size", "patch_size",
                      "bcos_b", "logit_scale", "cnn_total_stride", "embed_dim", "vit_depth", "num_heads", "seed"},
                     ctx);
  if (!j.contains("family")) throw ConfigError("model spec: missing 'family'");
  std::string family = j.at("family").get<std::string>();
  std::string preset = "student";
  read_optional(j, "depth_preset", preset, ctx);
  int64_t classes = 2;
  uint64_t seed = 0;
  read_optional(j, "num_classes", classes, ctx);
  read_optional(j, "seed", seed, ctx);
  ModelSpec spec = default_spec(family_from_string(family), preset_from_string(preset), classes, seed);
  read_optional(j, "input_channels", spec.input_channels, ctx);
  read_optional(j, "input_size", spec.input_size, ctx);
  read_optional(j, "patch_size", spec.patch_size, ctx);
  read_optional(j, "bcos_b", spec.bcos_b, ctx);
  read_optional(j, "logit_scale", spec.logit_scale, ctx);
  read_optional(j, "cnn_total_stride", spec.cnn_total_stride, ctx);
  read_optional(j, "embed_dim", spec.embed_dim, ctx);
  read_optional(j, "vit_depth", spec.vit_depth, ctx);
  read_optional(j, "num_heads", spec.num_heads, ctx);
  return spec;
}

DynamicLinearScope::DynamicLinearScope() : previous_(g_dynamic_linear) { g_dynamic_linear = true; }
DynamicLinearScope::~DynamicLinearScope() { g_dynamic_linear = previous_; }
bool DynamicLinearScope::active() { return g_dynamic_linear; }

torch::Tensor Network::features(const torch::Tensor&) {
  throw UnsupportedError("features: only available for CNN families");
}
torch::Tensor Network::classify(const torch::Tensor&) {
  throw UnsupportedError("classify: only available for CNN families");
}
torch::Tensor Network::head_weight() { throw UnsupportedError("head_weight: only std_cnn has a GAP+linear head"); }
torch::Tensor Network::head_bias() { throw UnsupportedError("head_bias: only std_cnn has a GAP+linear head"); }

// ---------------------------------------------------------------------------

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
  validate(spec_);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(spec_.seed);
  switch (spec_.family) {
    case Family::StdCnn: {
      auto net = std::make_shared<StdCnn>(spec_);
      net->reset(gen);
      net_ = net;
      break;
    }
    case Family::BcosCnn: {
      auto net = std::make_shared<BcosCnn>(spec_);
      net->reset(gen);
      net_ = net;
      break;
    }
    case Family::BcosVit: {
      auto net = std::make_shared<BcosVit>(spec_);
      net->reset(gen);
      net_ = net;
      break;
    }
  }
  set_mode(Mode::Train);
}

Model make_model(const ModelSpec& spec) { return Model(spec); }

void Model::set_mode(Mode mode) {
  mode_ = mode;
  net_->train(mode == Mode::Train);
}

void Model::check_input(const torch::Tensor& batch) const {
  if (batch.dim() != 4 || batch.size(1) != spec_.input_channels || batch.size(2) != spec_.input_size ||
      batch.size(3) != spec_.input_size) {
    std::ostringstream msg;
    msg << "forward: expected [N," << spec_.input_channels << "," << spec_.input_size << "," << spec_.input_size
        << "], got " << batch.sizes();
    throw InputError(msg.str());
  }
  if (!torch::isfinite(batch).all().item<bool>()) throw InputError("forward: input contains non-finite values");
}

torch::Tensor Model::forward(const torch::Tensor& batch) const {
  check_input(batch);
  return net_->forward(batch.to(dtype()));
}

torch::Tensor Model::features(const torch::Tensor& batch) const {
  check_input(batch);
  return net_->features(batch.to(dtype()));
}

torch::Tensor Model::classify(const torch::Tensor& feats) const { return net_->classify(feats); }
torch::Tensor Model::head_weight() const { return net_->head_weight(); }
torch::Tensor Model::head_bias() const { return net_->head_bias(); }

std::vector<torch::Tensor> Model::parameters() const { return net_->parameters(); }

std::vector<std::pair<std::string, torch::Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : net_->named_parameters()) out.emplace_back(item.key(), item.value());
  return out;
}

int64_t Model::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

void Model::load_parameters(const std::vector<std::pair<std::string, torch::Tensor>>& params) {
  auto own = net_->named_parameters();
  if (params.size() != own.size()) {
    throw StorageError("load_parameters: expected " + std::to_string(own.size()) + " arrays, got " +
                       std::to_string(params.size()));
  }
  torch::NoGradGuard no_grad;
  for (const auto& [name, value] : params) {
    auto* target = own.find(name);
    if (target == nullptr) throw StorageError("load_parameters: unknown parameter '" + name + "'");
    if (!target->sizes().equals(value.sizes())) {
      throw StorageError("load_parameters: shape mismatch for '" + name + "'");
    }
    target->copy_(value);
  }
}

void Model::zero_parameters() {
  torch::NoGradGuard no_grad;
  for (auto& p : net_->parameters()) p.zero_();
}

bool Model::all_parameters_finite() const {
  for (const auto& p : parameters()) {
    if (!torch::isfinite(p).all().item<bool>()) return false;
  }
  return true;
}

Model Model::clone() const {
  Model copy(spec_);
  copy.to(dtype());
  copy.load_parameters(named_parameters());
  copy.set_mode(mode_);
  return copy;
}

void Model::to(torch::Dtype dtype) { net_->to(dtype); }

torch::Dtype Model::dtype() const { return net_->parameters().front().scalar_type(); }

std::string Model::digest() const {
  std::string bytes = to_json(spec_).dump();
  for (const auto& [name, p] : named_parameters()) {
    auto c = p.detach().contiguous();
    bytes += name;
    bytes.append(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size());
  }
  return bytes_digest(bytes);
}

std::string Model::model_id() const {
  return to_string(spec_.family) + "-" + to_string(spec_.depth_preset) + "-s" + std::to_string(spec_.seed) + "-" +
         digest().substr(0, 12);
}

// ---------------------------------------------------------------------------

torch::Tensor encode_bcos_input(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3) throw InputError("encode_bcos_input: expected [N,3,H,W]");
  if (images.numel() > 0 && (images.min().item<double>() < 0.0 || images.max().item<double>() > 1.0)) {
    throw InputError("encode_bcos_input: values must lie in [0,1]");
  }
  return torch::cat({images, 1.0 - images}, 1);
}

torch::Tensor prepare_input(const Model& model, const torch::Tensor& rgb) {
  return is_bcos(model.family()) ? encode_bcos_input(rgb) : rgb;
}

torch::Tensor effective_weights_for(const Model& model, const torch::Tensor& batch, const torch::Tensor& class_ids,
                                    bool create_graph) {
  if (!is_bcos(model.family())) {
    throw UnsupportedError("effective_weights: not defined for family " + to_string(model.family()));
  }
  torch::AutoGradMode grad_mode(true);
  DynamicLinearScope scope;
  auto x = batch.detach().to(model.dtype()).clone().requires_grad_(true);
  torch::Tensor logits;
  if (create_graph) {
    // Detaching the scales would also drop their parameter dependence, which
    // the gradient of a loss on W(x) needs.
    PairedScope paired;
    logits = model.forward(torch::cat({x, x.detach()}, 0)).narrow(0, 0, x.size(0));
  } else {
    logits = model.forward(x);
  }
  auto selected = logits.gather(1, class_ids.view({-1, 1}).to(torch::kLong)).sum();
  return torch::autograd::grad({selected}, {x}, {}, /*retain_graph=*/create_graph, create_graph)[0];
}

torch::Tensor effective_weights(const Model& model, const torch::Tensor& x, bool create_graph) {
  if (!is_bcos(model.family())) {
    throw UnsupportedError("effective_weights: not defined for family " + to_string(model.family()));
  }
  if (x.dim() != 3) throw InputError("effective_weights: expected a single image [C,H,W]");
  torch::AutoGradMode grad_mode(true);
  DynamicLinearScope scope;
  auto xi = x.detach().to(model.dtype()).unsqueeze(0).clone().requires_grad_(true);
  auto logits = model.forward(xi);
  std::vector<torch::Tensor> rows;
  const auto classes = logits.size(1);
  for (int64_t c = 0; c < classes; ++c) {
    const bool keep = create_graph || c + 1 < classes;
    rows.push_back(torch::autograd::grad({logits[0][c]}, {xi}, {}, keep, create_graph)[0][0]);
  }
  return torch::stack(rows);
}

void save_checkpoint(const Model& model, const std::filesystem::path& path, const json& extra_meta) {
  ArchiveWriter writer;
  json meta = extra_meta;
  meta["format"] = "e2kd-checkpoint";
  meta["version"] = 1;
  meta["spec"] = to_json(model.spec());
  meta["model_id"] = model.model_id();
  writer.set_meta(meta);
  for (const auto& [name, p] : model.named_parameters()) writer.add(name, p);
  writer.write(path);
}

Model load_checkpoint(const std::filesystem::path& path) {
  auto archive = Archive::read(path);
  if (archive.meta().value("format", "") != "e2kd-checkpoint") {
    throw StorageError("checkpoint: '" + path.string() + "' is not a model checkpoint");
  }
  Model model(spec_from_json(archive.meta().at("spec")));
  std::vector<std::pair<std::string, torch::Tensor>> params;
  for (const auto& name : archive.names()) params.emplace_back(name, archive.get(name));
  if (!params.empty()) model.to(params.front().second.scalar_type());
  model.load_parameters(params);
  model.set_mode(Mode::Eval);
  return model;
}

}  // namespace e2kd
