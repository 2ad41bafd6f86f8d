#include <gtest/gtest.h>

#include "e2kd/errors.hpp"
#include "e2kd/nets.hpp"
#include "test_util.hpp"

namespace e2kd {
namespace {

using testing::bit_equal;

Model double_model(Family family, DepthPreset preset, int64_t classes, uint64_t seed) {
  auto model = make_model(default_spec(family, preset, classes, seed));
  model.to(torch::kFloat64);
  model.set_mode(Mode::Eval);
  return model;
}

TEST(Nets, SeededConstructionIsBitIdentical) {
  auto a = make_model(default_spec(Family::StdCnn, DepthPreset::Student, 4, 7));
  auto b = make_model(default_spec(Family::StdCnn, DepthPreset::Student, 4, 7));
  auto pa = a.named_parameters();
  auto pb = b.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_TRUE(bit_equal(pa[i].second, pb[i].second)) << pa[i].first;
  }
  auto c = make_model(default_spec(Family::StdCnn, DepthPreset::Student, 4, 8));
  EXPECT_NE(a.digest(), c.digest());
}

TEST(Nets, VitTokenCount) {
  auto spec = default_spec(Family::BcosVit, DepthPreset::Student, 4, 0);
  spec.patch_size = 8;
  spec.input_size = 64;
  EXPECT_EQ(vit_token_count(spec), 64);
  auto model = make_model(spec);
  auto pos = model.named_parameters();
  auto it = std::find_if(pos.begin(), pos.end(), [](const auto& p) { return p.first == "pos_gain"; });
  ASSERT_NE(it, pos.end());
  EXPECT_EQ(it->second.size(0), 64);
}

TEST(Nets, BcosRequiresSixChannels) {
  auto spec = default_spec(Family::BcosCnn, DepthPreset::Student, 4, 0);
  spec.input_channels = 3;
  try {
    make_model(spec);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("input_channels"), std::string::npos);
  }
}

TEST(Nets, PatchSizeMustDivideInput) {
  auto spec = default_spec(Family::BcosVit, DepthPreset::Student, 4, 0);
  spec.patch_size = 7;
  try {
    make_model(spec);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("patch_size"), std::string::npos);
  }
}

TEST(Nets, TeacherHasAtLeastTwiceStudentParameters) {
  for (auto family : {Family::StdCnn, Family::BcosCnn, Family::BcosVit}) {
    auto t = make_model(default_spec(family, DepthPreset::Teacher, 8, 0));
    auto s = make_model(default_spec(family, DepthPreset::Student, 8, 0));
    EXPECT_GE(t.parameter_count(), 2 * s.parameter_count()) << to_string(family);
  }
}

TEST(Nets, StageStridesMultiplyToTotalStride) {
  for (auto preset : {DepthPreset::Teacher, DepthPreset::Student}) {
    for (int64_t total : {1, 2, 4}) {
      auto spec = default_spec(Family::StdCnn, preset, 2, 0);
      spec.cnn_total_stride = total;
      int64_t product = 1;
      for (auto s : cnn_stage_strides(spec)) product *= s;
      EXPECT_EQ(product, total);
      auto model = make_model(spec);
      auto feats = model.features(torch::rand({1, 3, 64, 64}));
      EXPECT_EQ(feats.size(2), 64 / total);
    }
  }
}

TEST(Nets, ForwardShapeAndInputValidation) {
  for (auto family : {Family::StdCnn, Family::BcosCnn, Family::BcosVit}) {
    auto model = make_model(default_spec(family, DepthPreset::Student, 5, 1));
    const auto c = model.spec().input_channels;
    auto logits = model.forward(torch::rand({3, c, 64, 64}));
    EXPECT_EQ(logits.sizes(), (std::vector<int64_t>{3, 5}));
    EXPECT_TRUE(torch::isfinite(logits).all().item<bool>());
    EXPECT_THROW(model.forward(torch::rand({3, c, 32, 32})), InputError);
    auto bad = torch::rand({1, c, 64, 64});
    bad[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(model.forward(bad), InputError);
  }
}

TEST(Nets, ZeroImageGivesZeroLogitsForBcos) {
  for (auto family : {Family::BcosCnn, Family::BcosVit}) {
    auto model = make_model(default_spec(family, DepthPreset::Student, 3, 2));
    auto logits = model.forward(torch::zeros({2, 6, 64, 64}));
    EXPECT_EQ(logits.abs().max().item<double>(), 0.0) << to_string(family);
  }
}

TEST(Nets, EncodeBcosInput) {
  auto half = torch::full({1, 3, 4, 4}, 0.5);
  EXPECT_TRUE(torch::equal(encode_bcos_input(half), torch::full({1, 6, 4, 4}, 0.5)));

  auto px = torch::tensor({1.0, 0.0, 0.0}).view({1, 3, 1, 1});
  auto enc = encode_bcos_input(px).flatten();
  EXPECT_TRUE(torch::equal(enc, torch::tensor({1.0, 0.0, 0.0, 0.0, 1.0, 1.0}).to(enc.dtype())));

  // Each (v, 1-v) pair sums to exactly 1 in floating point, so the pixel sum is exactly 3.
  for (auto dtype : {torch::kFloat32, torch::kFloat64}) {
    auto enc3 = encode_bcos_input(testing::rand({2, 3, 8, 8}, 3, dtype));
    auto pair_sums = enc3.slice(1, 0, 3) + enc3.slice(1, 3, 6);
    EXPECT_TRUE(torch::equal(pair_sums.sum(1), torch::full({2, 8, 8}, 3.0, enc3.options())));
  }

  EXPECT_THROW(encode_bcos_input(torch::full({1, 3, 2, 2}, 1.5)), InputError);
  EXPECT_THROW(encode_bcos_input(torch::full({1, 3, 2, 2}, -0.1)), InputError);
}

TEST(Nets, EffectiveWeightsCompleteness) {
  uint64_t seed = 100;
  for (auto family : {Family::BcosCnn, Family::BcosVit}) {
    for (int trial = 0; trial < 3; ++trial, ++seed) {
      auto model = double_model(family, DepthPreset::Student, 4, seed);
      auto x = encode_bcos_input(testing::rand({1, 3, 64, 64}, seed))[0];
      auto w = effective_weights(model, x);
      ASSERT_EQ(w.sizes(), (std::vector<int64_t>{4, 6, 64, 64}));
      auto logits = model.forward(x.unsqueeze(0))[0];
      auto contributions = (w * x.unsqueeze(0)).sum({1, 2, 3});
      auto rel = ((contributions - logits).abs() / (logits.abs() + 1e-8)).max().item<double>();
      EXPECT_LT(rel, 1e-4) << to_string(family) << " seed " << seed;
    }
  }
}

TEST(Nets, EffectiveWeightsBatchedMatchesPerImage) {
  auto model = double_model(Family::BcosCnn, DepthPreset::Student, 3, 5);
  auto batch = encode_bcos_input(testing::rand({2, 3, 64, 64}, 9));
  auto cls = torch::tensor({2, 0}, torch::kLong);
  auto batched = effective_weights_for(model, batch, cls, false);
  EXPECT_TRUE(torch::allclose(batched[0], effective_weights(model, batch[0])[2], 1e-10, 1e-12));
  EXPECT_TRUE(torch::allclose(batched[1], effective_weights(model, batch[1])[0], 1e-10, 1e-12));
}

TEST(Nets, EffectiveWeightsOfZeroNetworkAreZero) {
  auto model = double_model(Family::BcosCnn, DepthPreset::Student, 3, 4);
  model.zero_parameters();
  auto x = encode_bcos_input(testing::rand({1, 3, 64, 64}, 4))[0];
  auto w = effective_weights(model, x);
  EXPECT_EQ(w.abs().max().item<double>(), 0.0);
}

TEST(Nets, EffectiveWeightsUnsupportedForStdCnn) {
  auto model = make_model(default_spec(Family::StdCnn, DepthPreset::Student, 3, 4));
  EXPECT_THROW(effective_weights(model, torch::rand({3, 64, 64})), UnsupportedError);
}

TEST(Nets, SingleBcosLayerWithBOneIsStaticLinear) {
  auto weight = testing::randn({3, 5}, 11);
  weight = weight / weight.norm(2, 1, true);
  auto x = testing::randn({5}, 12).requires_grad_(true);
  DynamicLinearScope scope;
  auto out = bcos_linear(x.unsqueeze(0), weight, 1.0)[0];
  for (int64_t c = 0; c < 3; ++c) {
    auto g = torch::autograd::grad({out[c]}, {x}, {}, true)[0];
    EXPECT_TRUE(torch::allclose(g, weight[c], 0, 1e-15));
  }
}

TEST(Nets, BcosLayerBoundedByInputNorm) {
  // |w_hat^T x| |cos|^(B-1) <= ||x|| for unit-norm w_hat.
  auto weight = testing::randn({4, 6}, 21);
  auto x = testing::randn({10, 6}, 22);
  auto out = bcos_linear(x, weight, 2.0);
  EXPECT_TRUE((out.abs() <= x.norm(2, 1, true) + 1e-9).all().item<bool>());
}

TEST(Nets, StdCnnHeadJacobianIsSpatiallyConstant) {
  // Finite differences of the logits w.r.t. two different positions of the
  // final feature map agree channel by channel (GAP+linear head).
  auto model = double_model(Family::StdCnn, DepthPreset::Student, 3, 13);
  auto feats = model.features(testing::rand({1, 3, 64, 64}, 13)).detach();
  const double h = 1e-6;
  auto probe = [&](int64_t k, int64_t i, int64_t j) {
    auto up = feats.clone();
    auto down = feats.clone();
    up[0][k][i][j] += h;
    down[0][k][i][j] -= h;
    return ((model.classify(up) - model.classify(down)) / (2 * h))[0];
  };
  for (int64_t k : {0, 5, 17}) {
    auto a = probe(k, 1, 2);
    auto b = probe(k, 12, 7);
    EXPECT_LT((a - b).abs().max().item<double>(), 1e-7);
    auto expected = model.head_weight().select(1, k) / (feats.size(2) * feats.size(3));
    EXPECT_LT((a - expected).abs().max().item<double>(), 1e-7);
  }
}

TEST(Nets, EvalForwardIsDeterministic) {
  auto model = make_model(default_spec(Family::BcosVit, DepthPreset::Student, 3, 3));
  model.set_mode(Mode::Eval);
  auto x = encode_bcos_input(torch::rand({2, 3, 64, 64}));
  EXPECT_TRUE(bit_equal(model.forward(x), model.forward(x)));
}

TEST(Nets, CheckpointRoundTripIsBitExact) {
  auto dir = testing::scratch_dir("ckpt");
  for (auto family : {Family::StdCnn, Family::BcosCnn, Family::BcosVit}) {
    auto spec = default_spec(family, DepthPreset::Student, 4, 21);
    auto model = make_model(spec);
    auto path = dir / (to_string(family) + ".ckpt");
    save_checkpoint(model, path);
    auto loaded = load_checkpoint(path);
    EXPECT_EQ(loaded.spec(), spec);
    EXPECT_EQ(loaded.digest(), model.digest());
    model.set_mode(Mode::Eval);
    auto x = prepare_input(model, torch::rand({2, 3, 64, 64}));
    EXPECT_TRUE(bit_equal(model.forward(x), loaded.forward(x)));
  }
  std::filesystem::remove_all(dir);
}

TEST(Nets, SpecJsonRejectsUnknownKeys) {
  auto spec = default_spec(Family::BcosVit, DepthPreset::Teacher, 8, 3);
  EXPECT_EQ(spec_from_json(to_json(spec)), spec);
  auto j = to_json(spec);
  j["dropout"] = 0.1;
  EXPECT_THROW(spec_from_json(j), ConfigError);
}

TEST(Nets, CloneIsIndependent) {
  auto model = make_model(default_spec(Family::StdCnn, DepthPreset::Student, 3, 3));
  auto copy = model.clone();
  EXPECT_EQ(copy.digest(), model.digest());
  {
    torch::NoGradGuard g;
    copy.parameters().front().add_(1.0);
  }
  EXPECT_NE(copy.digest(), model.digest());
}

}  // namespace
}  // namespace e2kd
