#include <gtest/gtest.h>

#include <set>

#include "e2kd/data.hpp"
#include "e2kd/errors.hpp"
#include "test_util.hpp"

namespace e2kd {
namespace {

using testing::bit_equal;

BiasedParams small_biased(double corr, uint64_t seed, int64_t n = 40) {
  BiasedParams p;
  p.n_train = n;
  p.n_eval = n / 2;
  p.correlation = corr;
  p.seed = seed;
  return p;
}

int64_t aligned_count(const Dataset& d) {
  int64_t n = 0;
  for (const auto& s : d.samples) n += s.label == s.bg_class;
  return n;
}

TEST(Data, CorrelationOneHasNoAntiAlignedTrain) {
  auto split = generate_biased_dataset(small_biased(1.0, 3));
  EXPECT_EQ(aligned_count(split.train), static_cast<int64_t>(split.train.size()));
  EXPECT_EQ(aligned_count(split.test_id), static_cast<int64_t>(split.test_id.size()));
  EXPECT_EQ(aligned_count(split.test_ood), 0);
}

TEST(Data, AlignedFractionFollowsCorrelation) {
  BiasedParams p = small_biased(0.5, 17, 1000);
  p.n_eval = 4;
  auto split = generate_biased_dataset(p);
  const double frac = static_cast<double>(aligned_count(split.train)) / split.train.size();
  EXPECT_NEAR(frac, 0.5, 0.05);
  for (double corr : {0.0, 0.3, 0.95}) {
    auto s = generate_biased_dataset(small_biased(corr, 1, 40));
    EXPECT_EQ(aligned_count(s.train), std::llround(corr * 40));
    EXPECT_EQ(aligned_count(s.val), std::llround(corr * 20));
  }
}

TEST(Data, DeterministicPerSeed) {
  auto a = generate_biased_dataset(small_biased(0.7, 5, 12));
  auto b = generate_biased_dataset(small_biased(0.7, 5, 12));
  ASSERT_EQ(a.train.size(), b.train.size());
  for (size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train.samples[i].sample_id, b.train.samples[i].sample_id);
    EXPECT_TRUE(bit_equal(a.train.samples[i].image, b.train.samples[i].image));
  }
  EXPECT_EQ(dataset_fingerprint(a), dataset_fingerprint(b));
  auto c = generate_biased_dataset(small_biased(0.7, 6, 12));
  EXPECT_NE(dataset_fingerprint(a), dataset_fingerprint(c));
}

TEST(Data, SampleInvariants) {
  auto split = generate_biased_dataset(small_biased(0.5, 2, 20));
  std::set<std::string> ids;
  for (const auto* d : {&split.train, &split.val, &split.test_id, &split.test_ood}) {
    for (const auto& s : d->samples) {
      EXPECT_TRUE(ids.insert(s.sample_id).second) << "duplicate id " << s.sample_id;
      EXPECT_EQ(s.image.sizes(), (std::vector<int64_t>{3, 64, 64}));
      EXPECT_GE(s.image.min().item<float>(), 0.0f);
      EXPECT_LE(s.image.max().item<float>(), 1.0f);
      auto mask = s.fg_mask();
      EXPECT_GT(mask.sum().item<int64_t>(), 0);
      EXPECT_EQ(s.bbox(), tight_bbox(mask));
      EXPECT_EQ(s.group(), std::make_pair(s.label, s.bg_class));
      EXPECT_EQ(s.targets[s.label].item<float>(), 1.0f);
    }
  }
}

TEST(Data, TooFewSamplesIsConfigError) {
  EXPECT_THROW(generate_biased_dataset(small_biased(0.5, 0, 3)), ConfigError);
  EXPECT_THROW(generate_biased_dataset(small_biased(1.5, 0, 8)), ConfigError);
}

TEST(Data, TightBbox) {
  auto m = torch::zeros({8, 8}, torch::kBool);
  m[2][3] = true;
  m[5][6] = true;
  EXPECT_EQ(tight_bbox(m), (BBox{2, 3, 4, 4}));
  EXPECT_THROW(tight_bbox(torch::zeros({4, 4}, torch::kBool)), DataError);
}

TEST(Data, ShapesSingleAndMultiLabel) {
  ShapesParams p;
  p.n_train = 32;
  p.n_eval = 16;
  p.seed = 4;
  auto single = generate_shapes_dataset(p);
  EXPECT_EQ(single.train.num_classes, 8);
  EXPECT_TRUE(single.test_ood.samples.empty());
  for (const auto& s : single.train.samples) {
    EXPECT_EQ(s.objects.size(), 1u);
    EXPECT_EQ(s.targets.sum().item<float>(), 1.0f);
  }
  p.multilabel = true;
  auto multi = generate_shapes_dataset(p);
  EXPECT_TRUE(multi.train.multilabel);
  size_t max_objects = 0;
  for (const auto& s : multi.train.samples) {
    max_objects = std::max(max_objects, s.objects.size());
    EXPECT_EQ(s.targets.sum().item<float>(), static_cast<float>(s.objects.size()));
    for (const auto& o : s.objects) EXPECT_EQ(o.bbox, tight_bbox(o.mask));
  }
  EXPECT_GT(max_objects, 1u);
}

TEST(Data, SubsampleShots) {
  ShapesParams p;
  p.n_train = 80;
  p.seed = 1;
  auto train = generate_shapes_dataset(p).train;
  auto k5 = subsample_shots(train, 5, 0);
  EXPECT_EQ(k5.size(), 40u);
  std::map<int64_t, int> counts;
  for (const auto& s : k5.samples) counts[s.label]++;
  for (auto& [c, n] : counts) EXPECT_EQ(n, 5) << "class " << c;

  auto full = subsample_shots(train, 10, 3);
  std::set<std::string> a, b;
  for (const auto& s : full.samples) a.insert(s.sample_id);
  for (const auto& s : train.samples) b.insert(s.sample_id);
  EXPECT_EQ(a, b);

  auto other = subsample_shots(train, 5, 1);
  std::set<std::string> s0, s1;
  for (const auto& s : k5.samples) s0.insert(s.sample_id);
  for (const auto& s : other.samples) s1.insert(s.sample_id);
  EXPECT_NE(s0, s1);

  try {
    subsample_shots(train, 11, 0);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("class 0"), std::string::npos);
  }
}

TEST(Data, SubsampleFractionIsStratified) {
  ShapesParams p;
  p.n_train = 160;
  auto train = generate_shapes_dataset(p).train;
  auto sub = subsample_fraction(train, 0.1, 0);
  EXPECT_EQ(sub.size(), 16u);
}

TEST(Augment, IdentityWhenDisabled) {
  Rng rng(3);
  auto img = testing::rand({3, 64, 64}, 1, torch::kFloat32);
  auto map = testing::randn({16, 16}, 2);
  AugmentParams off;
  off.enabled = false;
  auto out = augment_pair(img, map, rng, off);
  EXPECT_TRUE(out.transform.is_identity(64, 64));
  EXPECT_TRUE(bit_equal(out.image, img));
  EXPECT_TRUE(bit_equal(*out.map, map));
}

TEST(Augment, DeterministicAndConsistent) {
  auto img = testing::rand({3, 64, 64}, 1, torch::kFloat32);
  auto map = testing::randn({6, 64, 64}, 2);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng r1(seed), r2(seed);
    auto joint = augment_pair(img, map, r1);
    auto image_only = augment_pair(img, std::nullopt, r2);
    EXPECT_EQ(joint.transform, image_only.transform);
    EXPECT_TRUE(bit_equal(joint.image, image_only.image));
    EXPECT_TRUE(bit_equal(*joint.map, apply_geometry(map, image_only.transform, 64, 64)));
    const auto& t = joint.transform;
    EXPECT_GE(t.top, 0);
    EXPECT_LE(t.top + t.height, 64);
    EXPECT_LE(t.left + t.width, 64);
    const double scale = static_cast<double>(t.height * t.width) / (64 * 64);
    EXPECT_GE(scale, 0.55);
    EXPECT_EQ(joint.image.sizes(), img.sizes());
  }
}

TEST(Data, UnrelatedSplit) {
  auto a = generate_biased_dataset(small_biased(0.5, 1, 12));
  auto bp = small_biased(1.0, 1, 12);
  bp.family = RenderFamily::B;
  auto b = generate_biased_dataset(bp);
  auto view = make_unrelated_split(a, b);
  ASSERT_EQ(view.test_id.size(), a.test_id.size());
  for (size_t i = 0; i < view.test_id.size(); ++i) {
    EXPECT_EQ(view.test_id.samples[i].sample_id, a.test_id.samples[i].sample_id);
  }
  std::set<std::string> eval_ids;
  for (const auto* d : {&view.val, &view.test_id, &view.test_ood}) {
    for (const auto& s : d->samples) eval_ids.insert(s.sample_id);
  }
  for (const auto& s : view.train.samples) EXPECT_EQ(eval_ids.count(s.sample_id), 0u);
  EXPECT_EQ(view.train.samples.front().sample_id.rfind("biasedB", 0), 0u);
  EXPECT_THROW(make_unrelated_split(a, a), ConfigError);
}

TEST(Data, ArchiveRoundTrip) {
  auto dir = testing::scratch_dir("data_archive");
  ShapesParams p;
  p.n_train = 12;
  p.n_eval = 8;
  p.multilabel = true;
  auto split = generate_shapes_dataset(p);
  save_dataset(split, dir / "d.e2kd");
  auto back = load_dataset(dir / "d.e2kd");
  EXPECT_EQ(dataset_fingerprint(back), dataset_fingerprint(split));
  ASSERT_EQ(back.train.size(), split.train.size());
  for (size_t i = 0; i < split.train.size(); ++i) {
    const auto& s = split.train.samples[i];
    const auto& r = back.train.samples[i];
    ASSERT_EQ(r.objects.size(), s.objects.size());
    EXPECT_TRUE(bit_equal(r.targets, s.targets));
    for (size_t k = 0; k < s.objects.size(); ++k) {
      EXPECT_EQ(r.objects[k].bbox, s.objects[k].bbox);
      EXPECT_TRUE(torch::equal(r.objects[k].mask, s.objects[k].mask));
    }
  }
  EXPECT_TRUE(back.test_ood.samples.empty());
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace e2kd
