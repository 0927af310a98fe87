#include <gtest/gtest.h>

#include "jea/datasets.hpp"
#include "jea/evaluation.hpp"

using namespace jea;

namespace {

FeatureTable table(std::vector<std::vector<float>> rows, std::vector<int> labels, std::size_t classes) {
  FeatureTable t;
  const std::size_t d = rows.front().size();
  t.features = Tensor<float>({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), t.features.row(i).begin());
  t.labels = std::move(labels);
  t.num_classes = classes;
  return t;
}

// Gaussian blobs around one-hot class centres.
FeatureTable blobs(std::size_t n, std::size_t classes, std::size_t d, double noise, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<float>> rows;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = i % classes;
    std::vector<float> r(d);
    for (std::size_t j = 0; j < d; ++j) r[j] = static_cast<float>((j == c ? 2.0 : 0.0) + noise * rng.normal());
    rows.push_back(std::move(r));
    labels.push_back(static_cast<int>(c));
  }
  return table(std::move(rows), std::move(labels), classes);
}

FeatureTable raw_pixels(const Dataset& ds) {
  std::vector<std::vector<float>> rows;
  for (std::size_t i = 0; i < ds.size(); ++i) rows.push_back(ds.image(i).pixels);
  return table(std::move(rows), ds.labels, ds.num_classes);
}

}  // namespace

TEST(LinearProbe, SeparableBlobsAreLearned) {
  const auto train = blobs(400, 4, 6, 0.3, 1), val = blobs(200, 4, 6, 0.3, 2);
  ProbeConfig cfg;
  cfg.epochs = 30;
  const auto r = linear_probe(train, val, cfg);
  EXPECT_GE(r.accuracy, 0.98);
  EXPECT_GE(r.train_accuracy, 0.98);
  EXPECT_EQ(r.n_val, 200u);
}

TEST(LinearProbe, DeterministicForFixedSeed) {
  const auto train = blobs(300, 3, 5, 1.5, 3), val = blobs(150, 3, 5, 1.5, 4);
  ProbeConfig cfg;
  cfg.epochs = 10;
  cfg.seed = 7;
  EXPECT_EQ(linear_probe(train, val, cfg).accuracy, linear_probe(train, val, cfg).accuracy);
}

TEST(LinearProbe, SingleClassTrainingSetThrows) {
  auto train = blobs(10, 1, 3, 0.1, 5);
  EXPECT_THROW(linear_probe(train, train), ProbeError);
}

TEST(LinearProbe, RawPixelsBeatChanceOnShapeClasses) {
  SyntheticSpec s;
  s.n_samples = 2000;
  const auto all = synth_generate(s, 11);
  const auto shapes = static_cast<int>(s.shape_classes());
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all.labels[i] < shapes) (i < 1600 ? train_idx : val_idx).push_back(i);
  ProbeConfig cfg;
  cfg.epochs = 30;
  cfg.lr = 1e-3;
  const auto r = linear_probe(raw_pixels(all.subset(train_idx)), raw_pixels(all.subset(val_idx)), cfg);
  EXPECT_GT(r.accuracy, 1.0 / shapes + 0.1);
}

TEST(Knn, NearestNeighbourOracle) {
  const auto train = table({{1, 0}, {0, 1}, {-1, 0}}, {0, 1, 2}, 3);
  const auto val = table({{0.9f, 0.1f}, {0.1f, 0.9f}, {-2, 0.1f}}, {0, 1, 2}, 3);
  EXPECT_EQ(knn_probe(train, val, 1).accuracy, 1.0);
}

TEST(Knn, TiesGoToSmallerClass) {
  // Two equidistant neighbours of different classes.
  const auto train = table({{1, 1}, {1, 1}}, {1, 0}, 2);
  const auto val = table({{2, 2}}, {0}, 2);
  EXPECT_EQ(knn_probe(train, val, 2).accuracy, 1.0);
}

TEST(Knn, KLargerThanTrainingSetThrows) {
  const auto t = blobs(5, 2, 2, 0.1, 6);
  EXPECT_THROW(knn_probe(t, t, 6), ParameterError);
  EXPECT_THROW(knn_probe(t, t, 0), ParameterError);
}

TEST(Knn, DuplicatedTrainingSetGivesSameAnswer) {
  const auto train = blobs(60, 3, 4, 1.0, 7), val = blobs(30, 3, 4, 1.0, 8);
  std::vector<std::vector<float>> rows;
  std::vector<int> labels;
  for (int rep = 0; rep < 2; ++rep)
    for (std::size_t i = 0; i < train.size(); ++i) {
      rows.emplace_back(train.features.row(i).begin(), train.features.row(i).end());
      labels.push_back(train.labels[i]);
    }
  const auto twice = table(std::move(rows), std::move(labels), 3);
  EXPECT_EQ(knn_probe(train, val, 1).accuracy, knn_probe(twice, val, 2).accuracy);
}

TEST(Invariance, IdenticalViewsGivePerfectPositives) {
  std::vector<std::vector<float>> rows;
  for (int i = 0; i < 3; ++i)
    for (int v = 0; v < 4; ++v) rows.push_back({i == 0 ? 1.0f : 0.0f, i == 1 ? 1.0f : 0.0f, i == 2 ? 1.0f : 0.0f});
  const auto rep = invariance_from_features(table(rows, std::vector<int>(12, 0), 1).features, 3, 4);
  EXPECT_NEAR(rep.mean_pos_cos, 1.0, 1e-12);
  EXPECT_NEAR(rep.mean_neg_cos, 0.0, 1e-12);
  // Every negative is exactly 0, so the spread is below the floor.
  EXPECT_FALSE(rep.normalized_defined);
  EXPECT_TRUE(std::isnan(rep.normalized_sim));
}

TEST(Invariance, ConstantFeaturesLeaveNormalizedSimUndefined) {
  Tensor<float> f({12, 5}, 0.3f);
  const auto rep = invariance_from_features(f, 4, 3);
  EXPECT_NEAR(rep.mean_pos_cos, 1.0, 1e-6);
  EXPECT_FALSE(rep.normalized_defined);
}

TEST(Invariance, ShapeChecks) {
  EXPECT_THROW(invariance_from_features(Tensor<float>({6, 2}), 3, 1), ParameterError);
  EXPECT_THROW(invariance_from_features(Tensor<float>({7, 2}), 3, 2), DimensionError);
}

TEST(Invariance, NormalizedSimOracle) {
  // 2 images x 2 views in 2-D; cosines computed by hand.
  const auto f = table({{1, 0}, {1, 1}, {0, 1}, {-1, 1}}, {0, 0, 0, 0}, 1).features;
  const auto rep = invariance_from_features(f, 2, 2);
  const double r = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(rep.mean_pos_cos, r, 1e-12);
  const std::vector<double> neg{0.0, -r, r, 0.0};
  double m = 0.0, q = 0.0;
  for (double v : neg) m += v / 4.0;
  for (double v : neg) q += (v - m) * (v - m) / 4.0;
  EXPECT_NEAR(rep.mean_neg_cos, m, 1e-12);
  EXPECT_NEAR(rep.normalized_sim, (r - m) / std::sqrt(q), 1e-9);
}

TEST(Invariance, ViewsAreDeterministicPerSeed) {
  Image img(3, 40, 40, 0.5f);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(i % 97) / 97.0f;
  const AugmentationConfig aug;
  const auto a = invariance_views({img}, aug, 4, 3), b = invariance_views({img}, aug, 4, 3);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t v = 0; v < 4; ++v) EXPECT_EQ(a[v].pixels, b[v].pixels);
  EXPECT_EQ(a[0].height, aug.global_size);
}

TEST(Features, EncodeImagesIsBatchInvariant) {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.embed_dim = 16;
  cfg.depth = 1;
  cfg.num_heads = 2;
  cfg.head_hidden_dim = 16;
  cfg.head_bottleneck_dim = 8;
  cfg.num_prototypes = 16;
  const auto p = init_params<float>(cfg, 1);
  SyntheticSpec s;
  s.n_samples = 5;
  const auto ds = synth_generate(s);
  std::vector<Image> imgs;
  for (std::size_t i = 0; i < ds.size(); ++i) imgs.push_back(ds.image(i));
  const auto one = encode_images(p, imgs, 1), all = encode_images(p, imgs, 5);
  ASSERT_EQ(one.rows(), 5u);
  for (std::size_t i = 0; i < one.size(); ++i) EXPECT_NEAR(one[i], all[i], 1e-5);
}

TEST(Features, ClassBalancedPickCyclesClasses) {
  SyntheticSpec s;
  s.n_samples = 40;
  const auto ds = synth_generate(s);
  const auto idx = pick_class_balanced(ds, 12);
  ASSERT_EQ(idx.size(), 12u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(ds.labels[idx[i]], static_cast<int>(i));
}

TEST(LinearProbe, RandomFeaturesStayNearChance) {
  // 10 balanced classes, pure noise: val accuracy within 3 sigma of 0.1 at n=1000.
  Rng rng(21);
  auto noise = [&](std::size_t n) {
    std::vector<std::vector<float>> rows;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<float> r(16);
      for (auto& v : r) v = static_cast<float>(rng.normal());
      rows.push_back(std::move(r));
      labels.push_back(static_cast<int>(i % 10));
    }
    return table(std::move(rows), std::move(labels), 10);
  };
  const auto train = noise(2000), val = noise(1000);
  EXPECT_NEAR(linear_probe(train, val).accuracy, 0.1, 0.03);
}

TEST(LinearProbe, ShuffledLabelsStayNearChance) {
  auto train = blobs(1000, 4, 6, 0.3, 22), val = blobs(1000, 4, 6, 0.3, 23);
  Rng rng(24);
  rng.shuffle(train.labels.begin(), train.labels.end());
  const double sigma = std::sqrt(0.25 * 0.75 / 1000.0);
  EXPECT_LE(linear_probe(train, val).accuracy, 0.25 + 3 * sigma);
}

TEST(Invariance, ScaleInvariant) {
  Rng rng(25);
  Tensor<float> f({12, 6});
  for (auto& v : f.storage()) v = static_cast<float>(rng.normal());
  Tensor<float> g = f;
  for (auto& v : g.storage()) v *= 37.5f;
  const auto a = invariance_from_features(f, 4, 3), b = invariance_from_features(g, 4, 3);
  EXPECT_NEAR(a.mean_pos_cos, b.mean_pos_cos, 1e-6);
  EXPECT_NEAR(a.normalized_sim, b.normalized_sim, 1e-6);
}

TEST(Invariance, PairwiseMeanMatchesDoubleLoop) {
  Rng rng(26);
  const std::size_t views = 16, d = 8;
  Tensor<float> f({views, d});
  for (auto& v : f.storage()) v = static_cast<float>(rng.normal());
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < views; ++i)
    for (std::size_t j = i + 1; j < views; ++j, ++pairs) {
      double dot = 0, ni = 0, nj = 0;
      for (std::size_t k = 0; k < d; ++k) {
        dot += static_cast<double>(f.at(i, k)) * f.at(j, k);
        ni += static_cast<double>(f.at(i, k)) * f.at(i, k);
        nj += static_cast<double>(f.at(j, k)) * f.at(j, k);
      }
      sum += dot / std::sqrt(ni * nj);
    }
  ASSERT_EQ(pairs, 120u);
  Tensor<float> two({2 * views, d});
  std::copy(f.data().begin(), f.data().end(), two.storage().begin());
  for (std::size_t i = 0; i < views * d; ++i) two[views * d + i] = -f[i];
  EXPECT_NEAR(invariance_from_features(two, 2, views).mean_pos_cos, sum / 120.0, 1e-7);
}
