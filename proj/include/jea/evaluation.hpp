#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "jea/augment.hpp"
#include "jea/datasets.hpp"
#include "jea/vit.hpp"

namespace jea {

struct FeatureTable {
  Tensor<float> features;  // [n, d]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
};

// Teacher CLS features of `images` (each resized to the model's input size
// when needed), in order, `batch_size` images per forward.
inline Tensor<float> encode_images(const ModelParams<float>& params, const std::vector<Image>& images,
                                   std::size_t batch_size = 256) {
  const ModelConfig& mc = params.config;
  if (batch_size == 0) throw ParameterError("encode_images: batch_size must be positive");
  const auto bound = bind(params, false);
  Tensor<float> out({images.size(), mc.embed_dim}, uninitialized);
  const std::size_t n = mc.grid() * mc.grid(), pd = mc.patch_dim();
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, images.size() - start);
    Tensor<float> patches({count * n, pd}, uninitialized);
    for (std::size_t i = 0; i < count; ++i) {
      const Image& src = images[start + i];
      const Image img = (src.height == mc.image_size && src.width == mc.image_size)
                            ? src
                            : resize(src, mc.image_size, mc.image_size);
      const auto t = input_patches<float>(img.pixels, img.channels, img.height, img.width, mc.patch_size);
      std::copy(t.data().begin(), t.data().end(), patches.data().begin() + static_cast<std::ptrdiff_t>(i * n * pd));
    }
    const auto enc = encoder_forward(bound, mc, patches, count, mc.grid());
    std::copy(enc.cls.value().data().begin(), enc.cls.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(start * mc.embed_dim));
  }
  return out;
}

inline FeatureTable extract_features(const ModelParams<float>& params, const Dataset& ds, std::string split,
                                     std::size_t batch_size = 256) {
  std::vector<Image> images;
  images.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) images.push_back(ds.image(i));
  FeatureTable t;
  t.features = encode_images(params, images, batch_size);
  t.labels = ds.labels;
  t.num_classes = ds.num_classes;
  t.split = std::move(split);
  return t;
}

struct ProbeResult {
  double accuracy = 0.0;
  double train_accuracy = 0.0;
  std::size_t n_train = 0, n_val = 0;
};

struct ProbeConfig {
  std::size_t epochs = 100;
  double lr = 1e-2;
  double momentum = 0.9;
  std::size_t batch_size = 16;  // 100 epochs at 256 leave the probe far from converged on a few thousand rows
  std::uint64_t seed = 0;
};

namespace detail {
using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline MatD to_matrix(const Tensor<float>& t) {
  MatD m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  for (std::size_t i = 0; i < t.size(); ++i) m.data()[i] = static_cast<double>(t[i]);
  return m;
}

inline void check_tables(const FeatureTable& train, const FeatureTable& val) {
  if (train.dim() != val.dim()) throw DimensionError("probe: train/val feature dims differ");
  if (train.size() == 0 || val.size() == 0) throw ProbeError("probe: empty feature table");
  if (train.features.rows() != train.size() || val.features.rows() != val.size())
    throw DimensionError("probe: label count does not match feature rows");
  if (!train.features.all_finite() || !val.features.all_finite()) throw NumericError("probe: non-finite features");
}

inline std::size_t class_count(const FeatureTable& train, const FeatureTable& val) {
  int mx = 0;
  for (int l : train.labels) mx = std::max(mx, l);
  for (int l : val.labels) mx = std::max(mx, l);
  return std::max<std::size_t>({train.num_classes, val.num_classes, static_cast<std::size_t>(mx) + 1});
}

inline std::size_t argmax_row(const MatD& m, Eigen::Index r) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return static_cast<std::size_t>(best);
}
}  // namespace detail

// Multinomial logistic regression on frozen features: mini-batch SGD with
// momentum, cosine learning rate over all iterations, no weight decay.
inline ProbeResult linear_probe(const FeatureTable& train, const FeatureTable& val, const ProbeConfig& cfg = {}) {
  detail::check_tables(train, val);
  {
    std::vector<int> distinct(train.labels);
    std::sort(distinct.begin(), distinct.end());
    if (std::unique(distinct.begin(), distinct.end()) - distinct.begin() < 2)
      throw ProbeError("linear_probe: training set has a single class");
  }
  if (cfg.batch_size == 0 || cfg.epochs == 0) throw ParameterError("linear_probe: epochs and batch size must be positive");
  const auto C = static_cast<Eigen::Index>(detail::class_count(train, val));
  const auto D = static_cast<Eigen::Index>(train.dim());
  const detail::MatD X = detail::to_matrix(train.features);
  const std::size_t n = train.size();
  const std::size_t bs = std::min(cfg.batch_size, n);
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const double total_iters = static_cast<double>(per_epoch * cfg.epochs);

  detail::MatD W = detail::MatD::Zero(D, C), vW = detail::MatD::Zero(D, C);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(C), vb = Eigen::RowVectorXd::Zero(C);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t iter = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    Rng rng(derive_seed(cfg.seed, stream_tag::probe, e));
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < n; start += bs, ++iter) {
      const std::size_t cnt = std::min(bs, n - start);
      detail::MatD xb(static_cast<Eigen::Index>(cnt), D);
      for (std::size_t i = 0; i < cnt; ++i) xb.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(order[start + i]));
      detail::MatD g = xb * W;
      g.rowwise() += b;
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double mx = g.row(r).maxCoeff();
        g.row(r) = (g.row(r).array() - mx).exp();
        g.row(r) /= g.row(r).sum();
        g(r, train.labels[order[start + static_cast<std::size_t>(r)]]) -= 1.0;
      }
      g /= static_cast<double>(cnt);
      const double lr = cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(iter) / total_iters));
      vW = cfg.momentum * vW + xb.transpose() * g;
      vb = cfg.momentum * vb + g.colwise().sum();
      W -= lr * vW;
      b -= lr * vb;
    }
  }
  auto accuracy = [&](const detail::MatD& F, const std::vector<int>& labels) {
    detail::MatD logits = F * W;
    logits.rowwise() += b;
    std::size_t hit = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r)
      hit += detail::argmax_row(logits, r) == static_cast<std::size_t>(labels[static_cast<std::size_t>(r)]);
    return static_cast<double>(hit) / static_cast<double>(labels.size());
  };
  ProbeResult res;
  res.n_train = n;
  res.n_val = val.size();
  res.train_accuracy = accuracy(X, train.labels);
  res.accuracy = accuracy(detail::to_matrix(val.features), val.labels);
  return res;
}

// Cosine k-NN majority vote. Neighbours with equal similarity are ordered by
// training index; vote ties go to the smaller class index.
inline ProbeResult knn_probe(const FeatureTable& train, const FeatureTable& val, std::size_t k) {
  detail::check_tables(train, val);
  if (k == 0) throw ParameterError("knn_probe: k must be at least 1");
  if (k > train.size()) throw ParameterError("knn_probe: k exceeds the training set size");
  auto normalized = [](const Tensor<float>& t) {
    detail::MatD m = detail::to_matrix(t);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const double nrm = m.row(r).norm();
      if (nrm > 0.0) m.row(r) /= nrm;
    }
    return m;
  };
  const detail::MatD A = normalized(train.features), Bv = normalized(val.features);
  const std::size_t C = detail::class_count(train, val);
  const detail::MatD S = Bv * A.transpose();
  std::vector<std::size_t> idx(train.size());
  std::size_t hit = 0;
  for (Eigen::Index r = 0; r < S.rows(); ++r) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto closer = [&](std::size_t a, std::size_t b) {
      const double sa = S(r, static_cast<Eigen::Index>(a)), sb = S(r, static_cast<Eigen::Index>(b));
      return sa != sb ? sa > sb : a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), closer);
    std::vector<std::size_t> votes(C, 0);
    for (std::size_t i = 0; i < k; ++i) ++votes[static_cast<std::size_t>(train.labels[idx[i]])];
    const auto pred = static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    hit += pred == static_cast<std::size_t>(val.labels[static_cast<std::size_t>(r)]);
  }
  ProbeResult res;
  res.n_train = train.size();
  res.n_val = val.size();
  res.accuracy = static_cast<double>(hit) / static_cast<double>(val.size());
  return res;
}

// ---------------------------------------------------------------------------
// Invariance

struct InvarianceReport {
  double mean_pos_cos = 0.0;
  double normalized_sim = std::numeric_limits<double>::quiet_NaN();
  bool normalized_defined = false;
  double mean_neg_cos = 0.0;
  double std_neg_cos = 0.0;
  std::size_t n_images = 0;
  std::size_t n_views = 0;
};

inline constexpr double kNegStdFloor = 1e-6;

// features: [n_images * n_views, d], rows grouped by image. Positive pairs are
// the view pairs of one image; negatives are all view pairs across images.
// normalized_sim = (mean_pos - mean_neg) / std_neg (population std).
inline InvarianceReport invariance_from_features(const Tensor<float>& features, std::size_t n_images,
                                                 std::size_t n_views) {
  if (n_views < 2) throw ParameterError("invariance: need at least two views per image");
  if (features.rows() != n_images * n_views) throw DimensionError("invariance: feature rows do not match images x views");
  detail::MatD F = detail::to_matrix(features);
  for (Eigen::Index r = 0; r < F.rows(); ++r) {
    const double nrm = F.row(r).norm();
    if (nrm > 0.0) F.row(r) /= nrm;
  }
  const detail::MatD S = F * F.transpose();
  InvarianceReport rep;
  rep.n_images = n_images;
  rep.n_views = n_views;
  double pos_acc = 0.0, neg_sum = 0.0, neg_sq = 0.0;
  std::size_t neg_n = 0;
  const auto V = static_cast<Eigen::Index>(n_views);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n_images); ++i) {
    double s = 0.0;
    for (Eigen::Index a = 0; a < V; ++a)
      for (Eigen::Index b = a + 1; b < V; ++b) s += S(i * V + a, i * V + b);
    pos_acc += s / static_cast<double>(n_views * (n_views - 1) / 2);
    for (Eigen::Index j = i + 1; j < static_cast<Eigen::Index>(n_images); ++j)
      for (Eigen::Index a = 0; a < V; ++a)
        for (Eigen::Index b = 0; b < V; ++b) {
          const double c = S(i * V + a, j * V + b);
          neg_sum += c;
          neg_sq += c * c;
          ++neg_n;
        }
  }
  rep.mean_pos_cos = n_images ? pos_acc / static_cast<double>(n_images) : 0.0;
  if (neg_n > 0) {
    rep.mean_neg_cos = neg_sum / static_cast<double>(neg_n);
    rep.std_neg_cos = std::sqrt(std::max(0.0, neg_sq / static_cast<double>(neg_n) - rep.mean_neg_cos * rep.mean_neg_cos));
  }
  if (neg_n > 0 && rep.std_neg_cos >= kNegStdFloor) {
    rep.normalized_sim = (rep.mean_pos_cos - rep.mean_neg_cos) / rep.std_neg_cos;
    rep.normalized_defined = true;
  }
  return rep;
}

// n_views augmented global views per image: random resized crop at the
// global scale plus the photometric chain of `aug` (alternating first/second
// global-view probabilities), whatever mode the model was trained with.
inline std::vector<Image> invariance_views(const std::vector<Image>& images, const AugmentationConfig& aug,
                                           std::size_t n_views, std::uint64_t seed) {
  if (n_views < 2) throw ParameterError("invariance: need at least two views per image");
  std::vector<Image> views;
  views.reserve(images.size() * n_views);
  for (std::size_t i = 0; i < images.size(); ++i) {
    Rng geo(derive_seed(seed, stream_tag::invariance, stream_tag::geometric, i));
    Rng photo(derive_seed(seed, stream_tag::invariance, stream_tag::photometric, i));
    for (std::size_t v = 0; v < n_views; ++v) {
      const Image crop = random_resized_crop(images[i], geo, aug.global_scale, aug.ratio, aug.global_size);
      const auto kind = v % 2 == 0 ? ViewKind::FirstGlobal : ViewKind::SecondGlobal;
      views.push_back(apply_photometric(crop, sample_photometric_params(photo, aug.photometric, kind)));
    }
  }
  return views;
}

inline InvarianceReport invariance_metric(const ModelParams<float>& params, const std::vector<Image>& images,
                                          const AugmentationConfig& aug, std::size_t n_views, std::uint64_t seed) {
  const auto views = invariance_views(images, aug, n_views, seed);
  return invariance_from_features(encode_images(params, views), images.size(), n_views);
}

// Up to n indices cycling through classes in order, so the picked images come
// from distinct classes wherever possible.
inline std::vector<std::size_t> pick_class_balanced(const Dataset& ds, std::size_t n) {
  std::vector<std::vector<std::size_t>> by_class(std::max<std::size_t>(ds.num_classes, 1));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto c = static_cast<std::size_t>(ds.labels[i]);
    if (c >= by_class.size()) by_class.resize(c + 1);
    by_class[c].push_back(i);
  }
  std::vector<std::size_t> out;
  for (std::size_t round = 0; out.size() < n; ++round) {
    bool any = false;
    for (const auto& cls : by_class)
      if (round < cls.size() && out.size() < n) {
        out.push_back(cls[round]);
        any = true;
      }
    if (!any) break;
  }
  return out;
}

}  // namespace jea
