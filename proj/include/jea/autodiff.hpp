#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <unordered_set>
#include <vector>

#include "jea/tensor.hpp"

namespace jea {

// Reverse-mode tape. Each op allocates a Node holding its value; when any
// input requires a gradient, the node also records its parents and a closure
// that pushes the node's gradient back into them.
template <typename T>
struct Node {
  Tensor<T> value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
};

template <typename T>
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor<T> value, bool requires_grad = true) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }
  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  std::span<const T> grad() const { return node_->value.grad(); }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }
  bool defined() const { return static_cast<bool>(node_); }

  T item() const {
    if (node_->value.size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  // Seeds d(self)/d(self) = 1 and runs every recorded closure in reverse
  // topological order. Gradients accumulate into existing grad slots.
  void backward() const {
    if (node_->value.size() != 1)
      throw DimensionError("backward() needs a scalar, got " + shape_str(shape()));
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node<T>* p = n->parents[idx++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->value.ensure_grad();
    node_->value.grad()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->value.has_grad()) n->backward_fn(*n);
    }
  }

 private:
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  template <typename U, typename F>
  friend Var<U> make_op(Tensor<U> value, std::vector<Var<U>> inputs, F&& fn);

  std::shared_ptr<Node<T>> node_;
};

template <typename T, typename F>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, F&& fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var<T>& v) { return v.requires_grad(); });
  if (any) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& v : inputs) n->parents.push_back(v.ptr());
    n->backward_fn = std::forward<F>(fn);
  }
  return Var<T>(std::move(n));
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
CMatMap<T> cmap(const Tensor<T>& t, std::size_t r, std::size_t c) {
  return CMatMap<T>(t.data().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
MatMap<T> map(Tensor<T>& t, std::size_t r, std::size_t c) {
  return MatMap<T>(t.data().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
MatMap<T> gmap(Node<T>& n, std::size_t r, std::size_t c) {
  n.value.ensure_grad();
  return MatMap<T>(n.value.grad().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <typename T>
std::span<T> grad_of(Node<T>& n) {
  n.value.ensure_grad();
  return n.value.grad();
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// [m,k] x [k,n]. Leading dims of `a` are flattened into rows.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const std::size_t m = a.rows(), k = a.cols();
  detail::require(b.value().ndim() == 2 && b.value().dim(0) == k,
                  "matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t n = b.cols();
  Tensor<T> out({m, n}, uninitialized);
  detail::map(out, m, n).noalias() = detail::cmap(a.value(), m, k) * detail::cmap(b.value(), k, n);
  return make_op<T>(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto g = detail::CMatMap<T>(self.value.grad().data(), m, n);
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) detail::gmap(pa, m, k).noalias() += g * detail::cmap(pb.value, k, n).transpose();
    if (pb.requires_grad) detail::gmap(pb, k, n).noalias() += detail::cmap(pa.value, m, k).transpose() * g;
  });
}

// a [m,k] times b^T where b is [n,k].
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  const std::size_t m = a.rows(), k = a.cols();
  detail::require(b.value().ndim() == 2 && b.cols() == k,
                  "matmul_nt: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const std::size_t n = b.rows();
  Tensor<T> out({m, n}, uninitialized);
  detail::map(out, m, n).noalias() = detail::cmap(a.value(), m, k) * detail::cmap(b.value(), n, k).transpose();
  return make_op<T>(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto g = detail::CMatMap<T>(self.value.grad().data(), m, n);
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) detail::gmap(pa, m, k).noalias() += g * detail::cmap(pb.value, n, k);
    if (pb.requires_grad) detail::gmap(pb, n, k).noalias() += g.transpose() * detail::cmap(pa.value, m, k);
  });
}

// x [r,c] + bias [c] broadcast over rows.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const std::size_t r = x.rows(), c = x.cols();
  detail::require(bias.value().size() == c, "add_bias: bias size mismatch");
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bias.value()[j];
  return make_op<T>(std::move(out), {x, bias}, [r, c](Node<T>& self) {
    auto g = self.value.grad();
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (px.requires_grad) {
      auto gx = detail::grad_of(px);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (pb.requires_grad) {
      auto gb = detail::grad_of(pb);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
    }
  });
}

// x [r,k] * weight [k,c] + bias [c], fused.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const std::size_t m = x.rows(), k = x.cols();
  detail::require(weight.value().ndim() == 2 && weight.value().dim(0) == k,
                  "linear: inner dims differ " + shape_str(x.shape()) + " x " + shape_str(weight.shape()));
  const std::size_t n = weight.cols();
  detail::require(bias.value().size() == n, "linear: bias size mismatch");
  Tensor<T> out({m, n}, uninitialized);
  auto o = detail::map(out, m, n);
  o.noalias() = detail::cmap(x.value(), m, k) * detail::cmap(weight.value(), k, n);
  o.rowwise() += detail::cmap(bias.value(), 1, n).row(0);
  return make_op<T>(std::move(out), {x, weight, bias}, [m, k, n](Node<T>& self) {
    auto g = detail::CMatMap<T>(self.value.grad().data(), m, n);
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    if (px.requires_grad) detail::gmap(px, m, k).noalias() += g * detail::cmap(pw.value, k, n).transpose();
    if (pw.requires_grad) detail::gmap(pw, k, n).noalias() += detail::cmap(px.value, m, k).transpose() * g;
    if (pb.requires_grad) detail::gmap(pb, 1, n).row(0) += g.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.value().size() == b.value().size(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.value().size();
  Tensor<T> out(a.shape(), uninitialized);
  detail::map(out, 1, n) = detail::cmap(a.value(), 1, n) + detail::cmap(b.value(), 1, n);
  return make_op<T>(std::move(out), {a, b}, [n](Node<T>& self) {
    auto g = detail::CMatMap<T>(self.value.grad().data(), 1, n);
    for (auto* p : {self.parents[0].get(), self.parents[1].get()})
      if (p->requires_grad) detail::gmap(*p, 1, n) += g;
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v *= s;
  return make_op<T>(std::move(out), {x}, [s](Node<T>& self) {
    auto g = self.value.grad();
    auto gp = detail::grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += s * g[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  return make_op<T>(Tensor<T>(Shape{}, std::vector<T>{acc}), {x}, [](Node<T>& self) {
    const T g = self.value.grad()[0];
    for (auto& v : detail::grad_of(*self.parents[0])) v += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

namespace detail {
template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);
}  // namespace detail

template <typename T>
T gelu_value(T x) {
  const T u = detail::kGeluC<T> * (x + detail::kGeluA<T> * x * x * x);
  return T{0.5} * x * (T{1} + std::tanh(u));
}

// Tanh approximation of GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  const std::size_t n = x.value().size();
  const T c = detail::kGeluC<T>, a = detail::kGeluA<T>;
  auto in = detail::cmap(x.value(), 1, n).array();
  Tensor<T> th({n}, uninitialized);
  auto t = detail::map(th, 1, n).array();
  t = (c * (in + a * in.cube())).tanh();
  Tensor<T> out(x.shape(), uninitialized);
  detail::map(out, 1, n).array() = T{0.5} * in * (T{1} + t);
  return make_op<T>(std::move(out), {x}, [n, c, a, th = std::move(th)](Node<T>& self) {
    auto& p = *self.parents[0];
    auto v = detail::cmap(p.value, 1, n).array();
    auto t = detail::cmap(th, 1, n).array();
    auto g = detail::CMatMap<T>(self.value.grad().data(), 1, n).array();
    detail::gmap(p, 1, n).array() +=
        g * (T{0.5} * (T{1} + t) + T{0.5} * v * (T{1} - t.square()) * c * (T{1} + T{3} * a * v.square()));
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T{1e-5}) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Col = Eigen::Array<T, Eigen::Dynamic, 1>;
  if (!(eps > T{0})) throw ParameterError("layer_norm: eps must be positive");
  const std::size_t r = x.rows(), c = x.cols();
  detail::require(gamma.value().size() == c && beta.value().size() == c, "layer_norm: affine size mismatch");
  auto in = detail::cmap(x.value(), r, c).array();
  const Col mu = in.rowwise().mean();
  Arr xhat = in.colwise() - mu;
  const Col inv_std = (xhat.square().rowwise().mean() + eps).rsqrt();
  xhat.colwise() *= inv_std;
  Tensor<T> out(x.shape(), uninitialized);
  detail::map(out, r, c).array() = (xhat.rowwise() * detail::cmap(gamma.value(), 1, c).array().row(0)).rowwise() +
                                   detail::cmap(beta.value(), 1, c).array().row(0);
  return make_op<T>(std::move(out), {x, gamma, beta},
                    [r, c, xhat = std::move(xhat), inv_std](Node<T>& self) {
                      auto g = detail::CMatMap<T>(self.value.grad().data(), r, c).array();
                      auto& px = *self.parents[0];
                      auto& pg = *self.parents[1];
                      auto& pb = *self.parents[2];
                      if (pg.requires_grad) detail::gmap(pg, 1, c).array().row(0) += (g * xhat).colwise().sum();
                      if (pb.requires_grad) detail::gmap(pb, 1, c).array().row(0) += g.colwise().sum();
                      if (px.requires_grad) {
                        const Arr dh = g.rowwise() * detail::cmap(pg.value, 1, c).array().row(0);
                        const Col m1 = dh.rowwise().mean();
                        const Col m2 = (dh * xhat).rowwise().mean();
                        Arr dx = (dh.colwise() - m1) - xhat.colwise() * m2;
                        dx.colwise() *= inv_std;
                        detail::gmap(px, r, c).array() += dx;
                      }
                    });
}

// Rows scaled to unit L2 norm; rows with norm below eps are divided by eps.
template <typename T>
Var<T> l2_normalize(const Var<T>& x, T eps = T{1e-12}) {
  if (!(eps > T{0})) throw ParameterError("l2_normalize: eps must be positive");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> out(x.shape(), uninitialized);
  std::vector<T> denom(r);
  const auto& in = x.value();
  for (std::size_t i = 0; i < r; ++i) {
    T ss{0};
    for (std::size_t j = 0; j < c; ++j) ss += in[i * c + j] * in[i * c + j];
    denom[i] = std::max(std::sqrt(ss), eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = in[i * c + j] / denom[i];
  }
  return make_op<T>(std::move(out), {x}, [r, c, eps, denom = std::move(denom)](Node<T>& self) {
    auto g = self.value.grad();
    const auto& y = self.value;
    auto gx = detail::grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < r; ++i) {
      if (denom[i] > eps) {
        T dot{0};
        for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * g[i * c + j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / denom[i];
      } else {
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] / eps;
      }
    }
  });
}

// Row softmax of x / temperature, max-subtracted.
template <typename T>
Tensor<T> softmax_values(const Tensor<T>& x, T temperature) {
  if (!(temperature > T{0})) throw ParameterError("softmax: temperature must be positive");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> out(x.shape(), uninitialized);
  for (std::size_t i = 0; i < r; ++i) {
    T mx = x[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    T z{0};
    for (std::size_t j = 0; j < c; ++j) {
      const T e = std::exp((x[i * c + j] - mx) / temperature);
      out[i * c + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return out;
}

template <typename T>
Var<T> softmax(const Var<T>& x, T temperature = T{1}) {
  const std::size_t r = x.rows(), c = x.cols();
  return make_op<T>(softmax_values(x.value(), temperature), {x}, [r, c, temperature](Node<T>& self) {
    auto g = self.value.grad();
    const auto& y = self.value;
    auto gx = detail::grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < r; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot) / temperature;
    }
  });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x, T temperature = T{1}) {
  if (!(temperature > T{0})) throw ParameterError("log_softmax: temperature must be positive");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> out(x.shape(), uninitialized);
  const auto& in = x.value();
  for (std::size_t i = 0; i < r; ++i) {
    T mx = in[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[i * c + j]);
    T z{0};
    for (std::size_t j = 0; j < c; ++j) z += std::exp((in[i * c + j] - mx) / temperature);
    const T lse = std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (in[i * c + j] - mx) / temperature - lse;
  }
  return make_op<T>(std::move(out), {x}, [r, c, temperature](Node<T>& self) {
    auto g = self.value.grad();
    const auto& y = self.value;
    auto gx = detail::grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < r; ++i) {
      T gs{0};
      for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        gx[i * c + j] += (g[i * c + j] - std::exp(y[i * c + j]) * gs) / temperature;
    }
  });
}

template <typename T>
T row_entropy(std::span<const T> p) {
  T h{0};
  for (T v : p)
    if (v > T{0}) h -= v * std::log(v);
  return h;
}

// Mean over rows of -sum(p * log_q). The target is a plain tensor, so no
// gradient can reach it.
template <typename T>
Var<T> cross_entropy_soft(const Tensor<T>& p_target, const Var<T>& log_q) {
  if (p_target.size() != log_q.value().size())
    throw DimensionError("cross_entropy_soft: shape mismatch " + shape_str(p_target.shape()) + " vs " +
                         shape_str(log_q.shape()));
  const std::size_t r = log_q.rows(), c = log_q.cols();
  for (std::size_t i = 0; i < r; ++i) {
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += p_target[i * c + j];
    if (std::abs(s - T{1}) > T{1e-4})
      throw ContractError("cross_entropy_soft: target row " + std::to_string(i) + " sums to " + std::to_string(s));
  }
  T acc{0};
  const auto& lq = log_q.value();
  for (std::size_t i = 0; i < r * c; ++i)
    if (p_target[i] != T{0}) acc -= p_target[i] * lq[i];
  acc /= static_cast<T>(r);
  return make_op<T>(Tensor<T>(Shape{}, std::vector<T>{acc}), {log_q}, [p = p_target, r](Node<T>& self) {
    const T g = self.value.grad()[0] / static_cast<T>(r);
    auto gx = detail::grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= g * p[i];
  });
}

// ---------------------------------------------------------------------------
// Row plumbing

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> indices) {
  const std::size_t c = x.cols(), r = x.rows();
  Tensor<T> out({indices.size(), c}, uninitialized);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= r) throw DimensionError("gather_rows: index out of range");
    std::copy_n(x.value().data().begin() + indices[i] * c, c, out.data().begin() + i * c);
  }
  return make_op<T>(std::move(out), {x}, [c, idx = std::move(indices)](Node<T>& self) {
    auto g = self.value.grad();
    auto gx = detail::grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gx[idx[i] * c + j] += g[i * c + j];
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), start);
  return gather_rows(x, std::move(idx));
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.cols() == c, "concat_rows: column mismatch");
    total += p.rows();
  }
  Tensor<T> out({total, c}, uninitialized);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + off);
    off += p.value().size();
  }
  return make_op<T>(std::move(out), parts, [](Node<T>& self) {
    auto g = self.value.grad();
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->value.size();
      if (p->requires_grad) {
        auto gp = detail::grad_of(*p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
      }
      off += n;
    }
  });
}

// Rows of `x` listed in `indices` are replaced by `token`; gradient for those
// rows flows to the token instead of x.
template <typename T>
Var<T> replace_rows(const Var<T>& x, const std::vector<std::size_t>& indices, const Var<T>& token) {
  const std::size_t r = x.rows(), c = x.cols();
  detail::require(token.value().size() == c, "replace_rows: token size mismatch");
  std::vector<char> hit(r, 0);
  for (auto i : indices) {
    if (i >= r) throw PlanError("mask index " + std::to_string(i) + " out of range for " + std::to_string(r) + " rows");
    hit[i] = 1;
  }
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < r; ++i)
    if (hit[i]) std::copy(token.value().data().begin(), token.value().data().end(), out.data().begin() + i * c);
  return make_op<T>(std::move(out), {x, token}, [c, hit = std::move(hit)](Node<T>& self) {
    auto g = self.value.grad();
    auto& px = *self.parents[0];
    auto& pt = *self.parents[1];
    std::span<T> gx, gt;
    if (px.requires_grad) gx = detail::grad_of(px);
    if (pt.requires_grad) gt = detail::grad_of(pt);
    for (std::size_t i = 0; i < hit.size(); ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        if (hit[i]) {
          if (!gt.empty()) gt[j] += g[i * c + j];
        } else if (!gx.empty()) {
          gx[i * c + j] += g[i * c + j];
        }
      }
    }
  });
}

// Builds num_seq sequences of [cls; tokens] and adds a per-position embedding
// table [seq_len+1, d] to every sequence.
template <typename T>
Var<T> assemble_sequences(const Var<T>& tokens, const Var<T>& cls, const Var<T>& pos, std::size_t num_seq) {
  const std::size_t d = tokens.cols();
  detail::require(tokens.rows() % num_seq == 0, "assemble_sequences: token rows not divisible by sequence count");
  const std::size_t n = tokens.rows() / num_seq;
  detail::require(cls.value().size() == d && pos.rows() == n + 1 && pos.cols() == d,
                  "assemble_sequences: cls/pos shape mismatch");
  Tensor<T> out({num_seq * (n + 1), d}, uninitialized);
  const auto& tv = tokens.value();
  const auto& cv = cls.value();
  const auto& pv = pos.value();
  for (std::size_t s = 0; s < num_seq; ++s) {
    T* row = out.data().data() + s * (n + 1) * d;
    for (std::size_t j = 0; j < d; ++j) row[j] = cv[j] + pv[j];
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < d; ++j) row[(t + 1) * d + j] = tv[(s * n + t) * d + j] + pv[(t + 1) * d + j];
  }
  return make_op<T>(std::move(out), {tokens, cls, pos}, [num_seq, n, d](Node<T>& self) {
    auto g = self.value.grad();
    auto& pt = *self.parents[0];
    auto& pc = *self.parents[1];
    auto& pp = *self.parents[2];
    for (std::size_t s = 0; s < num_seq; ++s) {
      const T* row = g.data() + s * (n + 1) * d;
      if (pc.requires_grad) {
        auto gc = detail::grad_of(pc);
        for (std::size_t j = 0; j < d; ++j) gc[j] += row[j];
      }
      if (pp.requires_grad) {
        auto gp = detail::grad_of(pp);
        for (std::size_t j = 0; j < (n + 1) * d; ++j) gp[j] += row[j];
      }
      if (pt.requires_grad) {
        auto gt = detail::grad_of(pt);
        for (std::size_t t = 0; t < n; ++t)
          for (std::size_t j = 0; j < d; ++j) gt[(s * n + t) * d + j] += row[(t + 1) * d + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Multi-head self-attention over num_seq independent sequences.
// qkv: [num_seq*seq_len, 3*d] laid out as [Q | K | V]; returns [num_seq*seq_len, d].
template <typename T>
Var<T> multi_head_attention(const Var<T>& qkv, std::size_t num_seq, std::size_t num_heads) {
  using namespace detail;
  const std::size_t rows = qkv.rows();
  require(qkv.cols() % 3 == 0, "attention: qkv width must be a multiple of 3");
  const std::size_t d = qkv.cols() / 3;
  require(d % num_heads == 0, "attention: embed dim not divisible by head count");
  require(num_seq > 0 && rows % num_seq == 0, "attention: rows not divisible by sequence count");
  const std::size_t n = rows / num_seq;
  const std::size_t dh = d / num_heads;
  const T sc = T{1} / std::sqrt(static_cast<T>(dh));
  const auto N = static_cast<Eigen::Index>(n);
  const auto DH = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d));
  const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(d));

  Tensor<T> out({rows, d}, uninitialized);
  const bool keep = qkv.requires_grad();
  std::vector<T, AlignedAllocator<T>> probs(keep ? num_seq * num_heads * n * n : 0);
  RowMat<T> scores(N, N);
  const T* base = qkv.value().data().data();
  for (std::size_t s = 0; s < num_seq; ++s) {
    for (std::size_t h = 0; h < num_heads; ++h) {
      const T* q = base + s * n * 3 * d + h * dh;
      CStridedMap<T> Q(q, N, DH, in_stride), K(q + d, N, DH, in_stride), V(q + 2 * d, N, DH, in_stride);
      scores.noalias() = Q * K.transpose();
      scores *= sc;
      for (Eigen::Index i = 0; i < N; ++i) {
        const T mx = scores.row(i).maxCoeff();
        scores.row(i) = (scores.row(i).array() - mx).exp();
        scores.row(i) /= scores.row(i).sum();
      }
      StridedMap<T> O(out.data().data() + s * n * d + h * dh, N, DH, out_stride);
      O.noalias() = scores * V;
      if (keep) MatMap<T>(probs.data() + (s * num_heads + h) * n * n, N, N) = scores;
    }
  }
  return make_op<T>(std::move(out), {qkv}, [=, probs = std::move(probs)](Node<T>& self) {
    auto& px = *self.parents[0];
    auto gx = grad_of(px);
    const T* x = px.value.data().data();
    const T* g = self.value.grad().data();
    RowMat<T> dP(N, N);
    for (std::size_t s = 0; s < num_seq; ++s) {
      for (std::size_t h = 0; h < num_heads; ++h) {
        const std::size_t off = s * n * 3 * d + h * dh;
        CStridedMap<T> Q(x + off, N, DH, in_stride), K(x + off + d, N, DH, in_stride),
            V(x + off + 2 * d, N, DH, in_stride);
        StridedMap<T> dQ(gx.data() + off, N, DH, in_stride), dK(gx.data() + off + d, N, DH, in_stride),
            dV(gx.data() + off + 2 * d, N, DH, in_stride);
        CStridedMap<T> dO(g + s * n * d + h * dh, N, DH, out_stride);
        CMatMap<T> P(probs.data() + (s * num_heads + h) * n * n, N, N);
        dV.noalias() += P.transpose() * dO;
        dP.noalias() = dO * V.transpose();
        for (Eigen::Index i = 0; i < N; ++i) {
          const T dot = dP.row(i).dot(P.row(i));
          dP.row(i) = P.row(i).array() * (dP.row(i).array() - dot);
        }
        dP *= sc;
        dQ.noalias() += dP * K;
        dK.noalias() += dP.transpose() * Q;
      }
    }
  });
}

}  // namespace jea
