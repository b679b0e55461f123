#pragma once

// Invertible affine coupling over the feature axis. Each layer keeps one half
// of the features and rescales/shifts the other half conditioned on it:
//
//   y_a = x_a
//   y_b = x_b * exp(s(x_a)) + t(x_a)
//
// s and t are two-layer fully connected maps with a tanh hidden layer, and s
// is squashed to (-kScaleCap, kScaleCap). The Jacobian is triangular, so
// log|det| is the column sum of s.

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "indiformer/autograd.hpp"
#include "indiformer/ops.hpp"

namespace indiformer {

inline constexpr double kScaleCap = 2.0;

/// Two-layer fully connected conditioner: out = W2 tanh(W1 x + b1) + b2.
template <typename T>
struct Conditioner {
  Parameter<T> w1, b1, w2, b2;

  Conditioner() = default;
  Conditioner(const std::string& name, std::size_t dim, Rng& rng)
      : w1(name + ".w1", xavier_uniform<T>({dim, dim}, dim, dim, rng)),
        b1(name + ".b1", Tensor<T>({dim})),
        w2(name + ".w2", Tensor<T>({dim, dim})),
        b2(name + ".b2", Tensor<T>({dim})) {}

  Var<T> operator()(const Var<T>& x) const {
    Var<T> h = tanh(add_row_bias(matmul(w1.var(), x), b1.var()));
    return add_row_bias(matmul(w2.var(), h), b2.var());
  }

  void collect(ParameterList<T>& out) { out.insert(out.end(), {&w1, &b1, &w2, &b2}); }
};

template <typename T>
struct CouplingResult {
  Var<T> output;   // [N x T]
  Var<T> log_det;  // [1 x T], log|det d(output)/d(input)| per column
};

template <typename T>
class CouplingLayer {
 public:
  CouplingLayer() = default;

  /// Output layers of both conditioners start at zero, so a fresh layer is
  /// the identity map with zero log-det.
  CouplingLayer(std::string name, std::size_t feature_dim, bool flip, Rng& rng)
      : feature_dim_(feature_dim), flip_(flip) {
    if (feature_dim == 0 || feature_dim % 2 != 0) {
      throw ConfigError("coupling feature dimension must be even and positive, got " +
                        std::to_string(feature_dim));
    }
    scale_net_ = Conditioner<T>(name + ".scale", feature_dim / 2, rng);
    shift_net_ = Conditioner<T>(name + ".shift", feature_dim / 2, rng);
  }

  std::size_t feature_dim() const { return feature_dim_; }
  bool flip() const { return flip_; }
  Conditioner<T>& scale_net() { return scale_net_; }
  Conditioner<T>& shift_net() { return shift_net_; }

  CouplingResult<T> forward(const Var<T>& x) const {
    auto [fixed, moving] = split(x);
    Var<T> s = scale(fixed);
    Var<T> y_moving = add(mul(moving, exp(s)), shift_net_(fixed));
    return {join(fixed, y_moving), column_sum(s)};
  }

  /// Log-det returned is that of the inverse map (dx/dy).
  CouplingResult<T> inverse(const Var<T>& y) const {
    auto [fixed, moving] = split(y);
    Var<T> s = scale(fixed);
    Var<T> x_moving = mul(sub(moving, shift_net_(fixed)), exp(::indiformer::scale(s, T{-1})));
    return {join(fixed, x_moving), ::indiformer::scale(column_sum(s), T{-1})};
  }

  void collect(ParameterList<T>& out) {
    scale_net_.collect(out);
    shift_net_.collect(out);
  }

 private:
  std::pair<Var<T>, Var<T>> split(const Var<T>& x) const {
    if (x.shape().size() != 2 || x.dim(0) != feature_dim_) {
      throw DimensionError("coupling layer over " + std::to_string(feature_dim_) +
                           " features got " + shape_string(x.shape()));
    }
    const std::size_t half = feature_dim_ / 2;
    Var<T> first = slice_leading(x, 0, half);
    Var<T> second = slice_leading(x, half, feature_dim_);
    return flip_ ? std::pair{second, first} : std::pair{first, second};
  }

  Var<T> join(const Var<T>& fixed, const Var<T>& moving) const {
    return flip_ ? concat_leading(moving, fixed) : concat_leading(fixed, moving);
  }

  Var<T> scale(const Var<T>& fixed) const {
    return ::indiformer::scale(tanh(scale_net_(fixed)), static_cast<T>(kScaleCap));
  }

  static Var<T> column_sum(const Var<T>& m) {
    return matmul(Var<T>(Tensor<T>({1, m.dim(0)}, T{1})), m);
  }

  std::size_t feature_dim_ = 0;
  bool flip_ = false;
  Conditioner<T> scale_net_;
  Conditioner<T> shift_net_;
};

/// Composition of coupling layers with alternating halves.
template <typename T>
class CouplingStack {
 public:
  CouplingStack() = default;

  CouplingStack(const std::string& name, std::size_t feature_dim, std::size_t depth,
                Rng& rng) {
    if (depth < 2) {
      throw ConfigError("a coupling stack needs at least 2 layers so both halves move");
    }
    for (std::size_t i = 0; i < depth; ++i) {
      layers_.emplace_back(name + ".layer" + std::to_string(i), feature_dim, i % 2 == 1,
                           rng);
    }
  }

  std::vector<CouplingLayer<T>>& layers() { return layers_; }
  const std::vector<CouplingLayer<T>>& layers() const { return layers_; }
  std::size_t feature_dim() const { return layers_.front().feature_dim(); }

  CouplingResult<T> forward(const Var<T>& x) const {
    CouplingResult<T> r{x, Var<T>(Tensor<T>({1, x.dim(1)}))};
    for (const auto& layer : layers_) {
      auto step = layer.forward(r.output);
      r.output = step.output;
      r.log_det = add(r.log_det, step.log_det);
    }
    return r;
  }

  /// Undoes forward; log_det is that of the inverse map.
  CouplingResult<T> inverse(const Var<T>& y) const {
    CouplingResult<T> r{y, Var<T>(Tensor<T>({1, y.dim(1)}))};
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      auto step = it->inverse(r.output);
      r.output = step.output;
      r.log_det = add(r.log_det, step.log_det);
    }
    return r;
  }

  /// Per-column log|det| of the forward map at x.
  Tensor<T> log_det_jacobian(const Tensor<T>& x) const {
    NoGradGuard guard;
    return forward(Var<T>(x)).log_det.value();
  }

  /// Mean over columns of -log p(x) where z = inverse(x) has a standard
  /// normal prior: -[log N(z; 0, I) + log|det dz/dx|].
  Var<T> negative_log_likelihood(const Var<T>& x) const {
    auto r = inverse(x);
    const auto n = static_cast<T>(feature_dim());
    const T log_norm = n / 2 * std::log(2 * std::numbers::pi_v<T>);
    Var<T> half_sq = ::indiformer::scale(sum(mul(r.output, r.output)), T{0.5});
    Var<T> total = sub(half_sq, sum(r.log_det));
    const auto cols = static_cast<T>(x.dim(1));
    Var<T> per_column = ::indiformer::scale(total, T{1} / cols);
    return add(per_column, Var<T>(Tensor<T>::scalar(log_norm)));
  }

  /// Draws columns x = forward(z) with z ~ N(0, I).
  Tensor<T> sample(std::size_t count, Rng& rng) const {
    NoGradGuard guard;
    return forward(Var<T>(normal_tensor<T>({feature_dim(), count}, 1.0, rng))).output.value();
  }

  void collect(ParameterList<T>& out) {
    for (auto& layer : layers_) layer.collect(out);
  }

 private:
  std::vector<CouplingLayer<T>> layers_;
};

}  // namespace indiformer
