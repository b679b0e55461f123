#pragma once

// Differentiable tensor operations. Each op computes its value eagerly and
// records a backward closure that accumulates into the gradients of its
// inputs. Dense products go through Eigen maps over the row-major storage.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "indiformer/autograd.hpp"
#include "indiformer/tensor.hpp"

namespace indiformer {

using Rng = std::mt19937_64;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}
template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " + shape_string(s));
  }
}

template <typename T, typename F, typename G>
Var<T> unary(const char* name, const Var<T>& x, F f, G dfdx_from_xy) {
  Tensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return Var<T>::result(name, std::move(y), {x}, [dfdx_from_xy](Node<T>& n) {
    auto& gx = n.input_grad(0);
    const auto& xv = n.input_value(0);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += n.grad[i] * dfdx_from_xy(xv[i], n.value[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "add");
  Tensor<T> y = a.value();
  y += b.value();
  return Var<T>::result("add", std::move(y), {a, b}, [](Node<T>& n) {
    if (n.wants(0)) n.input_grad(0) += n.grad;
    if (n.wants(1)) n.input_grad(1) += n.grad;
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "sub");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return Var<T>::result("sub", std::move(y), {a, b}, [](Node<T>& n) {
    if (n.wants(0)) n.input_grad(0) += n.grad;
    if (n.wants(1)) {
      auto& g = n.input_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return Var<T>::result("mul", std::move(y), {a, b}, [](Node<T>& n) {
    const auto& av = n.input_value(0);
    const auto& bv = n.input_value(1);
    if (n.wants(0)) {
      auto& g = n.input_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (n.wants(1)) {
      auto& g = n.input_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "div");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] /= b.value()[i];
  return Var<T>::result("div", std::move(y), {a, b}, [](Node<T>& n) {
    const auto& bv = n.input_value(1);
    if (n.wants(0)) {
      auto& g = n.input_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / bv[i];
    }
    if (n.wants(1)) {
      auto& g = n.input_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] -= n.grad[i] * n.value[i] / bv[i];
      }
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> y = x.value();
  y *= factor;
  return Var<T>::result("scale", std::move(y), {x}, [factor](Node<T>& n) {
    auto& g = n.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * factor;
  });
}

/// s (one element) times every element of x.
template <typename T>
Var<T> scale_by(const Var<T>& s, const Var<T>& x) {
  if (s.value().size() != 1) {
    throw DimensionError("scale_by: factor must hold one value, got " +
                         shape_string(s.shape()));
  }
  const T f = s.value()[0];
  Tensor<T> y = x.value();
  y *= f;
  return Var<T>::result("scale_by", std::move(y), {s, x}, [](Node<T>& n) {
    const T f = n.input_value(0)[0];
    const auto& xv = n.input_value(1);
    if (n.wants(0)) {
      T acc = 0;
      for (std::size_t i = 0; i < xv.size(); ++i) acc += n.grad[i] * xv[i];
      n.input_grad(0)[0] += acc;
    }
    if (n.wants(1)) {
      auto& g = n.input_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * f;
    }
  });
}

template <typename T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "maximum");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::max(y[i], b.value()[i]);
  return Var<T>::result("maximum", std::move(y), {a, b}, [](Node<T>& n) {
    const auto& av = n.input_value(0);
    const auto& bv = n.input_value(1);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const bool first = av[i] >= bv[i];
      if (first && n.wants(0)) n.input_grad(0)[i] += n.grad[i];
      if (!first && n.wants(1)) n.input_grad(1)[i] += n.grad[i];
    }
  });
}

/// Clamps to [lo, hi]; gradient is zero where clamping is active.
template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return detail::unary<T>(
      "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T{1} : T{0}; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > 0 ? v : T{0}; },
      [](T v, T) { return v > 0 ? T{1} : T{0}; });
}

template <typename T>
T logistic(T v) {
  if (v >= 0) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return logistic(v); },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); },
      [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return detail::unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return detail::unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  return Var<T>::result("sum", Tensor<T>::scalar(acc), {x}, [](Node<T>& n) {
    auto& g = n.input_grad(0);
    const T s = n.grad[0];
    for (auto& v : g.values()) v += s;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

/// Inner product of two equally shaped tensors, as a one-element tensor.
template <typename T>
Var<T> dot(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "dot");
  T acc = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    acc += a.value()[i] * b.value()[i];
  }
  return Var<T>::result("dot", Tensor<T>::scalar(acc), {a, b}, [](Node<T>& n) {
    const T s = n.grad[0];
    if (n.wants(0)) {
      auto& g = n.input_grad(0);
      const auto& bv = n.input_value(1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * bv[i];
    }
    if (n.wants(1)) {
      auto& g = n.input_grad(1);
      const auto& av = n.input_value(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * av[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    throw DimensionError("matmul: cannot multiply " + shape_string(as) + " by " +
                         shape_string(bs));
  }
  const std::size_t m = as[0], k = as[1], p = bs[1];
  Tensor<T> y({m, p});
  detail::as_matrix(y, m, p).noalias() =
      detail::as_matrix(a.value(), m, k) * detail::as_matrix(b.value(), k, p);
  return Var<T>::result("matmul", std::move(y), {a, b}, [m, k, p](Node<T>& n) {
    const auto dy = detail::as_matrix(std::as_const(n.grad), m, p);
    if (n.wants(0)) {
      detail::as_matrix(n.input_grad(0), m, k).noalias() +=
          dy * detail::as_matrix(n.input_value(1), k, p).transpose();
    }
    if (n.wants(1)) {
      detail::as_matrix(n.input_grad(1), k, p).noalias() +=
          detail::as_matrix(n.input_value(0), m, k).transpose() * dy;
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  detail::require_rank(x.shape(), 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<T> y({c, r});
  detail::as_matrix(y, c, r) = detail::as_matrix(x.value(), r, c).transpose();
  return Var<T>::result("transpose", std::move(y), {x}, [r, c](Node<T>& n) {
    detail::as_matrix(n.input_grad(0), r, c) +=
        detail::as_matrix(std::as_const(n.grad), c, r).transpose();
  });
}

/// x [d x n] plus bias [d] broadcast along columns.
template <typename T>
Var<T> add_row_bias(const Var<T>& x, const Var<T>& bias) {
  detail::require_rank(x.shape(), 2, "add_row_bias");
  const std::size_t d = x.dim(0), cols = x.dim(1);
  if (bias.value().size() != d) {
    throw DimensionError("add_row_bias: bias " + shape_string(bias.shape()) +
                         " does not match rows of " + shape_string(x.shape()));
  }
  Tensor<T> y = x.value();
  for (std::size_t i = 0; i < d; ++i) {
    const T b = bias.value()[i];
    for (std::size_t j = 0; j < cols; ++j) y[i * cols + j] += b;
  }
  return Var<T>::result("add_row_bias", std::move(y), {x, bias},
                        [d, cols](Node<T>& n) {
                          if (n.wants(0)) n.input_grad(0) += n.grad;
                          if (n.wants(1)) {
                            auto& gb = n.input_grad(1);
                            for (std::size_t i = 0; i < d; ++i) {
                              T acc = 0;
                              for (std::size_t j = 0; j < cols; ++j) {
                                acc += n.grad[i * cols + j];
                              }
                              gb[i] += acc;
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  return Var<T>::result("reshape", std::move(y), {x}, [](Node<T>& n) {
    auto& g = n.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

/// Rows [begin, end) of the leading axis.
template <typename T>
Var<T> slice_leading(const Var<T>& x, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (begin >= end || end > s[0]) {
    throw DimensionError("slice_leading: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for " + shape_string(s));
  }
  const std::size_t inner = x.value().size() / s[0];
  Shape out_shape = s;
  out_shape[0] = end - begin;
  Buffer<T> vals(x.value().storage().begin() + begin * inner,
                 x.value().storage().begin() + end * inner);
  return Var<T>::result("slice_leading", Tensor<T>(out_shape, std::move(vals)),
                        {x}, [begin, inner](Node<T>& n) {
                          auto& g = n.input_grad(0);
                          const std::size_t off = begin * inner;
                          for (std::size_t i = 0; i < n.grad.size(); ++i) {
                            g[off + i] += n.grad[i];
                          }
                        });
}

/// Concatenation along the leading axis; trailing extents must agree.
template <typename T>
Var<T> concat_leading(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size() || !std::equal(as.begin() + 1, as.end(), bs.begin() + 1)) {
    throw DimensionError("concat_leading: incompatible " + shape_string(as) +
                         " and " + shape_string(bs));
  }
  Shape out_shape = as;
  out_shape[0] += bs[0];
  Buffer<T> vals = a.value().storage();
  vals.insert(vals.end(), b.value().storage().begin(), b.value().storage().end());
  const std::size_t na = a.value().size();
  return Var<T>::result("concat_leading", Tensor<T>(out_shape, std::move(vals)),
                        {a, b}, [na](Node<T>& n) {
                          if (n.wants(0)) {
                            auto& g = n.input_grad(0);
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                          }
                          if (n.wants(1)) {
                            auto& g = n.input_grad(1);
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              g[i] += n.grad[na + i];
                            }
                          }
                        });
}

/// Columns [begin, end) of a rank-2 tensor.
template <typename T>
Var<T> slice_columns(const Var<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x.shape(), 2, "slice_columns");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (begin >= end || end > cols) {
    throw DimensionError("slice_columns: range invalid for " + shape_string(x.shape()));
  }
  const std::size_t w = end - begin;
  Tensor<T> y({rows, w});
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(x.value().data() + i * cols + begin, w, y.data() + i * w);
  }
  return Var<T>::result("slice_columns", std::move(y), {x},
                        [rows, cols, begin, w](Node<T>& n) {
                          auto& g = n.input_grad(0);
                          for (std::size_t i = 0; i < rows; ++i) {
                            for (std::size_t j = 0; j < w; ++j) {
                              g[i * cols + begin + j] += n.grad[i * w + j];
                            }
                          }
                        });
}

/// Appends `extra` zero columns to a rank-2 tensor.
template <typename T>
Var<T> pad_columns(const Var<T>& x, std::size_t extra) {
  detail::require_rank(x.shape(), 2, "pad_columns");
  if (extra == 0) return x;
  const std::size_t rows = x.dim(0), cols = x.dim(1), w = cols + extra;
  Tensor<T> y({rows, w});
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(x.value().data() + i * cols, cols, y.data() + i * w);
  }
  return Var<T>::result("pad_columns", std::move(y), {x}, [rows, cols, w](Node<T>& n) {
    auto& g = n.input_grad(0);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += n.grad[i * w + j];
    }
  });
}

/// [a x b x c] -> [a x c x b].
template <typename T>
Var<T> swap_last_axes(const Var<T>& x) {
  detail::require_rank(x.shape(), 3, "swap_last_axes");
  const std::size_t a = x.dim(0), b = x.dim(1), c = x.dim(2);
  Tensor<T> y({a, c, b});
  for (std::size_t i = 0; i < a; ++i) {
    detail::as_matrix(y, a * c, b).middleRows(i * c, c) =
        detail::as_matrix(x.value(), a * b, c).middleRows(i * b, b).transpose();
  }
  return Var<T>::result("swap_last_axes", std::move(y), {x}, [a, b, c](Node<T>& n) {
    auto g = detail::as_matrix(n.input_grad(0), a * b, c);
    const auto dy = detail::as_matrix(std::as_const(n.grad), a * c, b);
    for (std::size_t i = 0; i < a; ++i) {
      g.middleRows(i * b, b) += dy.middleRows(i * c, c).transpose();
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax

/// Max-shifted softmax along `axis`.
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for " + shape_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Tensor<T> y(s);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        y[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) y[base + j * inner] /= z;
    }
  }
  return Var<T>::result("softmax", std::move(y), {x},
                        [outer, inner, len](Node<T>& n) {
                          auto& g = n.input_grad(0);
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t in = 0; in < inner; ++in) {
                              const std::size_t base = o * len * inner + in;
                              T dotp = 0;
                              for (std::size_t j = 0; j < len; ++j) {
                                const std::size_t idx = base + j * inner;
                                dotp += n.grad[idx] * n.value[idx];
                              }
                              for (std::size_t j = 0; j < len; ++j) {
                                const std::size_t idx = base + j * inner;
                                g[idx] += n.value[idx] * (n.grad[idx] - dotp);
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolutions

enum class Padding { none, causal_left };

/// Output length of a 1-D convolution on one sequence.
inline std::size_t conv1d_output_length(std::size_t length, std::size_t width,
                                        std::size_t stride, Padding padding) {
  const std::size_t padded = length + (padding == Padding::causal_left ? width - 1 : 0);
  if (width > padded) {
    throw DimensionError("conv1d: kernel width " + std::to_string(width) +
                         " exceeds padded length " + std::to_string(padded));
  }
  return (padded - width) / stride + 1;
}

/// 1-D convolution (cross-correlation, no bias).
///
/// input [c_in x B*T] holds B independent sequences of length `seq_len` laid
/// side by side (seq_len 0 means one sequence spanning every column); kernels
/// are [c_out x c_in x width]. The window never crosses a sequence boundary.
/// Returns [c_out x B*T_out].
template <typename T>
Var<T> conv1d(const Var<T>& input, const Var<T>& kernels, std::size_t stride,
              Padding padding, std::size_t seq_len = 0) {
  detail::require_rank(input.shape(), 2, "conv1d input");
  detail::require_rank(kernels.shape(), 3, "conv1d kernels");
  const std::size_t c_in = input.dim(0), total = input.dim(1);
  const std::size_t c_out = kernels.dim(0), width = kernels.dim(2);
  if (kernels.dim(1) != c_in) {
    throw DimensionError("conv1d: kernels " + shape_string(kernels.shape()) +
                         " do not match input " + shape_string(input.shape()));
  }
  if (stride == 0) throw DimensionError("conv1d: stride must be positive");
  const std::size_t len = seq_len == 0 ? total : seq_len;
  if (total % len != 0) {
    throw DimensionError("conv1d: " + std::to_string(total) +
                         " columns are not a whole number of sequences of " +
                         std::to_string(len));
  }
  const std::size_t batch = total / len;
  const std::size_t out_len = conv1d_output_length(len, width, stride, padding);
  const std::size_t left = padding == Padding::causal_left ? width - 1 : 0;
  const std::size_t rows = c_in * width, cols = batch * out_len;

  // im2col: cols[(c*width + w)][b*out_len + t] = x[c][b*len + t*stride + w - left]
  Tensor<T> patches({rows, cols});
  const auto& xv = input.value();
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t w = 0; w < width; ++w) {
      T* dst = patches.data() + (c * width + w) * cols;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* src = xv.data() + c * total + b * len;
        for (std::size_t t = 0; t < out_len; ++t) {
          const std::size_t pos = t * stride + w;
          dst[b * out_len + t] = pos < left ? T{0} : src[pos - left];
        }
      }
    }
  }
  Tensor<T> y({c_out, cols});
  detail::as_matrix(y, c_out, cols).noalias() =
      detail::as_matrix(kernels.value(), c_out, rows) *
      detail::as_matrix(patches, rows, cols);

  return Var<T>::result(
      "conv1d", std::move(y), {input, kernels},
      [=, patches = std::move(patches)](Node<T>& n) {
        const auto dy = detail::as_matrix(std::as_const(n.grad), c_out, cols);
        if (n.wants(1)) {
          detail::as_matrix(n.input_grad(1), c_out, rows).noalias() +=
              dy * detail::as_matrix(patches, rows, cols).transpose();
        }
        if (n.wants(0)) {
          Tensor<T> dpatch({rows, cols});
          detail::as_matrix(dpatch, rows, cols).noalias() =
              detail::as_matrix(n.input_value(1), c_out, rows).transpose() * dy;
          auto& gx = n.input_grad(0);
          for (std::size_t c = 0; c < c_in; ++c) {
            for (std::size_t w = 0; w < width; ++w) {
              const T* src = dpatch.data() + (c * width + w) * cols;
              for (std::size_t b = 0; b < batch; ++b) {
                T* dst = gx.data() + c * total + b * len;
                for (std::size_t t = 0; t < out_len; ++t) {
                  const std::size_t pos = t * stride + w;
                  if (pos >= left) dst[pos - left] += src[b * out_len + t];
                }
              }
            }
          }
        }
      });
}

/// Transposed 1-D convolution: input [c_in x L], kernels [c_in x c_out x width],
/// output [c_out x (L-1)*stride + width] with overlapping taps summed.
template <typename T>
Var<T> conv_transpose1d(const Var<T>& input, const Var<T>& kernels, std::size_t stride) {
  detail::require_rank(input.shape(), 2, "conv_transpose1d input");
  detail::require_rank(kernels.shape(), 3, "conv_transpose1d kernels");
  const std::size_t c_in = input.dim(0), len = input.dim(1);
  const std::size_t c_out = kernels.dim(1), width = kernels.dim(2);
  if (kernels.dim(0) != c_in) {
    throw DimensionError("conv_transpose1d: kernels " + shape_string(kernels.shape()) +
                         " do not match input " + shape_string(input.shape()));
  }
  if (stride == 0) throw DimensionError("conv_transpose1d: stride must be positive");
  const std::size_t rows = c_out * width;
  const std::size_t out_len = (len - 1) * stride + width;
  Tensor<T> frames({rows, len});
  detail::as_matrix(frames, rows, len).noalias() =
      detail::as_matrix(kernels.value(), c_in, rows).transpose() *
      detail::as_matrix(input.value(), c_in, len);
  Tensor<T> y({c_out, out_len});
  for (std::size_t co = 0; co < c_out; ++co) {
    for (std::size_t w = 0; w < width; ++w) {
      const T* src = frames.data() + (co * width + w) * len;
      T* dst = y.data() + co * out_len + w;
      for (std::size_t t = 0; t < len; ++t) dst[t * stride] += src[t];
    }
  }
  return Var<T>::result(
      "conv_transpose1d", std::move(y), {input, kernels}, [=](Node<T>& n) {
        Tensor<T> dframes({rows, len});
        for (std::size_t co = 0; co < c_out; ++co) {
          for (std::size_t w = 0; w < width; ++w) {
            T* dst = dframes.data() + (co * width + w) * len;
            const T* src = n.grad.data() + co * out_len + w;
            for (std::size_t t = 0; t < len; ++t) dst[t] = src[t * stride];
          }
        }
        const auto df = detail::as_matrix(std::as_const(dframes), rows, len);
        if (n.wants(0)) {
          detail::as_matrix(n.input_grad(0), c_in, len).noalias() +=
              detail::as_matrix(n.input_value(1), c_in, rows) * df;
        }
        if (n.wants(1)) {
          detail::as_matrix(n.input_grad(1), c_in, rows).noalias() +=
              detail::as_matrix(n.input_value(0), c_in, len) * df.transpose();
        }
      });
}

/// 2-D convolution with zero "same" padding and per-channel bias.
/// input [c_in x H x W], kernels [c_out x c_in x kh x kw] (odd kh, kw).
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernels, const Var<T>& bias) {
  detail::require_rank(input.shape(), 3, "conv2d input");
  detail::require_rank(kernels.shape(), 4, "conv2d kernels");
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t c_out = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != c_in || kh % 2 == 0 || kw % 2 == 0) {
    throw DimensionError("conv2d: kernels " + shape_string(kernels.shape()) +
                         " incompatible with input " + shape_string(input.shape()));
  }
  if (bias.value().size() != c_out) {
    throw DimensionError("conv2d: bias " + shape_string(bias.shape()) +
                         " does not match " + std::to_string(c_out) + " channels");
  }
  const std::size_t ph = kh / 2, pw = kw / 2;
  const std::size_t rows = c_in * kh * kw, cols = h * w;
  Tensor<T> patches({rows, cols});
  const auto& xv = input.value();
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t a = 0; a < kh; ++a) {
      for (std::size_t b = 0; b < kw; ++b) {
        T* dst = patches.data() + ((c * kh + a) * kw + b) * cols;
        for (std::size_t i = 0; i < h; ++i) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + a) -
                                    static_cast<std::ptrdiff_t>(ph);
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t j = 0; j < w; ++j) {
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + b) -
                                      static_cast<std::ptrdiff_t>(pw);
            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
            dst[i * w + j] = xv[(c * h + static_cast<std::size_t>(si)) * w +
                                static_cast<std::size_t>(sj)];
          }
        }
      }
    }
  }
  Tensor<T> y({c_out, h, w});
  auto ym = detail::as_matrix(y, c_out, cols);
  ym.noalias() = detail::as_matrix(kernels.value(), c_out, rows) *
                 detail::as_matrix(patches, rows, cols);
  for (std::size_t co = 0; co < c_out; ++co) ym.row(co).array() += bias.value()[co];

  return Var<T>::result(
      "conv2d", std::move(y), {input, kernels, bias},
      [=, patches = std::move(patches)](Node<T>& n) {
        const auto dy = detail::as_matrix(std::as_const(n.grad), c_out, cols);
        if (n.wants(1)) {
          detail::as_matrix(n.input_grad(1), c_out, rows).noalias() +=
              dy * detail::as_matrix(patches, rows, cols).transpose();
        }
        if (n.wants(2)) {
          auto& gb = n.input_grad(2);
          for (std::size_t co = 0; co < c_out; ++co) gb[co] += dy.row(co).sum();
        }
        if (n.wants(0)) {
          Tensor<T> dpatch({rows, cols});
          detail::as_matrix(dpatch, rows, cols).noalias() =
              detail::as_matrix(n.input_value(1), c_out, rows).transpose() * dy;
          auto& gx = n.input_grad(0);
          for (std::size_t c = 0; c < c_in; ++c) {
            for (std::size_t a = 0; a < kh; ++a) {
              for (std::size_t b = 0; b < kw; ++b) {
                const T* src = dpatch.data() + ((c * kh + a) * kw + b) * cols;
                for (std::size_t i = 0; i < h; ++i) {
                  const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + a) -
                                            static_cast<std::ptrdiff_t>(ph);
                  if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t j = 0; j < w; ++j) {
                    const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + b) -
                                              static_cast<std::ptrdiff_t>(pw);
                    if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
                    gx[(c * h + static_cast<std::size_t>(si)) * w +
                       static_cast<std::size_t>(sj)] += src[i * w + j];
                  }
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and regularization

/// Normalizes each column of x [d x n] over its d features, then applies the
/// per-feature gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                  T eps = T(1e-5)) {
  detail::require_rank(x.shape(), 2, "layer_norm");
  const std::size_t d = x.dim(0), cols = x.dim(1);
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) +
                         " entries");
  }
  const auto xm = detail::as_matrix(x.value(), d, cols);
  Eigen::Array<T, 1, Eigen::Dynamic> mu = xm.colwise().mean().array();
  Tensor<T> normalized({d, cols});
  auto nm = detail::as_matrix(normalized, d, cols);
  nm = xm.rowwise() - mu.matrix();
  Eigen::Array<T, 1, Eigen::Dynamic> inv_std =
      ((nm.array().square().colwise().sum() / static_cast<T>(d)) + eps).rsqrt();
  nm.array().rowwise() *= inv_std;
  Tensor<T> y({d, cols});
  auto ym = detail::as_matrix(y, d, cols);
  for (std::size_t i = 0; i < d; ++i) {
    ym.row(i) = nm.row(i) * gain.value()[i];
    ym.row(i).array() += bias.value()[i];
  }
  return Var<T>::result(
      "layer_norm", std::move(y), {x, gain, bias},
      [=, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node<T>& n) {
        const auto dy = detail::as_matrix(std::as_const(n.grad), d, cols);
        const auto xh = detail::as_matrix(normalized, d, cols);
        if (n.wants(1)) {
          auto& gg = n.input_grad(1);
          for (std::size_t i = 0; i < d; ++i) gg[i] += dy.row(i).dot(xh.row(i));
        }
        if (n.wants(2)) {
          auto& gb = n.input_grad(2);
          for (std::size_t i = 0; i < d; ++i) gb[i] += dy.row(i).sum();
        }
        if (n.wants(0)) {
          detail::RowMat<T> dxh(d, cols);
          for (std::size_t i = 0; i < d; ++i) dxh.row(i) = dy.row(i) * n.input_value(1)[i];
          const T inv_d = T{1} / static_cast<T>(d);
          Eigen::Array<T, 1, Eigen::Dynamic> m1 = dxh.colwise().sum().array() * inv_d;
          Eigen::Array<T, 1, Eigen::Dynamic> m2 =
              (dxh.array() * xh.array()).colwise().sum() * inv_d;
          auto gx = detail::as_matrix(n.input_grad(0), d, cols);
          gx.array() += ((dxh.array().rowwise() - m1) - xh.array().rowwise() * m2)
                            .rowwise() *
                        inv_std;
        }
      });
}

/// Inverted dropout. Identity when not training or rate is zero.
template <typename T>
Var<T> dropout(const Var<T>& x, double rate, Rng* rng, bool training) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be below 1");
  if (!rng) throw ConfigError("dropout in training mode needs an RNG");
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> mask(x.shape());
  for (auto& m : mask.values()) m = uni(*rng) < rate ? T{0} : keep_scale;
  Tensor<T> y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  return Var<T>::result("dropout", std::move(y), {x},
                        [mask = std::move(mask)](Node<T>& n) {
                          auto& g = n.input_grad(0);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            g[i] += n.grad[i] * mask[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Sequence helpers

/// Each sequence of `in_len` columns is stretched to `out_len` columns by
/// repeating every column `factor` times and truncating.
template <typename T>
Var<T> repeat_columns(const Var<T>& x, std::size_t factor, std::size_t in_len,
                      std::size_t out_len) {
  detail::require_rank(x.shape(), 2, "repeat_columns");
  const std::size_t rows = x.dim(0), total = x.dim(1);
  if (factor == 0 || in_len == 0 || total % in_len != 0 ||
      (out_len + factor - 1) / factor != in_len) {
    throw DimensionError("repeat_columns: " + std::to_string(in_len) +
                         " columns cannot be stretched by " + std::to_string(factor) +
                         " to " + std::to_string(out_len));
  }
  const std::size_t batch = total / in_len, out_total = batch * out_len;
  Tensor<T> y({rows, out_total});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < out_len; ++t) {
        y[r * out_total + b * out_len + t] = x.value()[r * total + b * in_len + t / factor];
      }
    }
  }
  return Var<T>::result("repeat_columns", std::move(y), {x}, [=](Node<T>& n) {
    auto& g = n.input_grad(0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < out_len; ++t) {
          g[r * total + b * in_len + t / factor] += n.grad[r * out_total + b * out_len + t];
        }
      }
    }
  });
}

/// Multi-head scaled dot-product attention over batched sequences.
///
/// q [d x B*tq], k and v [d x B*tk]; features are split into `heads` groups of
/// d/heads rows. For each sequence b and head h:
///   out_h = v_h * softmax(q_h^T k_h / sqrt(d/heads))^T
/// Returns [d x B*tq]. If `weights` is non-null it receives the attention
/// matrices, ordered (b, h), each [tq x tk] row-major.
template <typename T>
Var<T> multi_head_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                            std::size_t heads, std::size_t tq, std::size_t tk,
                            std::vector<Tensor<T>>* weights = nullptr) {
  detail::require_rank(q.shape(), 2, "attention q");
  detail::require_rank(k.shape(), 2, "attention k");
  detail::require_rank(v.shape(), 2, "attention v");
  const std::size_t d = q.dim(0);
  if (k.dim(0) != d || v.dim(0) != d || k.shape() != v.shape()) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: model dim " + std::to_string(d) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  if (tq == 0 || tk == 0 || q.dim(1) % tq != 0 || k.dim(1) % tk != 0 ||
      q.dim(1) / tq != k.dim(1) / tk) {
    throw DimensionError("attention: sequence lengths do not tile the inputs");
  }
  using Eigen::Index;
  using Eigen::OuterStride;
  const std::size_t batch = q.dim(1) / tq;
  const std::size_t dk = d / heads;
  const Index ldq = static_cast<Index>(batch * tq), ldk = static_cast<Index>(batch * tk);
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dk));

  std::vector<detail::RowMat<T>> probs(batch * heads);
  Tensor<T> y({d, batch * tq});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t qoff = h * dk * batch * tq + b * tq;
      const std::size_t koff = h * dk * batch * tk + b * tk;
      detail::ConstStridedMap<T> qh(q.value().data() + qoff, dk, tq, OuterStride<>(ldq));
      detail::ConstStridedMap<T> kh(k.value().data() + koff, dk, tk, OuterStride<>(ldk));
      detail::ConstStridedMap<T> vh(v.value().data() + koff, dk, tk, OuterStride<>(ldk));
      auto& p = probs[b * heads + h];
      p.noalias() = (qh.transpose() * kh) * inv_sqrt;
      for (Index r = 0; r < p.rows(); ++r) {
        auto row = p.row(r).array();
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
      }
      detail::StridedMap<T> out(y.data() + qoff, dk, tq, OuterStride<>(ldq));
      out.noalias() = vh * p.transpose();
      if (weights) {
        Tensor<T> w({tq, tk});
        detail::as_matrix(w, tq, tk) = p;
        weights->push_back(std::move(w));
      }
    }
  }
  return Var<T>::result(
      "attention", std::move(y), {q, k, v},
      [=, probs = std::move(probs)](Node<T>& n) {
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t qoff = h * dk * batch * tq + b * tq;
            const std::size_t koff = h * dk * batch * tk + b * tk;
            detail::ConstStridedMap<T> qh(n.input_value(0).data() + qoff, dk, tq,
                                          OuterStride<>(ldq));
            detail::ConstStridedMap<T> kh(n.input_value(1).data() + koff, dk, tk,
                                          OuterStride<>(ldk));
            detail::ConstStridedMap<T> vh(n.input_value(2).data() + koff, dk, tk,
                                          OuterStride<>(ldk));
            detail::ConstStridedMap<T> dout(n.grad.data() + qoff, dk, tq,
                                            OuterStride<>(ldq));
            const auto& p = probs[b * heads + h];
            if (n.wants(2)) {
              detail::StridedMap<T> gv(n.input_grad(2).data() + koff, dk, tk,
                                       OuterStride<>(ldk));
              gv.noalias() += dout * p;
            }
            if (n.wants(0) || n.wants(1)) {
              detail::RowMat<T> ds = dout.transpose() * vh;  // dP [tq x tk]
              for (Index r = 0; r < ds.rows(); ++r) {
                const T s = ds.row(r).dot(p.row(r));
                ds.row(r) = (p.row(r).array() * (ds.row(r).array() - s)).matrix();
              }
              ds *= inv_sqrt;
              if (n.wants(0)) {
                detail::StridedMap<T> gq(n.input_grad(0).data() + qoff, dk, tq,
                                         OuterStride<>(ldq));
                gq.noalias() += kh * ds.transpose();
              }
              if (n.wants(1)) {
                detail::StridedMap<T> gk(n.input_grad(1).data() + koff, dk, tk,
                                         OuterStride<>(ldk));
                gk.noalias() += qh * ds;
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Initialization

template <typename T>
Tensor<T> xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> uni(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(uni(rng));
  return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace indiformer
