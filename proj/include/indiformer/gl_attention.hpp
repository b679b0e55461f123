#pragma once

// GL-Transformer block: attention computed twice, once on a local view of the
// input (causal convolution, stride 1) and once on a sparse global view
// (width-1 convolution with stride s), then fused through a sigmoid gate.
// The fused attention is the first sublayer of a post-norm transformer layer
// whose second sublayer is a ReLU feed-forward network.
//
// Sequences are stored feature-major: X is [d x B*T], B sequences of length T
// side by side. Projections act as W * X.

#include <cstddef>
#include <string>

#include "indiformer/autograd.hpp"
#include "indiformer/ops.hpp"

namespace indiformer {

struct GLBlockConfig {
  std::size_t model_dim = 128;
  std::size_t n_head = 4;
  std::size_t local_kernel = 3;
  std::size_t global_stride = 2;
  std::size_t ff_multiplier = 4;
  double dropout = 0.1;

  void validate() const {
    if (model_dim == 0 || n_head == 0 || model_dim % n_head != 0) {
      throw ConfigError("model_dim " + std::to_string(model_dim) +
                        " must be divisible by n_head " + std::to_string(n_head));
    }
    if (local_kernel == 0) throw ConfigError("local_kernel must be at least 1");
    if (global_stride == 0) throw ConfigError("global_stride must be at least 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  }
};

template <typename T>
struct QKV {
  Var<T> q, k, v;
};

/// Per-branch weights: a convolution followed by the three projections.
template <typename T>
struct AttentionBranch {
  Parameter<T> conv, wq, wk, wv;

  AttentionBranch() = default;
  AttentionBranch(const std::string& name, std::size_t d, std::size_t width, Rng& rng)
      : conv(name + ".conv", xavier_uniform<T>({d, d, width}, d * width, d * width, rng)),
        wq(name + ".wq", xavier_uniform<T>({d, d}, d, d, rng)),
        wk(name + ".wk", xavier_uniform<T>({d, d}, d, d, rng)),
        wv(name + ".wv", xavier_uniform<T>({d, d}, d, d, rng)) {}

  QKV<T> project(const Var<T>& conv_out) const {
    return {matmul(wq.var(), conv_out), matmul(wk.var(), conv_out),
            matmul(wv.var(), conv_out)};
  }

  void collect(ParameterList<T>& out) { out.insert(out.end(), {&conv, &wq, &wk, &wv}); }
};

template <typename T>
class GLTransformerBlock {
 public:
  GLTransformerBlock() = default;

  GLTransformerBlock(const std::string& name, const GLBlockConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.model_dim, hidden = cfg.ff_multiplier * d;
    local_ = AttentionBranch<T>(name + ".local", d, cfg.local_kernel, rng);
    global_ = AttentionBranch<T>(name + ".global", d, 1, rng);
    fuse_w_ = Parameter<T>(name + ".fuse.w", xavier_uniform<T>({d, 2 * d}, 2 * d, d, rng));
    fuse_b_ = Parameter<T>(name + ".fuse.b", Tensor<T>({d}));
    ff_w1_ = Parameter<T>(name + ".ff.w1", xavier_uniform<T>({hidden, d}, d, hidden, rng));
    ff_b1_ = Parameter<T>(name + ".ff.b1", Tensor<T>({hidden}));
    ff_w2_ = Parameter<T>(name + ".ff.w2", xavier_uniform<T>({d, hidden}, hidden, d, rng));
    ff_b2_ = Parameter<T>(name + ".ff.b2", Tensor<T>({d}));
    norm1_g_ = Parameter<T>(name + ".norm1.g", Tensor<T>({d}, T{1}));
    norm1_b_ = Parameter<T>(name + ".norm1.b", Tensor<T>({d}));
    norm2_g_ = Parameter<T>(name + ".norm2.g", Tensor<T>({d}, T{1}));
    norm2_b_ = Parameter<T>(name + ".norm2.b", Tensor<T>({d}));
  }

  const GLBlockConfig& config() const { return cfg_; }
  AttentionBranch<T>& local_branch() { return local_; }
  AttentionBranch<T>& global_branch() { return global_; }
  Parameter<T>& fuse_weight() { return fuse_w_; }
  Parameter<T>& fuse_bias() { return fuse_b_; }

  std::size_t global_length(std::size_t seq_len) const {
    return (seq_len + cfg_.global_stride - 1) / cfg_.global_stride;
  }

  /// Causal convolution of width local_kernel, stride 1; length preserved.
  QKV<T> local_qkv(const Var<T>& x, std::size_t seq_len) const {
    check_input(x, seq_len);
    return local_.project(
        conv1d(x, local_.conv.var(), 1, Padding::causal_left, seq_len));
  }

  /// Width-1 convolution with stride global_stride; length ceil(T / stride).
  QKV<T> global_qkv(const Var<T>& x, std::size_t seq_len) const {
    check_input(x, seq_len);
    return global_.project(
        conv1d(x, global_.conv.var(), cfg_.global_stride, Padding::none, seq_len));
  }

  Var<T> scaled_attention(const QKV<T>& qkv, std::size_t seq_len) const {
    return multi_head_attention(qkv.q, qkv.k, qkv.v, cfg_.n_head, seq_len, seq_len);
  }

  /// sigmoid(W_f [A_local; upsample(A_global)] + b_f), per column.
  Var<T> fuse(const Var<T>& local_attn, const Var<T>& global_attn,
              std::size_t seq_len) const {
    const std::size_t global_len = global_length(seq_len);
    Var<T> up = repeat_columns(global_attn, cfg_.global_stride, global_len, seq_len);
    if (up.shape() != local_attn.shape()) {
      throw DimensionError("fuse: upsampled global attention " + shape_string(up.shape()) +
                           " does not match local " + shape_string(local_attn.shape()));
    }
    return sigmoid(
        add_row_bias(matmul(fuse_w_.var(), concat_leading(local_attn, up)), fuse_b_.var()));
  }

  /// Y1 = LN(X + drop(fuse(...))); Y = LN(Y1 + drop(FF(Y1))).
  Var<T> forward(const Var<T>& x, std::size_t seq_len, bool training, Rng* rng) const {
    Var<T> local_attn = scaled_attention(local_qkv(x, seq_len), seq_len);
    Var<T> global_attn = scaled_attention(global_qkv(x, seq_len), global_length(seq_len));
    Var<T> attn = fuse(local_attn, global_attn, seq_len);
    Var<T> y1 = layer_norm(add(x, dropout(attn, cfg_.dropout, rng, training)),
                           norm1_g_.var(), norm1_b_.var());
    Var<T> hidden = relu(add_row_bias(matmul(ff_w1_.var(), y1), ff_b1_.var()));
    Var<T> ff = add_row_bias(matmul(ff_w2_.var(), hidden), ff_b2_.var());
    return layer_norm(add(y1, dropout(ff, cfg_.dropout, rng, training)), norm2_g_.var(),
                      norm2_b_.var());
  }

  void collect(ParameterList<T>& out) {
    local_.collect(out);
    global_.collect(out);
    out.insert(out.end(), {&fuse_w_, &fuse_b_, &ff_w1_, &ff_b1_, &ff_w2_, &ff_b2_,
                           &norm1_g_, &norm1_b_, &norm2_g_, &norm2_b_});
  }

 private:
  void check_input(const Var<T>& x, std::size_t seq_len) const {
    if (x.shape().size() != 2 || x.dim(0) != cfg_.model_dim || seq_len == 0 ||
        x.dim(1) % seq_len != 0) {
      throw DimensionError("GL block of width " + std::to_string(cfg_.model_dim) +
                           " cannot take " + shape_string(x.shape()) +
                           " as sequences of length " + std::to_string(seq_len));
    }
  }

  GLBlockConfig cfg_;
  AttentionBranch<T> local_, global_;
  Parameter<T> fuse_w_, fuse_b_;
  Parameter<T> ff_w1_, ff_b1_, ff_w2_, ff_b2_;
  Parameter<T> norm1_g_, norm1_b_, norm2_g_, norm2_b_;
};

}  // namespace indiformer
