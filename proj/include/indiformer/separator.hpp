#pragma once

// End-to-end mask-based separator:
//
//   mixture -> encoder (strided conv + ReLU) -> E [F x L]
//   E -> segment into [F x k x s] chunks -> coupling forward
//     -> n_repeat x { intra-chunk GL block over k, inter-chunk GL block over s }
//     -> coupling inverse -> 3x3 conv mask head -> overlap-add per source
//     -> sigmoid masks M_i [F x L] -> decoder(M_i * E) trimmed to input length

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "indiformer/autograd.hpp"
#include "indiformer/chunking.hpp"
#include "indiformer/coupling.hpp"
#include "indiformer/gl_attention.hpp"
#include "indiformer/ops.hpp"

namespace indiformer {

struct EncoderConfig {
  std::size_t num_filters = 128;
  std::size_t kernel_len = 16;
  std::size_t stride = 8;
};

struct SeparatorConfig {
  std::size_t n_src = 2;
  std::size_t chunk_size = 100;
  std::size_t hop_size = 50;
  std::size_t n_repeat = 6;
  std::size_t n_head = 4;
  double dropout = 0.1;
  EncoderConfig encoder;
  std::size_t local_kernel = 3;
  std::size_t global_stride = 2;
  std::size_t coupling_depth = 2;
  std::size_t mask_kernel = 3;
  bool decoupling_enabled = true;

  void validate() const {
    if (n_src < 2) throw ConfigError("n_src must be at least 2");
    if (hop_size == 0 || chunk_size != 2 * hop_size) {
      throw ConfigError("chunk_size " + std::to_string(chunk_size) +
                        " must equal 2 * hop_size " + std::to_string(hop_size));
    }
    if (encoder.num_filters == 0 || encoder.kernel_len == 0 || encoder.stride == 0 ||
        encoder.stride > encoder.kernel_len) {
      throw ConfigError("encoder needs filters > 0 and 0 < stride <= kernel_len");
    }
    if (decoupling_enabled && encoder.num_filters % 2 != 0) {
      throw ConfigError("decoupling needs an even number of encoder filters");
    }
    if (mask_kernel % 2 == 0) throw ConfigError("mask_kernel must be odd");
    block_config().validate();
  }

  GLBlockConfig block_config() const {
    GLBlockConfig b;
    b.model_dim = encoder.num_filters;
    b.n_head = n_head;
    b.local_kernel = local_kernel;
    b.global_stride = global_stride;
    b.dropout = dropout;
    return b;
  }
};

/// Encoder output plus what decode needs to restore the input length.
template <typename T>
struct Encoded {
  Var<T> features;  // [F x L_frames]
  std::size_t input_len = 0;
  std::size_t padding = 0;
};

template <typename T>
struct SeparationOutput {
  std::vector<Var<T>> estimates;  // n_src x [1 x input_len]
  std::vector<Var<T>> masks;      // n_src x [F x L_frames]
};

template <typename T>
class SeparatorModel {
 public:
  SeparatorModel() = default;

  /// Every component draws its initial weights from its own generator, seeded
  /// in a fixed order from `seed`, so toggling decoupling leaves all other
  /// weights untouched.
  SeparatorModel(const SeparatorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng master(seed);
    Rng enc_rng(master()), dec_rng(master()), coupling_rng(master()),
        blocks_rng(master()), mask_rng(master());
    const std::size_t f = cfg.encoder.num_filters, w = cfg.encoder.kernel_len;
    encoder_ = Parameter<T>("encoder.kernel", xavier_uniform<T>({f, 1, w}, w, f, enc_rng));
    decoder_ = Parameter<T>("decoder.kernel", xavier_uniform<T>({f, 1, w}, f, w, dec_rng));
    if (cfg.decoupling_enabled) {
      decoupler_ = CouplingStack<T>("decoupler", f, cfg.coupling_depth, coupling_rng);
    }
    const GLBlockConfig bc = cfg.block_config();
    for (std::size_t r = 0; r < cfg.n_repeat; ++r) {
      const std::string prefix = "dual_path." + std::to_string(r);
      intra_.emplace_back(prefix + ".intra", bc, blocks_rng);
      inter_.emplace_back(prefix + ".inter", bc, blocks_rng);
    }
    const std::size_t mk = cfg.mask_kernel;
    mask_w_ = Parameter<T>(
        "mask_head.w",
        xavier_uniform<T>({cfg.n_src * f, f, mk, mk}, f * mk * mk, cfg.n_src * f * mk * mk,
                          mask_rng));
    mask_b_ = Parameter<T>("mask_head.b", Tensor<T>({cfg.n_src * f}));
    require_unique_names(parameters());
  }

  const SeparatorConfig& config() const { return cfg_; }
  bool decoupling_enabled() const { return decoupler_.has_value(); }
  CouplingStack<T>* decoupler() { return decoupler_ ? &*decoupler_ : nullptr; }
  const CouplingStack<T>* decoupler() const { return decoupler_ ? &*decoupler_ : nullptr; }

  ParameterList<T> parameters() {
    ParameterList<T> out{&encoder_};
    if (decoupler_) decoupler_->collect(out);
    for (std::size_t r = 0; r < intra_.size(); ++r) {
      intra_[r].collect(out);
      inter_[r].collect(out);
    }
    out.insert(out.end(), {&mask_w_, &mask_b_, &decoder_});
    return out;
  }

  std::size_t count_parameters() { return count_scalars(parameters()); }

  /// Number of encoder frames for an input of `len` samples.
  std::size_t frames_for(std::size_t len) const {
    const auto& e = cfg_.encoder;
    if (len < e.kernel_len) {
      throw InvalidInput("input of " + std::to_string(len) +
                         " samples is shorter than the encoder kernel (" +
                         std::to_string(e.kernel_len) + ")");
    }
    return (len - e.kernel_len + e.stride - 1) / e.stride + 1;
  }

  /// signal [1 x len] -> ReLU(conv) [F x L_frames], right-padding the input so
  /// the last window is complete.
  Encoded<T> encode(const Var<T>& signal) const {
    if (signal.shape().size() != 2 || signal.dim(0) != 1) {
      throw DimensionError("encode expects [1 x len], got " + shape_string(signal.shape()));
    }
    const std::size_t len = signal.dim(1);
    const std::size_t frames = frames_for(len);
    const std::size_t padded = (frames - 1) * cfg_.encoder.stride + cfg_.encoder.kernel_len;
    Encoded<T> out;
    out.input_len = len;
    out.padding = padded - len;
    out.features = relu(conv1d(pad_columns(signal, out.padding), encoder_.var(),
                               cfg_.encoder.stride, Padding::none));
    return out;
  }

  /// Transposed convolution back to samples, trimmed to `target_len`.
  Var<T> decode(const Var<T>& features, std::size_t target_len) const {
    if (features.shape().size() != 2 || features.dim(0) != cfg_.encoder.num_filters) {
      throw DimensionError("decode expects [" + std::to_string(cfg_.encoder.num_filters) +
                           " x L], got " + shape_string(features.shape()));
    }
    Var<T> full = conv_transpose1d(features, decoder_.var(), cfg_.encoder.stride);
    if (target_len == 0 || target_len > full.dim(1)) {
      throw DimensionError("decode cannot produce " + std::to_string(target_len) +
                           " samples from " + std::to_string(features.dim(1)) + " frames");
    }
    return slice_columns(full, 0, target_len);
  }

  /// Full separation graph for one mixture [1 x len].
  SeparationOutput<T> forward(const Var<T>& mixture, bool training = false,
                              Rng* rng = nullptr) const {
    const std::size_t f = cfg_.encoder.num_filters;
    Encoded<T> enc = stage("encoder", [&] { return encode(mixture); });

    ChunkGeometry geo;
    Var<T> chunks = stage("segmentation", [&] {
      return segment(enc.features, cfg_.chunk_size, cfg_.hop_size, geo);
    });
    const std::size_t k = geo.chunk_len, s = geo.num_chunks;

    if (decoupler_) {
      chunks = stage("decoupling", [&] {
        return reshape(decoupler_->forward(reshape(chunks, {f, k * s})).output, {f, k, s});
      });
    }
    for (std::size_t r = 0; r < intra_.size(); ++r) {
      chunks = stage("intra-chunk block " + std::to_string(r), [&] {
        Var<T> by_chunk = reshape(swap_last_axes(chunks), {f, s * k});
        Var<T> y = intra_[r].forward(by_chunk, k, training, rng);
        return swap_last_axes(reshape(y, {f, s, k}));
      });
      chunks = stage("inter-chunk block " + std::to_string(r), [&] {
        Var<T> y = inter_[r].forward(reshape(chunks, {f, k * s}), s, training, rng);
        return reshape(y, {f, k, s});
      });
    }
    if (decoupler_) {
      chunks = stage("recoupling", [&] {
        return reshape(decoupler_->inverse(reshape(chunks, {f, k * s})).output, {f, k, s});
      });
    }

    SeparationOutput<T> out;
    Var<T> mask_logits =
        stage("mask head", [&] { return conv2d(chunks, mask_w_.var(), mask_b_.var()); });
    for (std::size_t i = 0; i < cfg_.n_src; ++i) {
      Var<T> mask = stage("mask overlap-add", [&] {
        return sigmoid(overlap_add(slice_leading(mask_logits, i * f, (i + 1) * f), geo));
      });
      out.estimates.push_back(stage("decoder", [&] {
        return decode(mul(mask, enc.features), enc.input_len);
      }));
      out.masks.push_back(std::move(mask));
    }
    return out;
  }

  /// Evaluation-mode separation of raw samples.
  std::vector<std::vector<T>> separate(const std::vector<T>& mixture) const {
    NoGradGuard guard;
    if (mixture.empty()) throw InvalidInput("cannot separate an empty mixture");
    auto result = forward(Var<T>(Tensor<T>({1, mixture.size()}, mixture)));
    std::vector<std::vector<T>> sources;
    for (auto& e : result.estimates) sources.push_back(e.value().to_vector());
    return sources;
  }

 private:
  template <typename F>
  static auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
    try {
      return fn();
    } catch (const NumericError& e) {
      throw NumericError("separator stage '" + name + "': " + e.what());
    }
  }

  SeparatorConfig cfg_;
  Parameter<T> encoder_;
  std::optional<CouplingStack<T>> decoupler_;
  std::vector<GLTransformerBlock<T>> intra_;
  std::vector<GLTransformerBlock<T>> inter_;
  Parameter<T> mask_w_, mask_b_;
  Parameter<T> decoder_;
};

}  // namespace indiformer
