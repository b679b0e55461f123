#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "indiformer/checkpoint.hpp"
#include "indiformer/ops.hpp"
#include "indiformer/separator.hpp"

namespace indiformer {

struct TrainConfig {
  std::size_t epochs = 30;
  double lr_initial = 1e-3;
  double lr_reduced = 1e-4;
  std::size_t patience = 5;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  double nll_weight = 0.0;
  double grad_clip = 5.0;
  std::size_t max_steps = 0;  // 0 = no cap
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double snr_cap = 100.0;
  bool record_wall_time = true;
  std::filesystem::path checkpoint_path;  // best-validation model, if set
  std::filesystem::path log_path;         // JSON lines, if set

  void validate() const {
    if (!(lr_reduced < lr_initial)) throw ConfigError("lr_reduced must be below lr_initial");
    if (patience < 1) throw ConfigError("patience must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (nll_weight < 0.0) throw ConfigError("nll_weight must be non-negative");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"train_loss", r.train_loss},
          {"val_loss", r.val_loss},
          {"lr", r.lr},
          {"seconds", r.seconds}};
}

/// One training mixture with its ground-truth sources.
template <typename T>
struct Example {
  std::vector<T> mixture;
  std::vector<std::vector<T>> sources;
};

// ---------------------------------------------------------------------------
// Loss

/// Differentiable SI-SNR in dB (projection onto the reference), clamped to
/// +-cap.
template <typename T>
Var<T> sisnr_db(const Var<T>& estimate, const Var<T>& reference, T cap = T(100),
                T eps = T(1e-12)) {
  Var<T> ref_energy = dot(reference, reference);
  if (ref_energy.value()[0] == T{0}) throw InvalidInput("SI-SNR: reference is all zeros");
  Var<T> alpha = div(dot(estimate, reference), ref_energy);
  Var<T> target = scale_by(alpha, reference);
  Var<T> residual = sub(estimate, target);
  Var<T> tt = dot(target, target);
  Var<T> ee = dot(residual, residual);
  Var<T> ratio = div(tt, maximum(ee, scale(tt, eps)));
  return clamp(scale(log(ratio), static_cast<T>(10.0 / std::numbers::ln10)), -cap, cap);
}

template <typename T>
struct PitResult {
  Var<T> loss;
  std::vector<std::size_t> permutation;  // estimate index used for reference i
};

/// -max over permutations of the mean SI-SNR between matched pairs.
template <typename T>
PitResult<T> pit_loss(const std::vector<Var<T>>& estimates,
                      const std::vector<Var<T>>& references, T cap = T(100)) {
  const std::size_t n = references.size();
  if (estimates.size() != n || n == 0) {
    throw InvalidInput("pit_loss: " + std::to_string(estimates.size()) + " estimates for " +
                       std::to_string(n) + " references");
  }
  std::vector<std::vector<Var<T>>> score(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t e = 0; e < n; ++e) {
      score[r].push_back(sisnr_db(estimates[e], references[r], cap));
    }
  }
  std::vector<std::size_t> perm(n), best;
  std::iota(perm.begin(), perm.end(), 0);
  T best_total = -std::numeric_limits<T>::infinity();
  do {
    T total = 0;
    for (std::size_t r = 0; r < n; ++r) total += score[r][perm[r]].value()[0];
    if (total > best_total) {
      best_total = total;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  Var<T> acc = score[0][best[0]];
  for (std::size_t r = 1; r < n; ++r) acc = add(acc, score[r][best[r]]);
  return {scale(acc, T{-1} / static_cast<T>(n)), best};
}

// ---------------------------------------------------------------------------
// Learning-rate schedule

/// lr_initial until the validation loss has failed to strictly improve on
/// its best for `patience` consecutive epochs; lr_reduced from then on.
inline double lr_schedule(const std::vector<double>& val_losses, const TrainConfig& cfg) {
  double best = std::numeric_limits<double>::infinity();
  std::size_t stagnant = 0;
  for (double loss : val_losses) {
    if (loss < best) {
      best = loss;
      stagnant = 0;
    } else if (++stagnant >= cfg.patience) {
      return cfg.lr_reduced;
    }
  }
  return cfg.lr_initial;
}

inline double lr_schedule(const TrainHistory& history, const TrainConfig& cfg) {
  std::vector<double> losses;
  for (const auto& e : history.epochs) losses.push_back(e.val_loss);
  return lr_schedule(losses, cfg);
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adaptive moment estimation with bias correction.
template <typename T>
class Adam {
 public:
  Adam(const ParameterList<T>& params, double beta1, double beta2, double eps)
      : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto* p : params_) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& w = params_[i]->tensor();
      const auto& g = params_[i]->gradient();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k];
        m[k] = static_cast<T>(beta1_ * m[k] + (1.0 - beta1_) * gk);
        v[k] = static_cast<T>(beta2_ * v[k] + (1.0 - beta2_) * gk * gk);
        const double mhat = m[k] / c1;
        const double vhat = v[k] / c2;
        w[k] = static_cast<T>(w[k] - lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  ParameterList<T> params_;
  double beta1_, beta2_, eps_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const ParameterList<T>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params) {
    for (T g : p->gradient().values()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (max_norm > 0.0 && norm > max_norm) {
    const auto factor = static_cast<T>(max_norm / norm);
    for (auto* p : params) p->gradient() *= factor;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Loop

namespace train_detail {

template <typename T>
Var<T> row(const std::vector<T>& samples) {
  return Var<T>(Tensor<T>({1, samples.size()}, samples));
}

template <typename T>
std::vector<Var<T>> rows(const std::vector<std::vector<T>>& signals) {
  std::vector<Var<T>> out;
  for (const auto& s : signals) out.push_back(row(s));
  return out;
}

}  // namespace train_detail

/// Training objective for one example: PIT loss plus the optional coupling
/// negative log-likelihood of the segmented encoder features.
template <typename T>
Var<T> example_loss(const SeparatorModel<T>& model, const Example<T>& ex, bool training,
                    Rng* rng, const TrainConfig& cfg) {
  Var<T> mixture = train_detail::row(ex.mixture);
  auto out = model.forward(mixture, training, rng);
  if (out.estimates.size() != ex.sources.size()) {
    throw InvalidInput("example has " + std::to_string(ex.sources.size()) +
                       " sources, model separates " + std::to_string(out.estimates.size()));
  }
  Var<T> loss =
      pit_loss(out.estimates, train_detail::rows(ex.sources), static_cast<T>(cfg.snr_cap)).loss;
  if (cfg.nll_weight > 0.0 && model.decoupler()) {
    const auto& mc = model.config();
    ChunkGeometry geo;
    Var<T> feats = model.encode(mixture).features;
    Var<T> chunks = segment(feats, mc.chunk_size, mc.hop_size, geo);
    Var<T> cols = reshape(chunks, {geo.features, geo.chunk_len * geo.num_chunks});
    loss = add(loss, scale(model.decoupler()->negative_log_likelihood(cols),
                           static_cast<T>(cfg.nll_weight)));
  }
  return loss;
}

/// Mean evaluation-mode loss over a set.
template <typename T>
double evaluate_loss(const SeparatorModel<T>& model, const std::vector<Example<T>>& data,
                     const TrainConfig& cfg) {
  NoGradGuard guard;
  double total = 0.0;
  for (const auto& ex : data) total += example_loss(model, ex, false, nullptr, cfg).value()[0];
  return total / static_cast<double>(data.size());
}

template <typename T>
std::vector<Tensor<T>> snapshot(SeparatorModel<T>& model) {
  std::vector<Tensor<T>> out;
  for (auto* p : model.parameters()) out.push_back(p->tensor());
  return out;
}

template <typename T>
void restore(SeparatorModel<T>& model, const std::vector<Tensor<T>>& values) {
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->tensor() = values[i];
}

/// Seeded mini-batch training with Adam, gradient clipping and the plateau
/// learning-rate schedule. On return the model holds the best-validation
/// weights. Deterministic for a given seed.
template <typename T>
TrainHistory train(SeparatorModel<T>& model, const std::vector<Example<T>>& train_set,
                   const std::vector<Example<T>>& val_set, const TrainConfig& cfg,
                   std::ostream* progress = nullptr) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) {
    throw InvalidInput("training needs non-empty training and validation sets");
  }
  Rng master(cfg.seed);
  Rng shuffle_rng(master());
  Rng dropout_rng(master());

  auto params = model.parameters();
  Adam<T> adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps);
  std::optional<std::ofstream> log;
  if (!cfg.log_path.empty()) {
    if (cfg.log_path.has_parent_path()) {
      std::filesystem::create_directories(cfg.log_path.parent_path());
    }
    log.emplace(cfg.log_path, std::ios::trunc);
    if (!*log) throw IoError("cannot open training log " + cfg.log_path.string());
  }

  TrainHistory history;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<Tensor<T>> best_weights = snapshot(model);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  bool out_of_steps = false;

  for (std::size_t epoch = 0; epoch < cfg.epochs && !out_of_steps; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = lr_schedule(history, cfg);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      for (auto* p : params) p->zero_grad();
      for (std::size_t i = b; i < end; ++i) {
        Var<T> loss = example_loss(model, train_set[order[i]], true, &dropout_rng, cfg);
        const double v = loss.value()[0];
        if (!std::isfinite(v)) {
          throw NumericError("non-finite training loss at epoch " + std::to_string(epoch + 1) +
                             ", step " + std::to_string(history.steps + 1));
        }
        epoch_loss += v;
        ++seen;
        scale(loss, static_cast<T>(1.0 / static_cast<double>(end - b))).backward();
      }
      clip_grad_norm(params, cfg.grad_clip);
      adam.step(lr);
      ++history.steps;
      if (cfg.max_steps && history.steps >= cfg.max_steps) {
        out_of_steps = true;
        break;
      }
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = epoch_loss / static_cast<double>(seen);
    rec.val_loss = evaluate_loss(model, val_set, cfg);
    rec.lr = lr;
    if (cfg.record_wall_time) {
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    history.epochs.push_back(rec);
    if (log) *log << to_json(rec).dump() << '\n' << std::flush;
    if (progress) *progress << to_json(rec).dump() << std::endl;

    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      best_weights = snapshot(model);
      if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
    }
  }
  restore(model, best_weights);
  return history;
}

}  // namespace indiformer
