#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "indiformer/metrics.hpp"
#include "indiformer/training.hpp"
#include "support.hpp"

using namespace indiformer;
using Vd = Var<double>;

namespace {

Vd row(const std::vector<double>& x) { return Vd(Tensor<double>({1, x.size()}, x)); }

SeparatorConfig tiny_config() {
  SeparatorConfig c;
  c.encoder = {8, 4, 2};
  c.chunk_size = 8;
  c.hop_size = 4;
  c.n_repeat = 1;
  c.n_head = 2;
  return c;
}

std::vector<Example<double>> tone_examples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> phase(0.0, 6.28);
  std::vector<Example<double>> out;
  for (std::size_t i = 0; i < n; ++i) {
    Example<double> ex;
    const double pa = phase(rng), pb = phase(rng);
    std::vector<double> a(96), b(96);
    for (std::size_t t = 0; t < a.size(); ++t) {
      a[t] = 0.5 * std::sin(0.3 * static_cast<double>(t) + pa);
      b[t] = 0.4 * std::sin(2.1 * static_cast<double>(t) + pb);
    }
    ex.mixture.resize(a.size());
    for (std::size_t t = 0; t < a.size(); ++t) ex.mixture[t] = a[t] + b[t];
    ex.sources = {a, b};
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

TEST(SisnrDb, MatchesMetricImplementation) {
  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    auto e = testing_support::random_signal(50, rng), r = testing_support::random_signal(50, rng);
    for (std::size_t i = 0; i < e.size(); ++i) e[i] += 0.5 * r[i];
    EXPECT_NEAR(sisnr_db(row(e), row(r)).value()[0], metrics::sisnr(e, r), 1e-9);
  }
  EXPECT_THROW(sisnr_db(row({1, 2}), row({0, 0})), InvalidInput);
}

TEST(SisnrDb, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  const auto r = testing_support::random_tensor({1, 20}, rng);
  const double err = testing_support::check_op(
      {testing_support::random_tensor({1, 20}, rng)},
      [&](const std::vector<Vd>& in) { return sisnr_db(in[0], Vd(r)); });
  EXPECT_LE(err, 1e-7);
}

TEST(PitLoss, IdenticalAndSwapped) {
  Rng rng(3);
  const auto a = testing_support::random_signal(40, rng), b = testing_support::random_signal(40, rng);
  const auto same = pit_loss<double>({row(a), row(b)}, {row(a), row(b)});
  EXPECT_EQ(same.loss.value()[0], -100.0);
  EXPECT_EQ(same.permutation, (std::vector<std::size_t>{0, 1}));
  const auto swapped = pit_loss<double>({row(b), row(a)}, {row(a), row(b)});
  EXPECT_EQ(swapped.loss.value()[0], same.loss.value()[0]);
  EXPECT_EQ(swapped.permutation, (std::vector<std::size_t>{1, 0}));
  EXPECT_THROW(pit_loss<double>({row(a)}, {row(a), row(b)}), InvalidInput);
}

TEST(PitLoss, BruteForceOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = testing_support::uniform_size(rng, 2, 3);
    std::vector<std::vector<double>> est, ref;
    std::vector<Vd> ev, rv;
    for (std::size_t i = 0; i < n; ++i) {
      ref.push_back(testing_support::random_signal(30, rng));
      est.push_back(testing_support::random_signal(30, rng));
      ev.push_back(row(est.back()));
      rv.push_back(row(ref.back()));
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = -1e300;
    do {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += metrics::sisnr(est[perm[i]], ref[i]);
      best = std::max(best, s / static_cast<double>(n));
    } while (std::next_permutation(perm.begin(), perm.end()));
    EXPECT_NEAR(pit_loss(ev, rv).loss.value()[0], -best, 1e-9);

    // permuting estimates and references together leaves the loss unchanged
    std::vector<Vd> ev2(ev.rbegin(), ev.rend()), rv2(rv.rbegin(), rv.rend());
    EXPECT_NEAR(pit_loss(ev2, rv2).loss.value()[0], pit_loss(ev, rv).loss.value()[0], 1e-12);
  }
}

TEST(LrSchedule, Traces) {
  TrainConfig cfg;
  EXPECT_EQ(lr_schedule(std::vector<double>{}, cfg), 1e-3);
  EXPECT_EQ(lr_schedule({5, 4, 3, 2, 1}, cfg), 1e-3);
  EXPECT_EQ(lr_schedule({5, 5, 5, 5, 5}, cfg), 1e-3);
  EXPECT_EQ(lr_schedule({5, 5, 5, 5, 5, 5}, cfg), 1e-4);
  EXPECT_EQ(lr_schedule({5, 5, 5, 5, 5, 5, 1, 0.5}, cfg), 1e-4);
  EXPECT_EQ(lr_schedule({5, 4, 4, 4, 4, 4}, cfg), 1e-3);
  EXPECT_EQ(lr_schedule({5, 4, 4, 4, 4, 4, 4}, cfg), 1e-4);
}

TEST(LrSchedule, OneWayAfterPatience) {
  Rng rng(5);
  TrainConfig cfg;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    cfg.patience = testing_support::uniform_size(rng, 1, 6);
    std::vector<double> losses;
    bool reduced = false;
    std::size_t longest_stagnation = 0, run = 0;
    double best = 1e300;
    for (int e = 0; e < 25; ++e) {
      const double lr = lr_schedule(losses, cfg);
      if (reduced) {
        EXPECT_EQ(lr, cfg.lr_reduced);
      }
      if (lr == cfg.lr_reduced && !reduced) {
        reduced = true;
        EXPECT_GE(longest_stagnation, cfg.patience);
      }
      const double loss = u(rng) < 0.4 ? best - u(rng) : best + u(rng);
      losses.push_back(loss);
      if (loss < best) {
        best = loss;
        run = 0;
      } else {
        longest_stagnation = std::max(longest_stagnation, ++run);
      }
    }
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter<double> p("w", Tensor<double>({3}, {1.0, -2.0, 0.5}));
  p.gradient() = Tensor<double>({3}, {0.3, -4.0, 1e-3});
  Adam<double> adam({&p}, 0.9, 0.999, 1e-8);
  adam.step(0.01);
  // bias-corrected m/sqrt(v) is g/|g| on the first step
  EXPECT_NEAR(p.tensor()[0], 1.0 - 0.01, 1e-8);
  EXPECT_NEAR(p.tensor()[1], -2.0 + 0.01, 1e-8);
  EXPECT_NEAR(p.tensor()[2], 0.5 - 0.01, 1e-6);
}

TEST(Adam, MatchesHandRecurrence) {
  Parameter<double> p("w", Tensor<double>({1}, {0.0}));
  Adam<double> adam({&p}, 0.9, 0.999, 1e-8);
  double w = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 20; ++t) {
    const double g = std::sin(t) + 0.2;
    p.gradient()[0] = g;
    adam.step(0.05);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= 0.05 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(p.tensor()[0], w, 1e-12);
  }
}

TEST(ClipGradNorm, RescalesOnlyAboveThreshold) {
  Parameter<double> a("a", Tensor<double>({1}, {0.0})), b("b", Tensor<double>({1}, {0.0}));
  a.gradient()[0] = 3.0;
  b.gradient()[0] = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm<double>({&a, &b}, 1.0), 5.0);
  EXPECT_NEAR(a.gradient()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.gradient()[0], 0.8, 1e-15);
  EXPECT_NEAR(clip_grad_norm<double>({&a, &b}, 5.0), 1.0, 1e-15);
  EXPECT_NEAR(a.gradient()[0], 0.6, 1e-15);
  b.gradient()[0] = std::nan("");
  EXPECT_THROW(clip_grad_norm<double>({&a, &b}, 1.0), NumericError);
}

TEST(Train, OneEpochOnOneBatchReducesLoss) {
  SeparatorModel<double> model(tiny_config(), 3);
  const auto batch = tone_examples(2, 7);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.lr_initial = 1e-2;
  cfg.lr_reduced = 1e-3;
  const double before = evaluate_loss(model, batch, cfg);
  const auto history = train(model, batch, batch, cfg);
  ASSERT_EQ(history.epochs.size(), 1u);
  EXPECT_EQ(history.steps, 1u);
  EXPECT_LT(evaluate_loss(model, batch, cfg), before);
  EXPECT_EQ(history.epochs[0].lr, 1e-2);
}

TEST(Train, SameSeedIsBitIdentical) {
  const auto data = tone_examples(6, 8);
  const std::vector<Example<double>> tr(data.begin(), data.begin() + 4), va(data.begin() + 4,
                                                                           data.end());
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 11;
  cfg.record_wall_time = false;
  cfg.nll_weight = 0.05;
  auto run = [&] {
    SeparatorModel<double> model(tiny_config(), 5);
    auto h = train(model, tr, va, cfg);
    return std::make_pair(h, snapshot(model));
  };
  const auto [h1, w1] = run();
  const auto [h2, w2] = run();
  ASSERT_EQ(h1.epochs.size(), h2.epochs.size());
  for (std::size_t i = 0; i < h1.epochs.size(); ++i) {
    EXPECT_EQ(h1.epochs[i].train_loss, h2.epochs[i].train_loss);
    EXPECT_EQ(h1.epochs[i].val_loss, h2.epochs[i].val_loss);
    EXPECT_EQ(h1.epochs[i].seconds, 0.0);
  }
  for (std::size_t i = 0; i < w1.size(); ++i) EXPECT_EQ(w1[i].storage(), w2[i].storage());
}

TEST(Train, RestoresBestValidationWeightsAndStopsOnStepCap) {
  const auto data = tone_examples(5, 9);
  const std::vector<Example<double>> tr(data.begin(), data.begin() + 4), va(data.begin() + 4,
                                                                           data.end());
  SeparatorModel<double> model(tiny_config(), 6);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 1;
  cfg.max_steps = 6;
  const auto h = train(model, tr, va, cfg);
  EXPECT_EQ(h.steps, 6u);
  EXPECT_EQ(h.epochs.size(), 2u);
  double best = 1e300;
  for (const auto& e : h.epochs) best = std::min(best, e.val_loss);
  EXPECT_EQ(evaluate_loss(model, va, cfg), best);
}

TEST(Train, Rejects) {
  SeparatorModel<double> model(tiny_config(), 0);
  TrainConfig cfg;
  EXPECT_THROW(train(model, {}, tone_examples(1, 0), cfg), InvalidInput);
  cfg.lr_reduced = cfg.lr_initial;
  EXPECT_THROW(train(model, tone_examples(1, 0), tone_examples(1, 0), cfg), ConfigError);
}
