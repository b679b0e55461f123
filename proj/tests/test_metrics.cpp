#include <gtest/gtest.h>

#include <cmath>

#include "indiformer/metrics.hpp"
#include "support.hpp"

using namespace indiformer;
using namespace indiformer::metrics;
using Vec = std::vector<double>;

TEST(Snr, Examples) {
  const Vec ref{1, 1, 1, 1};
  EXPECT_EQ(snr(ref, ref), 100.0);
  EXPECT_NEAR(snr(Vec{1, 1, 1, 0}, ref), 10 * std::log10(4.0), 1e-12);
  EXPECT_NEAR(snr(Vec{1, 1, 1, 0}, ref), 6.021, 0.001);
  EXPECT_NEAR(snr(Vec{-1, -1, -1, -1}, ref), -6.021, 0.001);
}

TEST(Snr, Errors) {
  EXPECT_THROW(snr(Vec{1, 2}, Vec{1, 2, 3}), InvalidInput);
  EXPECT_THROW(snr(Vec{1, 2}, Vec{0, 0}), InvalidInput);
}

TEST(Snr, DecreasesWithNoiseScale) {
  Rng rng(1);
  auto ref = testing_support::random_signal(256, rng);
  auto noise = testing_support::random_signal(256, rng);
  double previous = 1e9;
  for (double scale : {1e-3, 1e-2, 0.1, 0.5, 1.0, 3.0}) {
    Vec est = ref;
    for (std::size_t i = 0; i < est.size(); ++i) est[i] += scale * noise[i];
    const double s = snr(est, ref);
    EXPECT_LT(s, previous);
    previous = s;
  }
}

TEST(SegSnr, Examples) {
  MetricConfig cfg;
  cfg.frame_len = 4;
  const Vec ref{1, 1, 1, 1, 1, 1, 1, 1};
  EXPECT_EQ(seg_snr(ref, ref, cfg), 100.0);
  EXPECT_NEAR(seg_snr(Vec{1, 1, 1, 0, 1, 1, 1, 0}, ref, cfg), 6.021, 0.001);
  // len 10, M_s 4: the last two samples never count.
  Vec ref10{1, 1, 1, 1, 1, 1, 1, 1, 5, 5}, est10 = ref10;
  est10[8] = -40;
  est10[9] = 9;
  EXPECT_EQ(seg_snr(est10, ref10, cfg), 100.0);
  EXPECT_THROW(seg_snr(Vec{1, 2, 3}, Vec{1, 2, 3}, cfg), InvalidInput);
}

TEST(SegSnr, NeverExceedsCap) {
  Rng rng(2);
  MetricConfig cfg;
  cfg.frame_len = 16;
  for (int trial = 0; trial < 50; ++trial) {
    auto ref = testing_support::random_signal(100, rng);
    auto est = testing_support::random_signal(100, rng, 0.01);
    for (std::size_t i = 0; i < ref.size(); ++i) est[i] += ref[i];
    EXPECT_LE(seg_snr(est, ref, cfg), cfg.snr_cap);
    EXPECT_EQ(seg_snr(ref, ref, cfg), cfg.snr_cap);
  }
}

TEST(Sisnr, Examples) {
  EXPECT_EQ(sisnr(Vec{2, 4, -6}, Vec{1, 2, -3}), 100.0);
  EXPECT_NEAR(sisnr(Vec{1, 1}, Vec{1, 0}), 0.0, 1e-6);
  EXPECT_THROW(sisnr(Vec{1, 1}, Vec{0, 0}), InvalidInput);
  EXPECT_THROW(sisnr(Vec{0, 0}, Vec{1, 1}), InvalidInput);
}

TEST(Sisnr, ScaleInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto ref = testing_support::random_signal(200, rng);
    auto est = testing_support::random_signal(200, rng);
    for (std::size_t i = 0; i < ref.size(); ++i) est[i] += ref[i];
    const double base = sisnr(est, ref);
    for (double a : {-100.0, -1.0, -0.01, 0.01, 1.0, 100.0}) {
      Vec scaled = est;
      for (auto& v : scaled) v *= a;
      EXPECT_NEAR(sisnr(scaled, ref), base, 1e-9) << "a=" << a;
    }
  }
}

TEST(Sisnr, LiteralProjectionVariant) {
  // Projection onto the estimate: x_T = <e,r>/|e|^2 e. For e=[1,1], r=[1,0]:
  // x_T = [0.5,0.5], x_E = [0.5,0.5] -> 0 dB as well, but differs elsewhere.
  EXPECT_NEAR(sisnr(Vec{1, 1}, Vec{1, 0}, {}, Projection::estimate), 0.0, 1e-12);
  const Vec e{1, 0.5, -0.2}, r{0.3, 1, 0.4};
  EXPECT_GT(std::abs(sisnr(e, r, {}, Projection::estimate) - sisnr(e, r)), 1e-3);
}

TEST(Sisnri, Examples) {
  Rng rng(4);
  auto ref = testing_support::random_signal(64, rng);
  auto other = testing_support::random_signal(64, rng);
  Vec mix = ref;
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] += other[i];
  EXPECT_EQ(sisnri(mix, ref, mix), 0.0);
  EXPECT_GT(sisnri(ref, ref, mix), 0.0);
  EXPECT_NEAR(sisnri(ref, ref, mix), 100.0 - sisnr(mix, ref), 1e-12);
  EXPECT_NEAR(sisnri(Vec{1, 0.1}, Vec{1, 0}, Vec{1, 1}), 20.0, 1e-9);
}

namespace {

ReportItem item(const std::string& name, std::vector<Vec> est, std::vector<Vec> ref,
                std::vector<std::string> labels, Vec mix) {
  return {name, std::move(est), std::move(ref), std::move(labels), std::move(mix)};
}

}  // namespace

TEST(Report, SingleSourcePairGivesOneRowAndMean) {
  MetricConfig cfg;
  cfg.frame_len = 2;
  auto rep = report({item("p0", {{1, 1, 1, 0}}, {{1, 1, 1, 1}}, {"tone"}, {1, 2, 1, 2})}, cfg);
  ASSERT_EQ(rep.rows.size(), 1u);
  EXPECT_EQ(rep.mean.pair, "mean");
  EXPECT_NEAR(rep.mean.snr_db, rep.rows[0].snr_db, 1e-12);
  const std::string csv = rep.csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "pair,class,snr_db,segsnr_db,sisnri_db");
}

TEST(Report, PermutationOfEstimatesDoesNotChangeReport) {
  Rng rng(5);
  MetricConfig cfg;
  cfg.frame_len = 32;
  std::vector<ReportItem> a, b;
  for (int i = 0; i < 4; ++i) {
    auto s0 = testing_support::random_signal(128, rng), s1 = testing_support::random_signal(128, rng);
    Vec mix(128), e0 = s0, e1 = s1;
    auto n0 = testing_support::random_signal(128, rng, 0.2), n1 = testing_support::random_signal(128, rng, 0.3);
    for (std::size_t k = 0; k < 128; ++k) {
      mix[k] = s0[k] + s1[k];
      e0[k] += n0[k];
      e1[k] += n1[k];
    }
    const std::string name = "p" + std::to_string(i);
    a.push_back(item(name, {e0, e1}, {s0, s1}, {"tone", "chirp"}, mix));
    // swapped and rescaled estimates
    Vec e1s = e1, e0s = e0;
    for (auto& v : e1s) v *= -3.0;
    for (auto& v : e0s) v *= 0.5;
    b.push_back(item(name, {e1s, e0s}, {s0, s1}, {"tone", "chirp"}, mix));
  }
  auto ra = report(a, cfg), rb = report(b, cfg);
  ASSERT_EQ(ra.rows.size(), 8u);
  for (std::size_t i = 0; i < ra.rows.size(); ++i) {
    EXPECT_NEAR(ra.rows[i].sisnri_db, rb.rows[i].sisnri_db, 1e-9);
  }
  EXPECT_EQ(rb.assignments[0], (std::vector<std::size_t>{1, 0}));
  ASSERT_EQ(ra.class_means.size(), 2u);
  EXPECT_EQ(ra.class_means[0].label, "chirp");
  EXPECT_EQ(ra.class_means[1].label, "tone");
}

TEST(Report, Errors) {
  EXPECT_THROW(report({}), InvalidInput);
  EXPECT_THROW(report({item("p", {{1, 1}}, {{1, 1}, {1, 0}}, {"a", "b"}, {2, 1})}),
               InvalidInput);
  EXPECT_THROW(report({item("p", {{1, 1}}, {{1, 1}}, {}, {2, 1})}), InvalidInput);
}
