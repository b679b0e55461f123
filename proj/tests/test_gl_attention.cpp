#include <gtest/gtest.h>

#include <cmath>

#include "indiformer/gl_attention.hpp"
#include "indiformer/grad_check.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace indiformer;
using Td = Tensor<double>;
using namespace oracles;

namespace {

GLBlockConfig small_config(std::size_t d = 8, std::size_t heads = 2, std::size_t k_loc = 3,
                           std::size_t s_glob = 2) {
  GLBlockConfig c;
  c.model_dim = d;
  c.n_head = heads;
  c.local_kernel = k_loc;
  c.global_stride = s_glob;
  return c;
}

}  // namespace

TEST(GLAttention, LocalBranchPreservesLength) {
  Rng rng(1);
  for (std::size_t k_loc : {1u, 2u, 5u}) {
    GLTransformerBlock<double> block("b", small_config(8, 2, k_loc), rng);
    for (std::size_t t : {1u, 4u, 9u}) {
      auto qkv = block.local_qkv(Var<double>(testing_support::random_tensor({8, 3 * t}, rng)), t);
      EXPECT_EQ(qkv.q.shape(), (Shape{8, 3 * t}));
      EXPECT_EQ(qkv.v.shape(), (Shape{8, 3 * t}));
    }
  }
}

TEST(GLAttention, GlobalBranchLength) {
  Rng rng(2);
  GLTransformerBlock<double> s3("b", small_config(8, 2, 3, 3), rng);
  EXPECT_EQ(s3.global_qkv(Var<double>(Td({8, 6})), 6).q.dim(1), 2u);
  GLTransformerBlock<double> s6("b", small_config(8, 2, 3, 6), rng);
  EXPECT_EQ(s6.global_qkv(Var<double>(Td({8, 6})), 6).q.dim(1), 1u);
  GLTransformerBlock<double> s1("b", small_config(8, 2, 3, 1), rng);
  EXPECT_EQ(s1.global_qkv(Var<double>(Td({8, 6})), 6).q.dim(1), 6u);
}

TEST(GLAttention, SinglePositionReturnsValues) {
  Rng rng(3);
  GLTransformerBlock<double> block("b", small_config(), rng);
  Var<double> x(testing_support::random_tensor({8, 1}, rng));
  auto qkv = block.local_qkv(x, 1);
  EXPECT_LE(max_abs_diff(block.scaled_attention(qkv, 1).value(), qkv.v.value()), 1e-15);
}

TEST(GLAttention, IdenticalKeysSplitWeightEvenly) {
  Rng rng(4);
  Td q = testing_support::random_tensor({4, 1}, rng);
  Td k({4, 2});
  Td v = testing_support::random_tensor({4, 2}, rng);
  for (std::size_t r = 0; r < 4; ++r) k(r, 0) = k(r, 1) = 0.3 * static_cast<double>(r);
  std::vector<Td> weights;
  multi_head_attention(Var<double>(q), Var<double>(k), Var<double>(v), 1, 1, 2, &weights);
  ASSERT_EQ(weights.size(), 1u);
  EXPECT_NEAR(weights[0][0], 0.5, 1e-15);
  EXPECT_NEAR(weights[0][1], 0.5, 1e-15);
}

TEST(GLAttention, WeightRowsSumToOne) {
  Rng rng(5);
  Td q = testing_support::random_tensor({6, 10}, rng, -3, 3);
  Td k = testing_support::random_tensor({6, 10}, rng, -3, 3);
  std::vector<Td> weights;
  multi_head_attention(Var<double>(q), Var<double>(k), Var<double>(k), 3, 5, 5, &weights);
  ASSERT_EQ(weights.size(), 6u);  // 2 sequences x 3 heads
  for (const auto& w : weights) {
    for (std::size_t a = 0; a < 5; ++a) {
      double total = 0.0;
      for (std::size_t b = 0; b < 5; ++b) total += w[a * 5 + b];
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(GLAttention, SingleHeadMatchesBruteForce) {
  Rng rng(6);
  GLTransformerBlock<double> block("b", small_config(4, 1, 1, 1), rng);
  block.local_branch().conv.tensor() = identity_kernel(4);
  Td x = testing_support::random_tensor({4, 4}, rng);
  auto ours = block.scaled_attention(block.local_qkv(Var<double>(x), 4), 4).value();
  auto& br = block.local_branch();
  auto ref = reference_attention(x, br.wq.tensor(), br.wk.tensor(), br.wv.tensor(), 1);
  EXPECT_LE(max_abs_diff(ours, ref), 1e-12);
}

TEST(GLAttention, DegeneratesToStandardAttention) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t heads = testing_support::uniform_size(rng, 1, 3);
    const std::size_t d = heads * testing_support::uniform_size(rng, 1, 4);
    const std::size_t t = testing_support::uniform_size(rng, 1, 9);
    GLTransformerBlock<double> block("b", small_config(d, heads, 1, 1), rng);
    auto& local = block.local_branch();
    auto& global = block.global_branch();
    local.conv.tensor() = identity_kernel(d);
    global.conv.tensor() = identity_kernel(d);
    global.wq.tensor() = local.wq.tensor();
    global.wk.tensor() = local.wk.tensor();
    global.wv.tensor() = local.wv.tensor();
    Td x = testing_support::random_tensor({d, t}, rng, -2, 2);
    const Td ref =
        reference_attention(x, local.wq.tensor(), local.wk.tensor(), local.wv.tensor(), heads);
    auto a_local = block.scaled_attention(block.local_qkv(Var<double>(x), t), t).value();
    auto a_global = block.scaled_attention(block.global_qkv(Var<double>(x), t), t).value();
    EXPECT_LE(max_abs_diff(a_local, ref), 1e-6);
    EXPECT_LE(max_abs_diff(a_global, ref), 1e-6);
  }
}

TEST(GLAttention, FuseExamples) {
  Rng rng(8);
  GLTransformerBlock<double> block("b", small_config(4, 1, 1, 1), rng);
  Td a = testing_support::random_tensor({4, 5}, rng);
  // Degenerate fusion: s_glob = 1 and identical branches.
  auto fused = block.fuse(Var<double>(a), Var<double>(a), 5).value();
  const auto& w = block.fuse_weight().tensor();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 5; ++c) {
      double z = block.fuse_bias().tensor()[r];
      for (std::size_t j = 0; j < 4; ++j) z += (w(r, j) + w(r, 4 + j)) * a(j, c);
      EXPECT_NEAR(fused(r, c), 1.0 / (1.0 + std::exp(-z)), 1e-12);
      EXPECT_GT(fused(r, c), 0.0);
      EXPECT_LT(fused(r, c), 1.0);
    }
  block.fuse_weight().tensor().fill(0.0);
  const Td half = block.fuse(Var<double>(a), Var<double>(a), 5).value();
  for (double v : half.values()) EXPECT_EQ(v, 0.5);
}

TEST(GLAttention, FuseUpsamplesGlobalByRepetition) {
  Rng rng(9);
  GLTransformerBlock<double> block("b", small_config(2, 1, 1, 2), rng);
  block.fuse_weight().tensor() = Td::matrix({{0, 0, 1, 0}, {0, 0, 0, 1}});
  Td local({2, 5});
  Td global({2, 3}, {1, 2, 3, -1, -2, -3});
  auto y = block.fuse(Var<double>(local), Var<double>(global), 5).value();
  const std::vector<double> src{1, 1, 2, 2, 3};
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_NEAR(y(0, c), 1.0 / (1.0 + std::exp(-src[c])), 1e-15);
    EXPECT_NEAR(y(1, c), 1.0 / (1.0 + std::exp(src[c])), 1e-15);
  }
}

TEST(GLAttention, BlockPreservesShapeAndIsDeterministicInEval) {
  Rng rng(10);
  GLTransformerBlock<double> block("b", small_config(8, 4, 3, 2), rng);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t t = testing_support::uniform_size(rng, 1, 12);
    const std::size_t b = testing_support::uniform_size(rng, 1, 3);
    Var<double> x(testing_support::random_tensor({8, b * t}, rng));
    auto y1 = block.forward(x, t, false, nullptr).value();
    auto y2 = block.forward(x, t, false, nullptr).value();
    EXPECT_EQ(y1.shape(), x.shape());
    EXPECT_EQ(y1.storage(), y2.storage());
  }
}

TEST(GLAttention, BlockGradientsMatchDifferences) {
  // Differences come from a long double copy of the block (see grad_check).
  using Wide = long double;
  Rng rng(11), wide_rng(11);
  GLTransformerBlock<double> block("b", small_config(4, 2, 2, 2), rng);
  GLTransformerBlock<Wide> wide("b", small_config(4, 2, 2, 2), wide_rng);
  ParameterList<double> ps;
  ParameterList<Wide> wide_ps;
  block.collect(ps);
  wide.collect(wide_ps);
  std::normal_distribution<double> g(0.0, 0.05);
  for (auto* p : ps)
    for (auto& v : p->tensor().storage()) v += g(rng);
  Td x = testing_support::random_tensor({4, 10}, rng);
  Tensor<double> w = testing_support::random_tensor({4, 10}, rng);
  auto loss = [&] {
    Rng drop(5);
    return sum(mul(block.forward(Var<double>(x), 5, true, &drop), Var<double>(w)));
  };
  std::function<Var<Wide>()> wide_loss = [&] {
    Rng drop(5);
    return sum(mul(wide.forward(Var<Wide>(x.cast<Wide>()), 5, true, &drop),
                   Var<Wide>(w.cast<Wide>())));
  };
  auto res = grad_check<double, Wide>(loss, ps, wide_loss, wide_ps, 1e-5);
  EXPECT_LE(res.max_relative_error, 1e-6) << res.worst_parameter << "[" << res.worst_index << "]";
}

TEST(GLAttention, RejectsBadConfiguration) {
  Rng rng(12);
  EXPECT_THROW(GLTransformerBlock<double>("b", small_config(6, 4), rng), ConfigError);
  EXPECT_THROW(GLTransformerBlock<double>("b", small_config(8, 2, 0), rng), ConfigError);
  EXPECT_THROW(GLTransformerBlock<double>("b", small_config(8, 2, 3, 0), rng), ConfigError);
}
