// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "mtr/flops.hpp"
#include "mtr/ssm.hpp"
#include "oracles.hpp"

namespace mtr {
namespace {

// Hand-expanded table for D=8, E=16, N=4, R=1, W=4, H=2:
//   norm 69, in-proj 512, per head (conv 128, silu 64, B/C 256, timescale
//   64 + softplus 32, scan 16 + 448 + 32) = 1040, head sum 32, gate 80,
//   out-proj 256, residual 8.
constexpr std::uint64_t kToyPerToken = 69 + 512 + 2 * 1040 + 32 + 80 + 256 + 8;

BlockDims toy_dims() { return {8, 16, 4, 1, 2, 4}; }

TEST(BlockFlops, HandExpandedTable) {
  EXPECT_EQ(per_token_block_flops(toy_dims()), kToyPerToken);
  EXPECT_EQ(block_flops(1, toy_dims()), kToyPerToken);
}

TEST(BlockFlops, LinearInTokens) {
  for (std::size_t l : {1u, 7u, 196u}) EXPECT_EQ(block_flops(2 * l, BlockDims{}), 2 * block_flops(l, BlockDims{}));
  EXPECT_THROW(block_flops(0, BlockDims{}), ContractError);
}

TEST(BlockFlops, MatchesInstrumentedBlock) {
  std::mt19937_64 rng(51);
  const SsmBlockParams p = oracle::random_block(rng, 8, 16, 4, 1);
  const DenseArray x = oracle::random_matrix(rng, 10, 8);
  OpCounter c;
  mamba_block(x, p, {}, c);
  EXPECT_EQ(c.ops, block_flops(10, toy_dims()));
}

TEST(BlockFlops, InstrumentedCountOverRandomShapes) {
  std::mt19937_64 rng(52);
  std::uniform_int_distribution<std::size_t> ext(1, 9);
  for (int i = 0; i < 20; ++i) {
    const std::size_t d = ext(rng), e = ext(rng), n = ext(rng), r = ext(rng), l = ext(rng);
    const SsmBlockParams p = oracle::random_block(rng, d, e, n, r);
    OpCounter c;
    mamba_block(oracle::random_matrix(rng, l, d), p, {}, c);
    EXPECT_EQ(c.ops, block_flops(l, {d, e, n, r, 2, 4}));
  }
}

TEST(BlockFlops, StrictlyIncreasingInEachDim) {
  const BlockDims b{};
  for (int f = 0; f < 3; ++f) {
    BlockDims up = b;
    (f == 0 ? up.model_dim : f == 1 ? up.inner_dim : up.state_dim) += 1;
    EXPECT_GT(per_token_block_flops(up), per_token_block_flops(b));
  }
}

FlopsModel vim_tiny() { return FlopsModel{}; }

TEST(SimulateTokens, ReductionAfterListedBlocks) {
  FlopsModel m;
  m.depth = 4;
  m.patch_count = 16;
  const auto s = simulate_tokens(m, {0}, 0.1);
  EXPECT_EQ(s.per_layer, (std::vector<std::size_t>{17, 16, 16, 16}));
  EXPECT_EQ(s.final_tokens, 16u);
  EXPECT_EQ(simulate_tokens(m, {1}, 0.1).per_layer, (std::vector<std::size_t>{17, 17, 16, 16}));
}

TEST(SimulateTokens, RejectsBadLayers) {
  EXPECT_THROW(simulate_tokens(vim_tiny(), {24}, 0.1), ConfigError);
  EXPECT_THROW(simulate_tokens(vim_tiny(), {10, 5}, 0.1), ConfigError);
  EXPECT_THROW(simulate_tokens(vim_tiny(), {5}, 0.5), InvalidRatioError);
}

TEST(AchievedReduction, NondecreasingInRatio) {
  const auto layers = default_reduction_layers(24);
  double prev = 0.0;
  for (double k = 0.0; k < 0.5; k += 0.001) {
    const double a = achieved_reduction(vim_tiny(), layers, k);
    EXPECT_GE(a, prev);
    EXPECT_LT(a, 1.0);
    prev = a;
  }
}

TEST(SolveK, ZeroTarget) {
  const auto p = solve_k(0.0, default_reduction_layers(24), vim_tiny());
  EXPECT_EQ(p.k, 0.0);
  EXPECT_EQ(p.achieved, 0.0);
  EXPECT_TRUE(p.within_tolerance);
}

TEST(SolveK, DefaultLayers) {
  EXPECT_EQ(default_reduction_layers(24), (std::vector<std::size_t>{5, 10, 15, 20}));
  EXPECT_TRUE(default_reduction_layers(5).empty());
}

// Loop re-simulation written out independently of simulate_tokens.
double resimulate(const FlopsModel& m, const std::vector<std::size_t>& layers, double k) {
  auto total = [&](double kk) {
    std::uint64_t f = m.patch_embed_flops();
    std::size_t patches = m.patch_count;
    for (std::size_t l = 0; l < m.depth; ++l) {
      f += (patches + (m.has_cls ? 1 : 0)) * per_token_block_flops(m.dims);
      if (std::ranges::count(layers, l)) patches -= static_cast<std::size_t>(kk * patches);
    }
    return static_cast<double>(f + m.head_flops(patches + (m.has_cls ? 1 : 0)));
  };
  return 1.0 - total(k) / total(0.0);
}

TEST(SolveK, ThirtyPercentOnFullStack) {
  const auto p = solve_k(0.30, {5, 10, 15, 20}, vim_tiny());
  EXPECT_TRUE(p.within_tolerance);
  EXPECT_LT(std::abs(p.achieved - 0.30), kPlanTolerance);
  EXPECT_DOUBLE_EQ(resimulate(vim_tiny(), p.reduce_at_layers, p.k), p.achieved);
}

TEST(SolveK, TwentyThirtyFortyAreAttainable) {
  for (double t : {0.2, 0.3, 0.4}) {
    const auto p = solve_k(t, default_reduction_layers(24), vim_tiny());
    EXPECT_TRUE(p.within_tolerance) << t;
    EXPECT_LT(std::abs(p.achieved - t), kPlanTolerance) << t;
    EXPECT_GE(p.k, 0.0);
    EXPECT_LT(p.k, 0.5);
  }
}

TEST(SolveK, DegenerateSingleLayer) {
  FlopsModel m;
  m.depth = 200;
  m.patch_count = 1000;
  m.has_cls = false;
  m.include_embed_and_head = false;
  const auto p = solve_k(0.2, {0}, m);
  const double removed = std::floor(p.k * 1000) / 1000;
  // every block but the first sees the reduced sequence
  EXPECT_NEAR(p.achieved, removed * 199.0 / 200.0, 1e-12);
  EXPECT_NEAR(removed, 0.2, 0.005);
}

TEST(SolveK, UnattainableTargetReportsMaximum) {
  try {
    solve_k(0.9, {20}, vim_tiny());
    FAIL() << "expected UnattainableTargetError";
  } catch (const UnattainableTargetError& e) {
    EXPECT_GT(e.max_achievable(), 0.0);
    EXPECT_LT(e.max_achievable(), 0.9);
    EXPECT_NE(std::string(e.what()).find("maximum"), std::string::npos);
  }
  EXPECT_THROW(solve_k(1.0, {5}, vim_tiny()), InvalidRatioError);
  EXPECT_THROW(solve_k(0.1, {}, vim_tiny()), UnattainableTargetError);
}

TEST(SolveK, CoarseStepsFallBackHonestly) {
  FlopsModel m;
  m.depth = 4;
  m.patch_count = 8;
  m.include_embed_and_head = false;
  // Token count moves in steps of 1/8 of the tail blocks; 0.1 sits between steps.
  const auto p = solve_k(0.1, {0}, m);
  EXPECT_DOUBLE_EQ(p.achieved, achieved_reduction(m, {0}, p.k));
  EXPECT_EQ(p.within_tolerance, std::abs(p.achieved - 0.1) < kPlanTolerance);
  EXPECT_FALSE(p.within_tolerance);
}

TEST(PlanJson, RoundTrip) {
  const auto p = solve_k(0.4, {5, 10, 15, 20}, vim_tiny(), Strategy::hybrid);
  const auto j = to_json(p);
  EXPECT_EQ(j.at("layers"), nlohmann::json({5, 10, 15, 20}));
  EXPECT_EQ(j.at("strategy"), "hybrid");
  const auto q = plan_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(q.reduce_at_layers, p.reduce_at_layers);
  EXPECT_EQ(q.k, p.k);
  EXPECT_EQ(q.achieved, p.achieved);
  EXPECT_EQ(q.strategy, Strategy::hybrid);
  EXPECT_THROW(plan_from_json(nlohmann::json::parse(R"({"layers":[1]})")), ConfigError);
}

}  // namespace
}  // namespace mtr
