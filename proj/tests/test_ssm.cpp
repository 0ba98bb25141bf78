// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mtr/ssm.hpp"
#include "oracles.hpp"

namespace mtr {
namespace {

SsmHeadParams scalar_head(float a_log, float w_b, float w_c, float w_low, float skip) {
  SsmHeadParams h;
  h.a_log = DenseArray::from_rows({{a_log}});
  h.w_b = DenseArray::from_rows({{w_b}});
  h.w_c = DenseArray::from_rows({{w_c}});
  h.w_1 = DenseArray::from_rows({{w_low}});
  h.w_2 = DenseArray::from_rows({{1.0f}});
  h.skip_d = {skip};
  h.conv_kernel = DenseArray::from_rows({{0, 0, 0, 1}});
  return h;
}

TEST(Discretize, SmallTimescaleGivesOne) {
  const DenseArray a = DenseArray::from_rows({{-1.0f, -3.0f}});
  const DenseArray abar = discretize(a, DenseArray::from_rows({{1e-8f}}));
  for (float v : abar.values()) EXPECT_NEAR(v, 1.0f, 1e-6);
}

TEST(Discretize, HalfLife) {
  const DenseArray abar = discretize(DenseArray::from_rows({{-1.0f}}), DenseArray::from_rows({{std::log(2.0f)}}));
  EXPECT_NEAR(abar[0], 0.5f, 1e-7);
}

TEST(Discretize, RandomValuesStayInUnitInterval) {
  std::mt19937_64 rng(5);
  const DenseArray a = [&] {
    DenseArray m = oracle::random_matrix(rng, 4, 3, -2, 2);
    for (float& v : m.values()) v = -std::exp(v);
    return m;
  }();
  const DenseArray delta = oracle::random_matrix(rng, 6, 4, 0.01f, 3.0f);
  const DenseArray abar = discretize(a, delta);
  EXPECT_EQ(abar.shape(), (Shape{6, 4, 3}));
  for (float v : abar.values()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Discretize, RejectsNonPositiveTimescale) {
  EXPECT_THROW(discretize(DenseArray::from_rows({{-1.0f}}), DenseArray::from_rows({{0.0f}})), ContractError);
  EXPECT_THROW(discretize(DenseArray::from_rows({{-1.0f}}), DenseArray::from_rows({{-0.5f}})), ContractError);
}

TEST(SelectiveScan, HalvingRecurrence) {
  // softplus(0) = ln 2 and A = -1 give Abar = 0.5; W_B = 1/ln 2 makes the
  // injected term B * delta * x equal to 1; C = 1, D = 0.
  const SsmHeadParams h = scalar_head(0.0f, 1.0f / std::log(2.0f), 1.0f, 0.0f, 0.0f);
  const DenseArray x = DenseArray::from_rows({{1}, {1}, {1}});
  const ScanTrace tr = selective_scan(x, h);
  EXPECT_NEAR(tr.y(0, 0), 1.0f, 1e-6);
  EXPECT_NEAR(tr.y(1, 0), 1.5f, 1e-6);
  EXPECT_NEAR(tr.y(2, 0), 1.75f, 1e-6);
}

TEST(SelectiveScan, ZeroInputStaysAtRest) {
  std::mt19937_64 rng(1);
  const SsmHeadParams h = oracle::random_head(rng, 4, 3, 2);
  const ScanTrace tr = selective_scan(DenseArray::matrix(5, 4), h);
  for (float v : tr.y.values()) EXPECT_EQ(v, 0.0f);
  for (float v : tr.delta.values()) EXPECT_NEAR(v, std::log(2.0f), 1e-7);
}

TEST(SelectiveScan, MatchesUnrolledOracle) {
  std::mt19937_64 rng(42);
  const SsmHeadParams h = oracle::random_head(rng, 4, 3, 2);
  const DenseArray x = oracle::random_matrix(rng, 6, 4);
  const ScanTrace tr = selective_scan(x, h);
  const auto ref = oracle::naive_forward_scan(x, h);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t e = 0; e < 4; ++e) {
      EXPECT_NEAR(tr.y(t, e), ref.y[t][e], 1e-5);
      EXPECT_NEAR(tr.delta(t, e), ref.delta[t][e], 1e-6);
    }
}

TEST(SelectiveScan, BackwardEqualsReversedForward) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 20; ++i) {
    SsmHeadParams back = oracle::random_head(rng, 5, 3, 2, ScanDirection::backward);
    SsmHeadParams fwd = back;
    fwd.direction = ScanDirection::forward;
    const DenseArray x = oracle::random_matrix(rng, 7, 5);
    const ScanTrace b = selective_scan(x, back);
    const ScanTrace f = selective_scan(reverse_rows(x), fwd);
    EXPECT_EQ(b.y, reverse_rows(f.y));
    EXPECT_EQ(b.delta, reverse_rows(f.delta));
  }
}

TEST(SelectiveScan, DeltaIsSoftplusOfLowRankProjection) {
  std::mt19937_64 rng(10);
  for (auto dir : {ScanDirection::forward, ScanDirection::backward}) {
    const SsmHeadParams h = oracle::random_head(rng, 6, 4, 2, dir);
    const DenseArray u = oracle::random_matrix(rng, 9, 6);
    const DenseArray x = head_input(u, h);
    const ScanTrace tr = selective_scan(x, h);
    EXPECT_EQ(tr.delta, softplus(matmul(matmul(x, h.w_1), h.w_2)));
    EXPECT_EQ(tr.input, x);
  }
}

TEST(SelectiveScan, StateDecaysOnceInputStops) {
  std::mt19937_64 rng(12);
  SsmHeadParams h = oracle::random_head(rng, 4, 3, 2);
  std::ranges::fill(h.skip_d, 0.0f);
  DenseArray x = oracle::random_matrix(rng, 20, 4);
  const std::size_t t0 = 5;
  for (std::size_t t = t0 + 1; t < 20; ++t)
    for (float& v : x.row(t)) v = 0.0f;
  const ScanTrace tr = selective_scan(x, h, ScanOptions{.record_states = true});
  const std::size_t stride = 4 * 3;
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t t = t0; t < 20; ++t) {
    double norm = 0.0;
    for (std::size_t i = 0; i < stride; ++i) norm += std::pow(tr.states[t * stride + i], 2);
    norm = std::sqrt(norm);
    if (t > t0) {
      EXPECT_LT(norm, prev) << "t=" << t;
    }
    prev = norm;
  }
}

TEST(SelectiveScan, ShapeErrors) {
  std::mt19937_64 rng(2);
  const SsmHeadParams h = oracle::random_head(rng, 4, 3, 2);
  EXPECT_THROW(selective_scan(DenseArray::matrix(3, 5), h), DimensionError);
  EXPECT_THROW(selective_scan(DenseArray::matrix(0, 4), h), DimensionError);
  SsmHeadParams bad = h;
  bad.w_2 = DenseArray::matrix(3, 4);
  EXPECT_THROW(bad.validate(), DimensionError);
}

TEST(CausalConv, DirectionAlignedTaps) {
  const DenseArray u = DenseArray::from_rows({{1}, {2}, {3}, {4}, {5}});
  // Only the lag-0 tap: identity in both directions.
  const DenseArray id = DenseArray::from_rows({{0, 0, 0, 1}});
  EXPECT_EQ(causal_conv(u, id, ScanDirection::forward), u);
  EXPECT_EQ(causal_conv(u, id, ScanDirection::backward), u);
  // Only the lag-1 tap: previous token in scan order.
  const DenseArray lag1 = DenseArray::from_rows({{0, 0, 1, 0}});
  EXPECT_EQ(causal_conv(u, lag1, ScanDirection::forward), DenseArray::from_rows({{0}, {1}, {2}, {3}, {4}}));
  EXPECT_EQ(causal_conv(u, lag1, ScanDirection::backward), DenseArray::from_rows({{2}, {3}, {4}, {5}, {0}}));
}

TEST(MambaBlock, ZeroWeightsGivePureResidual) {
  const std::size_t d = 4, e = 8;
  SsmBlockParams p;
  p.norm_scale.assign(d, 1.0f);
  p.norm_bias.assign(d, 0.0f);
  p.in_proj = DenseArray::matrix(d, 2 * e);
  p.out_proj = DenseArray::matrix(e, d);
  for (std::size_t i = 0; i < d; ++i) p.out_proj(i, i) = 1.0f;
  std::mt19937_64 rng(4);
  p.heads.push_back(oracle::random_head(rng, e, 2, 1));
  const DenseArray x = oracle::random_matrix(rng, 5, d);
  EXPECT_EQ(mamba_block(x, p).y, x);
}

TEST(MambaBlock, ZeroOutProjectionIsResidualIdentity) {
  std::mt19937_64 rng(6);
  SsmBlockParams p = oracle::random_block(rng, 6, 12, 3, 1);
  p.out_proj = DenseArray::matrix(12, 6);
  const DenseArray x = oracle::random_matrix(rng, 9, 6);
  EXPECT_EQ(mamba_block(x, p).y, x);
}

TEST(MambaBlock, SingleTokenSingleHead) {
  std::mt19937_64 rng(13);
  SsmBlockParams p = oracle::random_block(rng, 4, 8, 3, 1);
  p.heads.resize(1);
  const DenseArray x = oracle::random_matrix(rng, 1, 4);
  const BlockOutput out = mamba_block(x, p);

  const DenseArray uz = matmul(layernorm(x, p.norm_scale, p.norm_bias), p.in_proj);
  DenseArray u = column_slice(uz, 0, 8);
  // With one token only the lag-0 tap sees data.
  for (std::size_t c = 0; c < 8; ++c) u(0, c) = silu(u(0, c) * p.heads[0].conv_kernel(c, 3));
  const ScanTrace tr = selective_scan(u, p.heads[0]);
  DenseArray gated = DenseArray::matrix(1, 8);
  for (std::size_t c = 0; c < 8; ++c) gated(0, c) = tr.y(0, c) * silu(uz(0, 8 + c));
  const DenseArray proj = matmul(gated, p.out_proj);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.y(0, j), x(0, j) + proj(0, j), 1e-6);
}

TEST(MambaBlock, RandomTwoHeadBlockIsFiniteWithPositiveTimescales) {
  std::mt19937_64 rng(14);
  const SsmBlockParams p = oracle::random_block(rng, 8, 16, 4, 1);
  p.validate();
  const DenseArray x = oracle::random_matrix(rng, 10, 8);
  const BlockOutput out = mamba_block(x, p);
  EXPECT_TRUE(out.y.all_finite());
  ASSERT_EQ(out.traces.size(), 2u);
  for (const auto& tr : out.traces) {
    EXPECT_EQ(tr.delta.shape(), (Shape{10, 16}));
    for (float v : tr.delta.values()) EXPECT_GT(v, 0.0f);
  }
}

TEST(MambaBlock, RejectsWrongInputWidth) {
  std::mt19937_64 rng(15);
  const SsmBlockParams p = oracle::random_block(rng, 8, 16, 4, 1);
  EXPECT_THROW(mamba_block(DenseArray::matrix(3, 7), p), DimensionError);
}

}  // namespace
}  // namespace mtr
