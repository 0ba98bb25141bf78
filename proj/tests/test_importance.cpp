// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "mtr/importance.hpp"
#include "oracles.hpp"

namespace mtr {
namespace {

ScanTrace trace_with_delta(DenseArray delta) {
  ScanTrace t;
  t.delta = std::move(delta);
  return t;
}

TEST(ScoreDelta, SumsHeadsThenAveragesChannels) {
  const std::vector<ScanTrace> traces{trace_with_delta(DenseArray::from_rows({{0.2f, 0.4f}})),
                                      trace_with_delta(DenseArray::from_rows({{0.1f, 0.3f}}))};
  const auto s = score_delta(traces);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s.scores[0], 0.5f, 1e-7);
  EXPECT_EQ(s.indicator, Indicator::delta);
}

TEST(ScoreDelta, UniformDeltaGivesUniformScores) {
  const std::vector<ScanTrace> traces{trace_with_delta(DenseArray({4, 3}, 0.7f))};
  const auto s = score_delta(traces);
  for (float v : s.scores) EXPECT_FLOAT_EQ(v, 0.7f);
  EXPECT_EQ(argsort_desc(s.scores), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(ScoreDelta, MatchesLoopOracle) {
  std::mt19937_64 rng(21);
  const std::vector<ScanTrace> traces{trace_with_delta(oracle::random_matrix(rng, 9, 5, 0.01f, 2.0f)),
                                      trace_with_delta(oracle::random_matrix(rng, 9, 5, 0.01f, 2.0f))};
  const auto s = score_delta(traces);
  for (std::size_t t = 0; t < 9; ++t) {
    double ref = 0;
    for (std::size_t e = 0; e < 5; ++e) ref += double(traces[0].delta(t, e)) + traces[1].delta(t, e);
    EXPECT_NEAR(s.scores[t], ref / 5, 1e-6);
  }
}

TEST(ScoreDelta, HeadShapeMismatch) {
  const std::vector<ScanTrace> traces{trace_with_delta(DenseArray::matrix(3, 2)),
                                      trace_with_delta(DenseArray::matrix(4, 2))};
  EXPECT_THROW(score_delta(traces), DimensionError);
  EXPECT_THROW(score_delta({}), DimensionError);
}

TEST(ScoreDelta, PermutingTracesPermutesScores) {
  std::mt19937_64 rng(22);
  const DenseArray d0 = oracle::random_matrix(rng, 8, 4, 0.1f, 1.0f), d1 = oracle::random_matrix(rng, 8, 4, 0.1f, 1.0f);
  std::vector<std::size_t> perm{3, 1, 7, 0, 2, 6, 5, 4};
  const auto base = score_delta(std::vector<ScanTrace>{trace_with_delta(d0), trace_with_delta(d1)});
  const auto permuted =
      score_delta(std::vector<ScanTrace>{trace_with_delta(gather_rows(d0, perm)), trace_with_delta(gather_rows(d1, perm))});
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(permuted.scores[i], base.scores[perm[i]]);
}

TEST(ScoreProjection, ZeroWeightsGiveZero) {
  std::mt19937_64 rng(23);
  const auto s = score_projection(oracle::random_matrix(rng, 5, 3), DenseArray::matrix(3, 2), Indicator::b_proj);
  for (float v : s.scores) EXPECT_EQ(v, 0.0f);
}

TEST(ScoreProjection, SelectorColumn) {
  std::mt19937_64 rng(24);
  const DenseArray x = oracle::random_matrix(rng, 5, 3);
  DenseArray w = DenseArray::matrix(3, 1);
  w(0, 0) = 1.0f;
  const auto s = score_projection(x, w, Indicator::c_proj);
  for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(s.scores[t], x(t, 0));
  EXPECT_EQ(s.indicator, Indicator::c_proj);
}

TEST(ScoreProjection, TwoHeadsMatchLoopOracle) {
  std::mt19937_64 rng(25);
  const DenseArray x0 = oracle::random_matrix(rng, 6, 4), x1 = oracle::random_matrix(rng, 6, 4);
  const DenseArray w0 = oracle::random_matrix(rng, 4, 3), w1 = oracle::random_matrix(rng, 4, 3);
  const std::vector<ProjectionSource> src{{x0, w0}, {x1, w1}};
  const auto s = score_projection(src, Indicator::b_proj);
  for (std::size_t t = 0; t < 6; ++t) {
    double ref = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t e = 0; e < 4; ++e) ref += double(x0(t, e)) * w0(e, n) + double(x1(t, e)) * w1(e, n);
    EXPECT_NEAR(s.scores[t], ref / 3, 1e-6);
  }
  EXPECT_THROW(score_projection(src, Indicator::delta), ConfigError);
}

TEST(ScoreHidden, ChannelMean) {
  EXPECT_EQ(score_hidden(DenseArray({3, 4}, 1.0f)).scores, (std::vector<float>{1, 1, 1}));
  EXPECT_EQ(score_hidden(DenseArray::from_rows({{2, 4}})).scores, (std::vector<float>{3}));
  std::mt19937_64 rng(26);
  const DenseArray x = oracle::random_matrix(rng, 7, 5);
  const auto s = score_hidden(x);
  for (std::size_t t = 0; t < 7; ++t) {
    double ref = 0;
    for (std::size_t c = 0; c < 5; ++c) ref += x(t, c);
    EXPECT_NEAR(s.scores[t], ref / 5, 1e-6);
  }
}

TEST(ScoreClsSimilarity, CosineToClsRow) {
  const DenseArray x = DenseArray::from_rows({{1, 0}, {0, 3}, {2, 0}});
  const auto s = score_cls_similarity(x, 0);
  EXPECT_TRUE(std::isinf(s.scores[0]) && s.scores[0] > 0);
  EXPECT_FLOAT_EQ(s.scores[1], 0.0f);
  EXPECT_FLOAT_EQ(s.scores[2], 1.0f);
  EXPECT_THROW(score_cls_similarity(x, 3), IndexError);
}

TEST(ScoreClsSimilarity, MatchesPairwiseOracle) {
  std::mt19937_64 rng(27);
  const DenseArray x = oracle::random_matrix(rng, 8, 6);
  const auto s = score_cls_similarity(x, 4);
  for (std::size_t t = 0; t < 8; ++t)
    if (t != 4) {
      EXPECT_EQ(s.scores[t], cosine_similarity(x.row(4), x.row(t)));
    }
}

TEST(Indicator, StringRoundTrip) {
  for (auto i : {Indicator::delta, Indicator::b_proj, Indicator::c_proj, Indicator::hidden_x, Indicator::cls_sim})
    EXPECT_EQ(indicator_from_string(to_string(i)), i);
  EXPECT_THROW(indicator_from_string("attention"), ConfigError);
}

}  // namespace
}  // namespace mtr
