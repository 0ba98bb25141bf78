// SPDX-License-Identifier: Apache-2.0
//
// Analytic FLOP model of the vision SSM stack and the solver that turns a
// global FLOP-reduction target into a grouping ratio k.
//
// Counting convention (per token, per block), multiply-add = 2 and any other
// scalar op = 1. D = model width, E = inner width, N = state size,
// R = timescale rank, W = conv width, H = scanning heads.
//
//   layer norm             8D + 5
//   in projection          2 * D * 2E
//   per head:
//     causal conv          2 * W * E
//     SiLU                 4E
//     B and C projections  2 * 2 * E * N
//     timescale            2 * E * R + 2 * R * E, softplus 2E
//     scan                 E (delta * x) + 7 E N (exp(dt*A), state update,
//                          C readout) + 2E (skip term)
//   head sum               H * E
//   gate                   SiLU 4E + product E
//   out projection         2 * E * D
//   residual               D
//
// Patch embedding, the classifier and the token-reduction bookkeeping are
// outside the blocks; the first two are added by FlopsModel, the latter is
// not counted.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtr/errors.hpp"
#include "mtr/reduction.hpp"

namespace mtr {

struct BlockDims {
  std::size_t model_dim = 192;
  std::size_t inner_dim = 384;
  std::size_t state_dim = 16;
  std::size_t delta_rank = 12;
  std::size_t heads = 2;
  std::size_t conv_width = 4;
};

inline std::uint64_t per_token_block_flops(const BlockDims& d) {
  const std::uint64_t D = d.model_dim, E = d.inner_dim, N = d.state_dim, R = d.delta_rank, H = d.heads,
                      W = d.conv_width;
  const std::uint64_t per_head = 2 * W * E + 4 * E + 4 * E * N + 4 * E * R + 2 * E + (E + 7 * E * N + 2 * E);
  return (8 * D + 5) + 4 * D * E + H * per_head + H * E + 5 * E + 2 * E * D + D;
}

inline std::uint64_t block_flops(std::size_t tokens, const BlockDims& d) {
  if (tokens == 0) throw ContractError("block_flops: token count must be at least 1");
  return static_cast<std::uint64_t>(tokens) * per_token_block_flops(d);
}

struct FlopsModel {
  BlockDims dims;
  std::size_t depth = 24;
  std::size_t patch_count = 196;
  bool has_cls = true;
  std::size_t patch_values = 16 * 16 * 3;  // inputs per patch
  std::size_t class_count = 1000;
  bool include_embed_and_head = true;

  std::size_t initial_tokens() const noexcept { return patch_count + (has_cls ? 1 : 0); }

  std::uint64_t patch_embed_flops() const {
    if (!include_embed_and_head) return 0;
    return static_cast<std::uint64_t>(patch_count) * (2 * patch_values * dims.model_dim + dims.model_dim);
  }

  // Final norm + linear classifier; without CLS a weighted mean pool first.
  std::uint64_t head_flops(std::size_t final_tokens) const {
    if (!include_embed_and_head) return 0;
    const std::uint64_t D = dims.model_dim;
    std::uint64_t f = (8 * D + 5) + 2 * D * class_count + class_count;
    if (!has_cls) f += 2 * static_cast<std::uint64_t>(final_tokens) * D + D;
    return f;
  }
};

struct TokenSchedule {
  std::vector<std::size_t> per_layer;  // tokens entering each block
  std::size_t final_tokens = 0;
};

inline void validate_layers(const std::vector<std::size_t>& layers, std::size_t depth) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] >= depth)
      throw ConfigError("reduction layer " + std::to_string(layers[i]) + " is outside a " + std::to_string(depth) +
                        "-layer stack");
    if (i && layers[i] <= layers[i - 1]) throw ConfigError("reduction layers must be strictly increasing");
  }
}

// Token count entering each block when reduction runs after each listed block.
inline TokenSchedule simulate_tokens(const FlopsModel& m, const std::vector<std::size_t>& layers, double k) {
  validate_layers(layers, m.depth);
  TokenSchedule s;
  s.per_layer.reserve(m.depth);
  std::size_t reducible = m.patch_count;
  const std::size_t extra = m.has_cls ? 1 : 0;
  auto next = layers.begin();
  for (std::size_t l = 0; l < m.depth; ++l) {
    s.per_layer.push_back(reducible + extra);
    if (next != layers.end() && *next == l) {
      reducible -= group_size(k, reducible);
      ++next;
    }
  }
  s.final_tokens = reducible + extra;
  return s;
}

inline std::uint64_t total_flops(const FlopsModel& m, const TokenSchedule& s) {
  std::uint64_t total = m.patch_embed_flops();
  for (std::size_t t : s.per_layer) total += block_flops(t, m.dims);
  return total + m.head_flops(s.final_tokens);
}

inline double reduction_fraction(std::uint64_t baseline, std::uint64_t reduced) {
  return 1.0 - static_cast<double>(reduced) / static_cast<double>(baseline);
}

inline double achieved_reduction(const FlopsModel& m, const std::vector<std::size_t>& layers, double k) {
  const std::uint64_t base = total_flops(m, simulate_tokens(m, layers, 0.0));
  return reduction_fraction(base, total_flops(m, simulate_tokens(m, layers, k)));
}

// Every 5th block starting at 5.
inline std::vector<std::size_t> default_reduction_layers(std::size_t depth) {
  std::vector<std::size_t> out;
  for (std::size_t l = 5; l < depth; l += 5) out.push_back(l);
  return out;
}

inline constexpr double kPlanTolerance = 0.0025;
inline constexpr int kPlanMaxIterations = 64;

struct ReductionPlan {
  std::vector<std::size_t> reduce_at_layers;
  double k = 0.0;
  Strategy strategy = Strategy::merge;
  double target = 0.0;
  double achieved = 0.0;
  bool within_tolerance = true;
};

inline ReductionPlan solve_k(double target, std::vector<std::size_t> layers, const FlopsModel& m,
                             Strategy strategy = Strategy::merge) {
  if (!(target >= 0.0 && target < 1.0))
    throw InvalidRatioError("target reduction must lie in [0, 1), got " + std::to_string(target));
  validate_layers(layers, m.depth);
  ReductionPlan plan{std::move(layers), 0.0, strategy, target, 0.0, true};
  if (target == 0.0) return plan;

  auto achieved = [&](double k) { return achieved_reduction(m, plan.reduce_at_layers, k); };
  const double k_max = std::nextafter(0.5, 0.0);
  const double a_max = achieved(k_max);
  if (target - a_max >= kPlanTolerance)
    throw UnattainableTargetError("target reduction " + std::to_string(target) +
                                      " is unattainable; the maximum for this layer set is " + std::to_string(a_max),
                                  a_max);

  double lo = 0.0, a_lo = 0.0, hi = k_max, a_hi = a_max;
  for (int it = 0; it < kPlanMaxIterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double a = achieved(mid);
    if (std::abs(a - target) < kPlanTolerance) {
      plan.k = mid;
      plan.achieved = a;
      return plan;
    }
    if (a < target) {
      lo = mid;
      a_lo = a;
    } else {
      hi = mid;
      a_hi = a;
    }
  }
  // The floor() steps skipped over the tolerance band; report the nearer side.
  const bool take_hi = std::abs(a_hi - target) <= std::abs(a_lo - target);
  plan.k = take_hi ? hi : lo;
  plan.achieved = take_hi ? a_hi : a_lo;
  plan.within_tolerance = std::abs(plan.achieved - target) < kPlanTolerance;
  return plan;
}

inline nlohmann::json to_json(const ReductionPlan& p) {
  return {{"layers", p.reduce_at_layers},
          {"k", p.k},
          {"strategy", to_string(p.strategy)},
          {"target", p.target},
          {"achieved", p.achieved}};
}

inline ReductionPlan plan_from_json(const nlohmann::json& j) {
  ReductionPlan p;
  try {
    p.reduce_at_layers = j.at("layers").get<std::vector<std::size_t>>();
    p.k = j.at("k").get<double>();
    p.strategy = strategy_from_string(j.at("strategy").get<std::string>());
    p.target = j.at("target").get<double>();
    p.achieved = j.at("achieved").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("reduction plan JSON: ") + e.what());
  }
  p.within_tolerance = std::abs(p.achieved - p.target) < kPlanTolerance;
  return p;
}

}  // namespace mtr
