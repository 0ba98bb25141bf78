// SPDX-License-Identifier: Apache-2.0
//
// Per-token importance indicators read off a block's internals. The timescale
// indicator sums delta over scanning heads and averages over channels; the
// others exist for ablation.
#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mtr/errors.hpp"
#include "mtr/ssm.hpp"
#include "mtr/tensor.hpp"

namespace mtr {

enum class Indicator { delta, b_proj, c_proj, hidden_x, cls_sim };

inline const char* to_string(Indicator i) {
  switch (i) {
    case Indicator::delta: return "delta";
    case Indicator::b_proj: return "b";
    case Indicator::c_proj: return "c";
    case Indicator::hidden_x: return "x";
    case Indicator::cls_sim: return "cls";
  }
  return "?";
}

inline Indicator indicator_from_string(const std::string& s) {
  if (s == "delta") return Indicator::delta;
  if (s == "b") return Indicator::b_proj;
  if (s == "c") return Indicator::c_proj;
  if (s == "x") return Indicator::hidden_x;
  if (s == "cls") return Indicator::cls_sim;
  throw ConfigError("unknown indicator '" + s + "' (expected delta|b|c|x|cls)");
}

struct ImportanceScores {
  std::vector<float> scores;
  Indicator indicator = Indicator::delta;

  std::size_t size() const noexcept { return scores.size(); }
};

inline ImportanceScores score_delta(std::span<const ScanTrace> traces) {
  if (traces.empty()) throw DimensionError("score_delta: no scanning heads");
  const std::size_t l = traces[0].delta.rows(), e = traces[0].delta.cols();
  for (const auto& tr : traces)
    if (tr.delta.rows() != l || tr.delta.cols() != e)
      throw DimensionError("score_delta: head delta " + shape_str(tr.delta.shape()) + " vs " +
                           shape_str(traces[0].delta.shape()));
  ImportanceScores out{std::vector<float>(l, 0.0f), Indicator::delta};
  std::vector<float> summed(e);
  for (std::size_t t = 0; t < l; ++t) {
    std::ranges::fill(summed, 0.0f);
    for (const auto& tr : traces) {
      auto row = tr.delta.row(t);
      for (std::size_t c = 0; c < e; ++c) summed[c] += row[c];
    }
    float total = 0.0f;
    for (float v : summed) total += v;
    out.scores[t] = total / static_cast<float>(e);
  }
  return out;
}

// One head's scan input and its B or C projection weights.
struct ProjectionSource {
  const DenseArray& input;  // L x E
  const DenseArray& weight; // E x N
};

// Mean over the state extent of sum_heads (x_t W), W being W_B or W_C.
inline ImportanceScores score_projection(std::span<const ProjectionSource> heads, Indicator mode) {
  if (mode != Indicator::b_proj && mode != Indicator::c_proj)
    throw ConfigError("score_projection: mode must be b or c");
  if (heads.empty()) throw DimensionError("score_projection: no scanning heads");
  const std::size_t l = heads[0].input.rows(), n = heads[0].weight.cols();
  DenseArray summed = DenseArray::matrix(l, n);
  for (const auto& h : heads) {
    const DenseArray proj = matmul(h.input, h.weight);
    if (proj.rows() != l || proj.cols() != n)
      throw DimensionError("score_projection: head projection " + shape_str(proj.shape()) + " vs " +
                           shape_str(summed.shape()));
    for (std::size_t i = 0; i < summed.size(); ++i) summed[i] += proj[i];
  }
  ImportanceScores out{std::vector<float>(l, 0.0f), mode};
  for (std::size_t t = 0; t < l; ++t) {
    float total = 0.0f;
    for (float v : summed.row(t)) total += v;
    out.scores[t] = n ? total / static_cast<float>(n) : 0.0f;
  }
  return out;
}

inline ImportanceScores score_projection(const DenseArray& x, const DenseArray& w, Indicator mode) {
  const ProjectionSource one{x, w};
  return score_projection(std::span<const ProjectionSource>(&one, 1), mode);
}

inline ImportanceScores score_hidden(const DenseArray& x) {
  require_matrix(x, "score_hidden");
  ImportanceScores out{std::vector<float>(x.rows(), 0.0f), Indicator::hidden_x};
  for (std::size_t t = 0; t < x.rows(); ++t) {
    float total = 0.0f;
    for (float v : x.row(t)) total += v;
    out.scores[t] = total / static_cast<float>(x.cols());
  }
  return out;
}

// Cosine similarity to the CLS row; the CLS row itself scores +inf.
inline ImportanceScores score_cls_similarity(const DenseArray& x, std::size_t cls_row) {
  require_matrix(x, "score_cls_similarity");
  if (cls_row >= x.rows())
    throw IndexError("score_cls_similarity: cls row " + std::to_string(cls_row) + " out of range for " +
                     std::to_string(x.rows()) + " tokens");
  ImportanceScores out{std::vector<float>(x.rows(), 0.0f), Indicator::cls_sim};
  const auto cls = x.row(cls_row);
  for (std::size_t t = 0; t < x.rows(); ++t)
    out.scores[t] = t == cls_row ? std::numeric_limits<float>::infinity() : cosine_similarity(cls, x.row(t));
  return out;
}

}  // namespace mtr
