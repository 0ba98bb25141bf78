// SPDX-License-Identifier: Apache-2.0
//
// Importance-ranked token reduction. Tokens are split into keep / target /
// source groups (k, 1-2k, k of the reducible tokens), each source is folded
// into its most similar target (or dropped), and survivors are put back in
// their original sequence order since the scan that follows is order
// sensitive.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mtr/errors.hpp"
#include "mtr/importance.hpp"
#include "mtr/tensor.hpp"

namespace mtr {

enum class Strategy { merge, prune, hybrid };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::merge: return "merge";
    case Strategy::prune: return "prune";
    case Strategy::hybrid: return "hybrid";
  }
  return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "merge") return Strategy::merge;
  if (s == "prune") return Strategy::prune;
  if (s == "hybrid") return Strategy::hybrid;
  throw ConfigError("unknown strategy '" + s + "' (expected merge|prune|hybrid)");
}

struct TokenSequence {
  DenseArray features;                   // L x D
  std::vector<std::int64_t> orig_index;  // position in the original sequence
  std::vector<std::uint32_t> weight;     // how many original tokens each row stands for
  std::optional<std::int64_t> cls_index; // orig_index of the CLS token, never reduced

  static TokenSequence from_features(DenseArray f, std::optional<std::int64_t> cls = std::nullopt) {
    TokenSequence s;
    const std::size_t l = f.rows();
    s.features = std::move(f);
    s.orig_index.resize(l);
    std::iota(s.orig_index.begin(), s.orig_index.end(), std::int64_t{0});
    s.weight.assign(l, 1);
    s.cls_index = cls;
    return s;
  }

  std::size_t size() const noexcept { return orig_index.size(); }
  std::size_t dim() const noexcept { return features.cols(); }

  std::optional<std::size_t> cls_row() const {
    if (!cls_index) return std::nullopt;
    for (std::size_t i = 0; i < orig_index.size(); ++i)
      if (orig_index[i] == *cls_index) return i;
    throw CorruptionError("token sequence lost its CLS token (orig_index " + std::to_string(*cls_index) + ")");
  }

  std::size_t reducible_count() const { return size() - (cls_row() ? 1 : 0); }

  std::uint64_t total_weight() const {
    return std::accumulate(weight.begin(), weight.end(), std::uint64_t{0});
  }

  void check_shape() const {
    require_matrix(features, "token sequence");
    if (features.rows() != orig_index.size() || weight.size() != orig_index.size())
      throw DimensionError("token sequence: " + std::to_string(features.rows()) + " feature rows, " +
                           std::to_string(orig_index.size()) + " indices, " + std::to_string(weight.size()) +
                           " weights");
  }
};

// Row indices into a sequence, each list in descending importance order.
struct GroupPartition {
  std::vector<std::size_t> keep_idx;
  std::vector<std::size_t> target_idx;
  std::vector<std::size_t> source_idx;
};

struct MergeEdge {
  std::size_t source;  // row in the input sequence
  std::size_t target;  // row in the input sequence
  friend bool operator==(const MergeEdge&, const MergeEdge&) = default;
};

struct MergeMapping {
  std::vector<MergeEdge> edges;
};

enum class MergeWeighting {
  multiplicity,  // mean over the original tokens each row represents
  uniform,       // plain mean of the rows being merged
};

struct ReduceOptions {
  MergeWeighting weighting = MergeWeighting::multiplicity;
  double hybrid_prune_fraction = 0.5;
};

// floor(k * reducible), validating k in [0, 0.5). The small slack keeps
// decimal ratios exact: 0.35 * 180 is 62.999999999999993 in binary.
inline std::size_t group_size(double k, std::size_t reducible) {
  if (!(k >= 0.0 && k < 0.5))
    throw InvalidRatioError("grouping ratio k must lie in [0, 0.5), got " + std::to_string(k));
  return static_cast<std::size_t>(std::floor(k * static_cast<double>(reducible) + 1e-9));
}

// Ranks every row except `excluded` by score and splits the ranking into
// top n_k (keep), bottom n_k (source) and the rest (target).
inline GroupPartition partition(std::span<const float> scores, double k,
                                std::optional<std::size_t> excluded = std::nullopt) {
  std::vector<std::size_t> rows;
  rows.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (!excluded || i != *excluded) rows.push_back(i);
  const std::size_t n_k = group_size(k, rows.size());

  std::vector<float> sub(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) sub[i] = scores[rows[i]];
  const auto order = argsort_desc(sub);

  GroupPartition p;
  const std::size_t n = rows.size();
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t row = rows[order[r]];
    if (r < n_k)
      p.keep_idx.push_back(row);
    else if (r >= n - n_k)
      p.source_idx.push_back(row);
    else
      p.target_idx.push_back(row);
  }
  return p;
}

// Each source's most cosine-similar target; ties go to the lower orig_index.
inline MergeMapping compute_mapping(const TokenSequence& seq, std::span<const std::size_t> sources,
                                    std::span<const std::size_t> targets) {
  MergeMapping m;
  if (sources.empty()) return m;
  if (targets.empty()) throw InvalidPartitionError("bipartite merge: target group is empty");
  m.edges.reserve(sources.size());
  for (std::size_t s : sources) {
    const auto src = seq.features.row(s);
    std::size_t best = targets[0];
    float best_sim = cosine_similarity(src, seq.features.row(best));
    for (std::size_t i = 1; i < targets.size(); ++i) {
      const std::size_t t = targets[i];
      const float sim = cosine_similarity(src, seq.features.row(t));
      if (sim > best_sim || (sim == best_sim && seq.orig_index[t] < seq.orig_index[best])) {
        best = t;
        best_sim = sim;
      }
    }
    m.edges.push_back({s, best});
  }
  return m;
}

// Removes every source row; sources named in `mapping` are averaged into
// their target first, the others are simply dropped. Surviving rows keep
// their relative order, and targets that received nothing are copied as is.
inline TokenSequence apply_merge(const TokenSequence& seq, const GroupPartition& part, const MergeMapping& mapping,
                                 const ReduceOptions& opt = {}) {
  seq.check_shape();
  const std::size_t l = seq.size(), d = seq.dim();
  std::vector<char> dropped(l, 0);
  for (std::size_t s : part.source_idx) {
    if (s >= l) throw InvalidPartitionError("source row " + std::to_string(s) + " out of range");
    dropped[s] = 1;
  }
  std::vector<std::vector<std::size_t>> incoming(l);
  for (const auto& e : mapping.edges) {
    if (e.source >= l || e.target >= l || !dropped[e.source] || dropped[e.target])
      throw InvalidPartitionError("merge edge (" + std::to_string(e.source) + " -> " + std::to_string(e.target) +
                                  ") does not join a source to a surviving row");
    incoming[e.target].push_back(e.source);
  }

  TokenSequence out;
  out.cls_index = seq.cls_index;
  const std::size_t survivors = l - static_cast<std::size_t>(std::count(dropped.begin(), dropped.end(), 1));
  out.features = DenseArray::matrix(survivors, d);
  out.orig_index.reserve(survivors);
  out.weight.reserve(survivors);
  std::vector<double> acc(d);
  std::size_t o = 0;
  for (std::size_t r = 0; r < l; ++r) {
    if (dropped[r]) continue;
    auto dst = out.features.row(o++);
    out.orig_index.push_back(seq.orig_index[r]);
    if (incoming[r].empty()) {
      std::ranges::copy(seq.features.row(r), dst.begin());
      out.weight.push_back(seq.weight[r]);
      continue;
    }
    std::uint64_t mass = seq.weight[r];
    auto member_weight = [&](std::size_t row) {
      return opt.weighting == MergeWeighting::multiplicity ? static_cast<double>(seq.weight[row]) : 1.0;
    };
    double denom = member_weight(r);
    auto tf = seq.features.row(r);
    for (std::size_t c = 0; c < d; ++c) acc[c] = denom * tf[c];
    for (std::size_t s : incoming[r]) {
      const double w = member_weight(s);
      auto sf = seq.features.row(s);
      for (std::size_t c = 0; c < d; ++c) acc[c] += w * sf[c];
      denom += w;
      mass += seq.weight[s];
    }
    for (std::size_t c = 0; c < d; ++c) dst[c] = static_cast<float>(acc[c] / denom);
    out.weight.push_back(static_cast<std::uint32_t>(mass));
  }
  return out;
}

struct MergeResult {
  TokenSequence sequence;
  MergeMapping mapping;
};

inline MergeResult bipartite_merge(const TokenSequence& seq, const GroupPartition& part,
                                   const ReduceOptions& opt = {}) {
  MergeMapping m = compute_mapping(seq, part.source_idx, part.target_idx);
  TokenSequence merged = apply_merge(seq, part, m, opt);
  return {std::move(merged), std::move(m)};
}

inline TokenSequence prune(const TokenSequence& seq, const GroupPartition& part) {
  return apply_merge(seq, part, MergeMapping{});
}

// Prunes the lower-scored floor(fraction * |source|) sources and merges the rest.
inline MergeResult hybrid(const TokenSequence& seq, const GroupPartition& part, const ReduceOptions& opt = {}) {
  const std::size_t n_src = part.source_idx.size();
  const auto n_prune = static_cast<std::size_t>(std::floor(opt.hybrid_prune_fraction * static_cast<double>(n_src)));
  const std::span<const std::size_t> merged_sources(part.source_idx.data(), n_src - n_prune);
  MergeMapping m = compute_mapping(seq, merged_sources, part.target_idx);
  TokenSequence out = apply_merge(seq, part, m, opt);
  return {std::move(out), std::move(m)};
}

// Sorts rows by ascending orig_index.
inline TokenSequence reorder(const TokenSequence& seq) {
  seq.check_shape();
  const std::size_t l = seq.size();
  std::vector<std::size_t> order(l);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return seq.orig_index[a] < seq.orig_index[b]; });
  for (std::size_t i = 1; i < l; ++i)
    if (seq.orig_index[order[i]] == seq.orig_index[order[i - 1]])
      throw CorruptionError("reorder: duplicate orig_index " + std::to_string(seq.orig_index[order[i]]));
  TokenSequence out;
  out.cls_index = seq.cls_index;
  out.features = gather_rows(seq.features, order);
  out.orig_index.reserve(l);
  out.weight.reserve(l);
  for (std::size_t r : order) {
    out.orig_index.push_back(seq.orig_index[r]);
    out.weight.push_back(seq.weight[r]);
  }
  return out;
}

struct LayerReduction {
  TokenSequence sequence;
  GroupPartition partition;
  MergeMapping mapping;  // sources absent from the mapping were pruned
};

inline LayerReduction reduce_layer_detailed(const TokenSequence& seq, std::span<const float> scores, double k,
                                            Strategy strategy, const ReduceOptions& opt = {}) {
  seq.check_shape();
  if (scores.size() != seq.size())
    throw DimensionError("reduce_layer: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(seq.size()) + " tokens");
  LayerReduction r;
  r.partition = partition(scores, k, seq.cls_row());
  switch (strategy) {
    case Strategy::merge: {
      auto m = bipartite_merge(seq, r.partition, opt);
      r.sequence = std::move(m.sequence);
      r.mapping = std::move(m.mapping);
      break;
    }
    case Strategy::prune:
      r.sequence = prune(seq, r.partition);
      break;
    case Strategy::hybrid: {
      auto m = hybrid(seq, r.partition, opt);
      r.sequence = std::move(m.sequence);
      r.mapping = std::move(m.mapping);
      break;
    }
  }
  r.sequence = reorder(r.sequence);
  return r;
}

inline TokenSequence reduce_layer(const TokenSequence& seq, std::span<const float> scores, double k,
                                  Strategy strategy, const ReduceOptions& opt = {}) {
  return reduce_layer_detailed(seq, scores, k, strategy, opt).sequence;
}

inline TokenSequence reduce_layer(const TokenSequence& seq, const ImportanceScores& scores, double k,
                                  Strategy strategy, const ReduceOptions& opt = {}) {
  return reduce_layer(seq, std::span<const float>(scores.scores), k, strategy, opt);
}

}  // namespace mtr
