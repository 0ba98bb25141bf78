// SPDX-License-Identifier: Apache-2.0
//
// A small Vision-Mamba classifier: patch embedding, a CLS token, a stack of
// bidirectional SSM blocks with token reduction hooks, and a linear head.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mtr/checkpoint.hpp"
#include "mtr/errors.hpp"
#include "mtr/flops.hpp"
#include "mtr/image.hpp"
#include "mtr/importance.hpp"
#include "mtr/reduction.hpp"
#include "mtr/ssm.hpp"
#include "mtr/tensor.hpp"

namespace mtr {

enum class ClsPosition { middle, front, none };

inline const char* to_string(ClsPosition p) {
  switch (p) {
    case ClsPosition::middle: return "middle";
    case ClsPosition::front: return "front";
    case ClsPosition::none: return "none";
  }
  return "?";
}

inline ClsPosition cls_position_from_string(const std::string& s) {
  if (s == "middle") return ClsPosition::middle;
  if (s == "front") return ClsPosition::front;
  if (s == "none") return ClsPosition::none;
  throw ConfigError("unknown cls_position '" + s + "'");
}

struct ModelConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t channels = 3;
  std::size_t feat_dim = 192;
  std::size_t expand = 2;
  std::size_t state_dim = 16;
  std::size_t delta_rank = 0;  // 0 selects ceil(feat_dim / 16)
  std::size_t depth = 24;
  std::size_t class_count = 1000;
  std::size_t conv_width = kDefaultConvWidth;
  ClsPosition cls_position = ClsPosition::middle;
  std::vector<ScanDirection> heads{ScanDirection::forward, ScanDirection::backward};

  std::size_t inner_dim() const noexcept { return expand * feat_dim; }
  std::size_t rank() const noexcept { return delta_rank ? delta_rank : (feat_dim + 15) / 16; }
  std::size_t grid() const noexcept { return image_size / patch_size; }
  std::size_t patch_count() const noexcept { return grid() * grid(); }
  std::size_t patch_values() const noexcept { return patch_size * patch_size * channels; }
  bool has_cls() const noexcept { return cls_position != ClsPosition::none; }

  // Row the CLS token occupies in the embedded sequence.
  std::optional<std::size_t> cls_slot() const noexcept {
    switch (cls_position) {
      case ClsPosition::middle: return patch_count() / 2;
      case ClsPosition::front: return 0;
      case ClsPosition::none: return std::nullopt;
    }
    return std::nullopt;
  }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("image_size must be a positive multiple of patch_size");
    if (depth == 0) throw ConfigError("depth must be at least 1");
    if (feat_dim == 0 || expand == 0 || state_dim == 0 || channels == 0 || class_count == 0 || conv_width == 0)
      throw ConfigError("model extents must be positive");
    if (heads.empty()) throw ConfigError("at least one scanning head is required");
  }

  BlockDims block_dims() const {
    return {feat_dim, inner_dim(), state_dim, rank(), heads.size(), conv_width};
  }

  FlopsModel flops_model() const {
    FlopsModel m;
    m.dims = block_dims();
    m.depth = depth;
    m.patch_count = patch_count();
    m.has_cls = has_cls();
    m.patch_values = patch_values();
    m.class_count = class_count;
    return m;
  }

  // Maps a token's orig_index back to its raster patch index.
  std::optional<std::size_t> patch_of(std::int64_t orig_index) const {
    const auto slot = cls_slot();
    const auto o = static_cast<std::size_t>(orig_index);
    if (!slot) return o;
    if (o == *slot) return std::nullopt;
    return o < *slot ? o : o - 1;
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json heads = nlohmann::json::array();
  for (auto h : c.heads) heads.push_back(to_string(h));
  return {{"image_size", c.image_size},   {"patch_size", c.patch_size}, {"channels", c.channels},
          {"feat_dim", c.feat_dim},       {"expand", c.expand},         {"state_dim", c.state_dim},
          {"delta_rank", c.rank()},       {"depth", c.depth},           {"class_count", c.class_count},
          {"conv_width", c.conv_width},   {"cls_position", to_string(c.cls_position)},
          {"heads", heads}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.feat_dim = j.at("feat_dim").get<std::size_t>();
    c.expand = j.at("expand").get<std::size_t>();
    c.state_dim = j.at("state_dim").get<std::size_t>();
    c.delta_rank = j.at("delta_rank").get<std::size_t>();
    c.depth = j.at("depth").get<std::size_t>();
    c.class_count = j.at("class_count").get<std::size_t>();
    c.conv_width = j.value("conv_width", kDefaultConvWidth);
    c.cls_position = cls_position_from_string(j.at("cls_position").get<std::string>());
    c.heads.clear();
    for (const auto& h : j.at("heads")) c.heads.push_back(scan_direction_from_string(h.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config JSON: ") + e.what());
  }
  c.validate();
  return c;
}

struct ModelWeights {
  DenseArray patch_proj;  // patch_values x D
  std::vector<float> patch_bias;
  std::vector<float> cls_token;
  std::vector<SsmBlockParams> blocks;
  std::vector<float> norm_scale;
  std::vector<float> norm_bias;
  DenseArray head;  // D x classes
  std::vector<float> head_bias;
};

struct ForwardOptions {
  Indicator indicator = Indicator::delta;
  ReduceOptions reduce;
  bool diagnostics = true;  // group membership per reduction layer
};

struct LayerDiagnostics {
  std::size_t layer = 0;
  std::size_t tokens = 0;  // entering the block
  std::uint64_t flops = 0;
  bool reduced = false;
  // orig_index sets, filled at reduction layers when diagnostics are on
  std::vector<std::int64_t> keep;
  std::vector<std::int64_t> target;
  std::vector<std::int64_t> merged;
  std::vector<std::int64_t> pruned;
};

struct Diagnostics {
  std::vector<LayerDiagnostics> layers;
  std::size_t final_tokens = 0;
  std::uint64_t total_flops = 0;

  std::vector<std::size_t> token_counts() const {
    std::vector<std::size_t> out;
    out.reserve(layers.size());
    for (const auto& l : layers) out.push_back(l.tokens);
    return out;
  }
};

struct ForwardResult {
  std::vector<float> logits;
  Diagnostics diagnostics;
};

class Model {
 public:
  Model(ModelConfig cfg, ModelWeights w) : cfg_(std::move(cfg)), w_(std::move(w)) { validate(); }

  // Weights from a seeded generator:
  //   patch / in / head projections  U(+-1/sqrt(fan_in))
  //   out projection                 U(+-0.5/sqrt(E))
  //   a_log[e][n] = log(n + 1), skip_d = 1, conv U(+-1/sqrt(width))
  //   w_b, w_c, w_1 U(+-1/sqrt(E)), w_2 U(+-1/sqrt(R))
  //   patch bias U(+-0.1), CLS U(+-0.5), norms scale 1 bias 0, head bias 0
  static Model random(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    auto uniform = [&](float bound) {
      return std::uniform_real_distribution<float>(-bound, bound)(rng);
    };
    auto fill = [&](std::size_t rows, std::size_t cols, float bound) {
      DenseArray m = DenseArray::matrix(rows, cols);
      for (float& v : m.values()) v = uniform(bound);
      return m;
    };
    auto vec = [&](std::size_t n, float bound) {
      std::vector<float> v(n);
      for (float& x : v) x = uniform(bound);
      return v;
    };
    auto inv_sqrt = [](std::size_t n) { return 1.0f / std::sqrt(static_cast<float>(n)); };

    const std::size_t d = cfg.feat_dim, e = cfg.inner_dim(), n = cfg.state_dim, r = cfg.rank();
    ModelWeights w;
    w.patch_proj = fill(cfg.patch_values(), d, inv_sqrt(cfg.patch_values()));
    w.patch_bias = vec(d, 0.1f);
    if (cfg.has_cls()) w.cls_token = vec(d, 0.5f);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      SsmBlockParams b;
      b.norm_scale.assign(d, 1.0f);
      b.norm_bias.assign(d, 0.0f);
      b.in_proj = fill(d, 2 * e, inv_sqrt(d));
      b.out_proj = fill(e, d, 0.5f * inv_sqrt(e));
      for (auto dir : cfg.heads) {
        SsmHeadParams h;
        h.a_log = DenseArray::matrix(e, n);
        for (std::size_t c = 0; c < e; ++c)
          for (std::size_t s = 0; s < n; ++s) h.a_log(c, s) = std::log(static_cast<float>(s + 1));
        h.w_b = fill(e, n, inv_sqrt(e));
        h.w_c = fill(e, n, inv_sqrt(e));
        h.w_1 = fill(e, r, inv_sqrt(e));
        h.w_2 = fill(r, e, inv_sqrt(r));
        h.skip_d.assign(e, 1.0f);
        h.conv_kernel = fill(e, cfg.conv_width, inv_sqrt(cfg.conv_width));
        h.direction = dir;
        b.heads.push_back(std::move(h));
      }
      w.blocks.push_back(std::move(b));
    }
    w.norm_scale.assign(d, 1.0f);
    w.norm_bias.assign(d, 0.0f);
    w.head = fill(d, cfg.class_count, inv_sqrt(d));
    w.head_bias.assign(cfg.class_count, 0.0f);
    return Model(cfg, std::move(w));
  }

  static Model from_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(ckpt.meta);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    const ModelConfig cfg = config_from_json(meta);
    const std::size_t d = cfg.feat_dim, e = cfg.inner_dim(), n = cfg.state_dim, r = cfg.rank();

    auto entry = [&](const std::string& name, std::vector<std::uint32_t> shape) -> const CheckpointEntry& {
      const CheckpointEntry* en = ckpt.find(name);
      if (!en) throw FormatError("checkpoint is missing entry '" + name + "'");
      if (en->shape != shape) throw DimensionError("checkpoint entry '" + name + "' has an unexpected shape");
      return *en;
    };
    auto mat = [&](const std::string& name, std::size_t rows, std::size_t cols) {
      const auto& en = entry(name, {static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols)});
      return DenseArray({rows, cols}, en.values);
    };
    auto vec = [&](const std::string& name, std::size_t len) {
      return entry(name, {static_cast<std::uint32_t>(len)}).values;
    };

    ModelWeights w;
    w.patch_proj = mat("patch_embed.weight", cfg.patch_values(), d);
    w.patch_bias = vec("patch_embed.bias", d);
    if (cfg.has_cls()) w.cls_token = vec("cls_token", d);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      SsmBlockParams b;
      b.norm_scale = vec(p + "norm.scale", d);
      b.norm_bias = vec(p + "norm.bias", d);
      b.in_proj = mat(p + "in_proj", d, 2 * e);
      b.out_proj = mat(p + "out_proj", e, d);
      for (std::size_t hi = 0; hi < cfg.heads.size(); ++hi) {
        const std::string q = p + "heads." + std::to_string(hi) + ".";
        SsmHeadParams h;
        h.a_log = mat(q + "a_log", e, n);
        h.w_b = mat(q + "w_b", e, n);
        h.w_c = mat(q + "w_c", e, n);
        h.w_1 = mat(q + "w_1", e, r);
        h.w_2 = mat(q + "w_2", r, e);
        h.skip_d = vec(q + "skip_d", e);
        h.conv_kernel = mat(q + "conv", e, cfg.conv_width);
        h.direction = cfg.heads[hi];
        b.heads.push_back(std::move(h));
      }
      w.blocks.push_back(std::move(b));
    }
    w.norm_scale = vec("norm.scale", d);
    w.norm_bias = vec("norm.bias", d);
    w.head = mat("head.weight", d, cfg.class_count);
    w.head_bias = vec("head.bias", cfg.class_count);
    return Model(cfg, std::move(w));
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.meta = to_json(cfg_).dump();
    auto put_mat = [&](const std::string& name, const DenseArray& m) {
      ckpt.add(name, {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, m.data());
    };
    auto put_vec = [&](const std::string& name, const std::vector<float>& v) {
      ckpt.add(name, {static_cast<std::uint32_t>(v.size())}, v);
    };
    put_mat("patch_embed.weight", w_.patch_proj);
    put_vec("patch_embed.bias", w_.patch_bias);
    if (cfg_.has_cls()) put_vec("cls_token", w_.cls_token);
    for (std::size_t l = 0; l < w_.blocks.size(); ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      const auto& b = w_.blocks[l];
      put_vec(p + "norm.scale", b.norm_scale);
      put_vec(p + "norm.bias", b.norm_bias);
      put_mat(p + "in_proj", b.in_proj);
      put_mat(p + "out_proj", b.out_proj);
      for (std::size_t hi = 0; hi < b.heads.size(); ++hi) {
        const std::string q = p + "heads." + std::to_string(hi) + ".";
        const auto& h = b.heads[hi];
        put_mat(q + "a_log", h.a_log);
        put_mat(q + "w_b", h.w_b);
        put_mat(q + "w_c", h.w_c);
        put_mat(q + "w_1", h.w_1);
        put_mat(q + "w_2", h.w_2);
        put_vec(q + "skip_d", h.skip_d);
        put_mat(q + "conv", h.conv_kernel);
      }
    }
    put_vec("norm.scale", w_.norm_scale);
    put_vec("norm.bias", w_.norm_bias);
    put_mat("head.weight", w_.head);
    put_vec("head.bias", w_.head_bias);
    return ckpt;
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const ModelWeights& weights() const noexcept { return w_; }

  TokenSequence patch_embed(const Image& img) const {
    if (img.height != cfg_.image_size || img.width != cfg_.image_size || img.channels != cfg_.channels)
      throw DimensionError("patch_embed: image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                           "x" + std::to_string(img.channels) + ", model expects " + std::to_string(cfg_.image_size) +
                           "x" + std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.channels));
    if (img.values.size() != img.height * img.width * img.channels)
      throw DimensionError("patch_embed: image buffer size does not match its extents");
    const std::size_t ps = cfg_.patch_size, g = cfg_.grid(), c = cfg_.channels;
    DenseArray patches = DenseArray::matrix(cfg_.patch_count(), cfg_.patch_values());
    for (std::size_t py = 0; py < g; ++py)
      for (std::size_t px = 0; px < g; ++px) {
        float* dst = patches.row(py * g + px).data();
        for (std::size_t dy = 0; dy < ps; ++dy)
          for (std::size_t dx = 0; dx < ps; ++dx)
            for (std::size_t ch = 0; ch < c; ++ch) *dst++ = img.at(py * ps + dy, px * ps + dx, ch);
      }
    DenseArray tokens = matmul(patches, w_.patch_proj);
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
      auto row = tokens.row(t);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += w_.patch_bias[j];
    }
    const auto slot = cfg_.cls_slot();
    if (!slot) return TokenSequence::from_features(std::move(tokens));

    DenseArray with_cls = DenseArray::matrix(tokens.rows() + 1, tokens.cols());
    for (std::size_t r = 0, src = 0; r < with_cls.rows(); ++r) {
      if (r == *slot)
        std::ranges::copy(w_.cls_token, with_cls.row(r).begin());
      else
        std::ranges::copy(tokens.row(src++), with_cls.row(r).begin());
    }
    return TokenSequence::from_features(std::move(with_cls), static_cast<std::int64_t>(*slot));
  }

  ForwardResult forward(const Image& img, const ReductionPlan* plan = nullptr, const ForwardOptions& opt = {}) const {
    if (plan) validate_layers(plan->reduce_at_layers, cfg_.depth);
    const FlopsModel fm = cfg_.flops_model();
    ForwardResult res;
    TokenSequence seq = patch_embed(img);
    auto next_reduction = plan ? plan->reduce_at_layers.begin() : std::vector<std::size_t>::const_iterator{};
    const bool any_plan = plan != nullptr;

    res.diagnostics.total_flops = fm.patch_embed_flops();
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      LayerDiagnostics ld;
      ld.layer = l;
      ld.tokens = seq.size();
      ld.flops = block_flops(seq.size(), fm.dims);
      res.diagnostics.total_flops += ld.flops;

      BlockOutput out = mamba_block(seq.features, w_.blocks[l]);
      if (!out.y.all_finite()) throw NumericError("non-finite activations after block " + std::to_string(l), static_cast<int>(l));

      const bool reduce_here = any_plan && next_reduction != plan->reduce_at_layers.end() && *next_reduction == l;
      if (!reduce_here) {
        seq.features = std::move(out.y);
        res.diagnostics.layers.push_back(std::move(ld));
        continue;
      }
      ++next_reduction;
      const ImportanceScores scores = score(opt.indicator, seq, out, l);
      TokenSequence block_out{std::move(out.y), std::move(seq.orig_index), std::move(seq.weight), seq.cls_index};
      LayerReduction red = reduce_layer_detailed(block_out, scores.scores, plan->k, plan->strategy, opt.reduce);
      ld.reduced = true;
      if (opt.diagnostics) record_groups(ld, block_out, red);
      seq = std::move(red.sequence);
      res.diagnostics.layers.push_back(std::move(ld));
    }
    res.diagnostics.final_tokens = seq.size();
    res.diagnostics.total_flops += fm.head_flops(seq.size());
    res.logits = classify(seq);
    return res;
  }

  // Independent forward passes spread over `threads` workers.
  std::vector<ForwardResult> forward_batch(const std::vector<Image>& images, const ReductionPlan* plan,
                                           const ForwardOptions& opt, unsigned threads = 1) const {
    std::vector<ForwardResult> out(images.size());
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(images.size())));
    if (threads <= 1) {
      for (std::size_t i = 0; i < images.size(); ++i) out[i] = forward(images[i], plan, opt);
      return out;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < images.size(); i += threads) out[i] = forward(images[i], plan, opt);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    return out;
  }

 private:
  void validate() const {
    cfg_.validate();
    const std::size_t d = cfg_.feat_dim;
    if (w_.patch_proj.rows() != cfg_.patch_values() || w_.patch_proj.cols() != d || w_.patch_bias.size() != d)
      throw DimensionError("model: patch embedding does not match config");
    if (cfg_.has_cls() && w_.cls_token.size() != d) throw DimensionError("model: CLS embedding must have length D");
    if (w_.blocks.size() != cfg_.depth) throw DimensionError("model: block count does not match depth");
    for (const auto& b : w_.blocks) {
      b.validate();
      if (b.model_dim() != d || b.inner_dim() != cfg_.inner_dim() || b.heads.size() != cfg_.heads.size())
        throw DimensionError("model: block extents do not match config");
    }
    if (w_.norm_scale.size() != d || w_.norm_bias.size() != d) throw DimensionError("model: final norm must have length D");
    if (w_.head.rows() != d || w_.head.cols() != cfg_.class_count || w_.head_bias.size() != cfg_.class_count)
      throw DimensionError("model: classifier does not match config");
  }

  ImportanceScores score(Indicator ind, const TokenSequence& block_in, const BlockOutput& out, std::size_t l) const {
    switch (ind) {
      case Indicator::delta:
        return score_delta(out.traces);
      case Indicator::b_proj:
      case Indicator::c_proj: {
        std::vector<ProjectionSource> src;
        const auto& heads = w_.blocks[l].heads;
        for (std::size_t h = 0; h < heads.size(); ++h)
          src.push_back({out.traces[h].input, ind == Indicator::b_proj ? heads[h].w_b : heads[h].w_c});
        return score_projection(src, ind);
      }
      case Indicator::hidden_x:
        return score_hidden(block_in.features);
      case Indicator::cls_sim: {
        const auto row = block_in.cls_row();
        if (!row) throw ConfigError("the cls indicator needs a model with a CLS token");
        return score_cls_similarity(out.y, *row);
      }
    }
    throw ConfigError("unknown indicator");
  }

  static void record_groups(LayerDiagnostics& ld, const TokenSequence& seq, const LayerReduction& red) {
    auto ids = [&](const std::vector<std::size_t>& rows) {
      std::vector<std::int64_t> out;
      out.reserve(rows.size());
      for (auto r : rows) out.push_back(seq.orig_index[r]);
      std::ranges::sort(out);
      return out;
    };
    ld.keep = ids(red.partition.keep_idx);
    ld.target = ids(red.partition.target_idx);
    std::vector<std::size_t> merged;
    for (const auto& e : red.mapping.edges) merged.push_back(e.source);
    std::vector<std::size_t> pruned;
    for (auto s : red.partition.source_idx)
      if (std::ranges::find(merged, s) == merged.end()) pruned.push_back(s);
    ld.merged = ids(merged);
    ld.pruned = ids(pruned);
  }

  std::vector<float> classify(const TokenSequence& seq) const {
    const std::size_t d = cfg_.feat_dim;
    DenseArray pooled = DenseArray::matrix(1, d);
    if (const auto row = seq.cls_row()) {
      std::ranges::copy(seq.features.row(*row), pooled.row(0).begin());
    } else {
      double mass = 0.0;
      std::vector<double> acc(d, 0.0);
      for (std::size_t t = 0; t < seq.size(); ++t) {
        const double w = seq.weight[t];
        auto f = seq.features.row(t);
        for (std::size_t j = 0; j < d; ++j) acc[j] += w * f[j];
        mass += w;
      }
      for (std::size_t j = 0; j < d; ++j) pooled(0, j) = static_cast<float>(acc[j] / mass);
    }
    const DenseArray normed = layernorm(pooled, w_.norm_scale, w_.norm_bias);
    DenseArray logits = matmul(normed, w_.head);
    std::vector<float> out(logits.values().begin(), logits.values().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w_.head_bias[i];
    return out;
  }

  ModelConfig cfg_;
  ModelWeights w_;
};

}  // namespace mtr
