// SPDX-License-Identifier: Apache-2.0
//
// Run reports, throughput sweeps and token-retention masks for the CLI.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtr/flops.hpp"
#include "mtr/image.hpp"
#include "mtr/model.hpp"

namespace mtr {

inline constexpr int kReportSchemaVersion = 1;

struct RunReport {
  ModelConfig config;
  ReductionPlan plan;
  Indicator indicator = Indicator::delta;
  Diagnostics diagnostics;
  std::uint64_t baseline_flops = 0;
  double seconds = 0.0;
  std::vector<float> logits;

  std::uint64_t reduced_flops() const noexcept { return diagnostics.total_flops; }
  // From the executed token counts, not from the plan.
  double achieved_reduction() const { return reduction_fraction(baseline_flops, reduced_flops()); }
  double throughput() const { return seconds > 0.0 ? 1.0 / seconds : 0.0; }
};

inline RunReport make_run_report(const Model& model, const ReductionPlan& plan, Indicator indicator,
                                 const ForwardResult& fwd, double seconds) {
  const FlopsModel fm = model.config().flops_model();
  RunReport r;
  r.config = model.config();
  r.plan = plan;
  r.indicator = indicator;
  r.diagnostics = fwd.diagnostics;
  r.baseline_flops = total_flops(fm, simulate_tokens(fm, {}, 0.0));
  r.seconds = seconds;
  r.logits = fwd.logits;
  return r;
}

inline std::vector<std::size_t> top_k(const std::vector<float>& logits, std::size_t k) {
  std::vector<std::size_t> idx = argsort_desc(logits);
  idx.resize(std::min(k, idx.size()));
  return idx;
}

inline nlohmann::json to_json(const LayerDiagnostics& l) {
  nlohmann::json j{{"layer", l.layer}, {"tokens", l.tokens}, {"flops", l.flops}, {"reduced", l.reduced}};
  if (l.reduced) {
    j["keep"] = l.keep;
    j["target"] = l.target;
    j["merged"] = l.merged;
    j["pruned"] = l.pruned;
  }
  return j;
}

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json plan = to_json(r.plan);
  plan["indicator"] = to_string(r.indicator);
  plan["within_tolerance"] = r.plan.within_tolerance;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.diagnostics.layers) layers.push_back(to_json(l));
  nlohmann::json top = nlohmann::json::array();
  for (auto c : top_k(r.logits, 5)) top.push_back({{"class", c}, {"logit", r.logits[c]}});
  return {{"schema_version", kReportSchemaVersion},
          {"config", to_json(r.config)},
          {"plan", plan},
          {"token_counts", r.diagnostics.token_counts()},
          {"final_tokens", r.diagnostics.final_tokens},
          {"flops", {{"baseline", r.baseline_flops}, {"reduced", r.reduced_flops()}}},
          {"achieved_reduction", r.achieved_reduction()},
          {"throughput", {{"sequences_per_second", r.throughput()}, {"seconds", r.seconds}}},
          {"logits", r.logits},
          {"top5", top},
          {"diagnostics", layers}};
}

// Keep patches tinted red, target blue, source and previously removed
// patches black. A layer that removed nothing renders the input unchanged.
inline RgbImage render_retention_mask(const RgbImage& img, const ModelConfig& cfg, const LayerDiagnostics& layer) {
  if (img.width != cfg.image_size || img.height != cfg.image_size)
    throw DimensionError("mask: image does not match the model resolution");
  if (!layer.reduced) throw ConfigError("mask: layer " + std::to_string(layer.layer) + " is not a reduction layer");
  if (layer.merged.empty() && layer.pruned.empty()) return img;

  enum class Group : std::uint8_t { removed, keep, target, source };
  std::vector<Group> patch(cfg.patch_count(), Group::removed);
  auto mark = [&](const std::vector<std::int64_t>& ids, Group g) {
    for (auto id : ids)
      if (const auto p = cfg.patch_of(id)) patch.at(*p) = g;
  };
  mark(layer.keep, Group::keep);
  mark(layer.target, Group::target);
  mark(layer.merged, Group::source);
  mark(layer.pruned, Group::source);

  RgbImage out = img;
  const std::size_t ps = cfg.patch_size, g = cfg.grid();
  for (std::size_t py = 0; py < g; ++py)
    for (std::size_t px = 0; px < g; ++px) {
      const Group grp = patch[py * g + px];
      for (std::size_t y = py * ps; y < (py + 1) * ps; ++y)
        for (std::size_t x = px * ps; x < (px + 1) * ps; ++x)
          for (std::size_t c = 0; c < 3; ++c) {
            const unsigned v = img.at(y, x, c);
            unsigned o = 0;
            if (grp == Group::keep) o = c == 0 ? (v + 255) / 2 : v / 2;
            if (grp == Group::target) o = c == 2 ? (v + 255) / 2 : v / 2;
            out.at(y, x, c) = static_cast<std::uint8_t>(o);
          }
    }
  return out;
}

struct BenchConfig {
  std::vector<double> ratios{0.0, 0.2, 0.3, 0.4};
  std::vector<std::size_t> layers;  // empty selects the default set
  Strategy strategy = Strategy::merge;
  Indicator indicator = Indicator::delta;
  std::size_t batch = 1;
  std::size_t repeats = 3;
  std::size_t warmup = 1;
  unsigned threads = 1;
  bool diagnostics = false;
  std::uint64_t image_seed = 0;
};

struct BenchRow {
  double ratio = 0.0;
  double k = 0.0;
  double achieved = 0.0;
  double throughput_mean = 0.0;  // images per second
  double throughput_std = 0.0;
  std::uint64_t total_flops = 0;
};

inline const char* kBenchCsvHeader = "ratio,k,achieved,throughput_mean,throughput_std,total_flops";

inline std::string to_csv(const BenchRow& r) {
  std::ostringstream os;
  os << std::setprecision(6) << r.ratio << ',' << std::setprecision(9) << r.k << ',' << std::setprecision(6)
     << r.achieved << ',' << r.throughput_mean << ',' << r.throughput_std << ',' << r.total_flops;
  return os.str();
}

// Plans are solved and inputs generated before the clock starts.
inline std::vector<BenchRow> run_benchmark(const Model& model, const BenchConfig& bc) {
  const ModelConfig& cfg = model.config();
  const FlopsModel fm = cfg.flops_model();
  const auto layers = bc.layers.empty() ? default_reduction_layers(cfg.depth) : bc.layers;

  std::vector<Image> images;
  for (std::size_t i = 0; i < std::max<std::size_t>(bc.batch, 1); ++i)
    images.push_back(Image::from_rgb(synthetic_image(cfg.image_size, cfg.image_size, bc.image_seed + i)));

  ForwardOptions opt;
  opt.indicator = bc.indicator;
  opt.diagnostics = bc.diagnostics;

  std::vector<BenchRow> rows;
  for (double ratio : bc.ratios) {
    const ReductionPlan plan = solve_k(ratio, layers, fm, bc.strategy);
    BenchRow row{ratio, plan.k, plan.achieved, 0.0, 0.0, total_flops(fm, simulate_tokens(fm, layers, plan.k))};
    for (std::size_t w = 0; w < bc.warmup; ++w) model.forward_batch(images, &plan, opt, bc.threads);
    std::vector<double> tput;
    for (std::size_t r = 0; r < std::max<std::size_t>(bc.repeats, 1); ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      model.forward_batch(images, &plan, opt, bc.threads);
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
      tput.push_back(static_cast<double>(images.size()) / dt.count());
    }
    const double mean = std::accumulate(tput.begin(), tput.end(), 0.0) / static_cast<double>(tput.size());
    double var = 0.0;
    for (double t : tput) var += (t - mean) * (t - mean);
    row.throughput_mean = mean;
    row.throughput_std = tput.size() > 1 ? std::sqrt(var / static_cast<double>(tput.size() - 1)) : 0.0;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mtr
