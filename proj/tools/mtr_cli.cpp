// SPDX-License-Identifier: Apache-2.0
//
// mtr: run, benchmark and visualise training-free token reduction on a toy
// Vision-Mamba classifier.
//
// Exit codes: 0 ok, 2 bad flags or plan, 3 I/O or file format, 4 numeric
// failure during inference.

#include <chrono>
#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mtr/mtr.hpp"

namespace {

struct ModelFlags {
  std::string ckpt;
  std::uint64_t seed = 0;
  mtr::ModelConfig cfg;
  std::string cls = "middle";
};

struct InputFlags {
  std::string image;
  std::optional<std::uint64_t> synthetic;
};

struct PlanFlags {
  double target = 0.0;
  std::string strategy = "merge";
  std::string indicator = "delta";
  std::string layers;
  bool uniform_merge = false;
};

void add_model_flags(CLI::App* cmd, ModelFlags& m) {
  cmd->add_option("--ckpt", m.ckpt, "Checkpoint file; without it a seeded random model is used");
  cmd->add_option("--model-seed", m.seed, "Seed for the random model")->capture_default_str();
  cmd->add_option("--image-size", m.cfg.image_size)->capture_default_str();
  cmd->add_option("--patch-size", m.cfg.patch_size)->capture_default_str();
  cmd->add_option("--dim", m.cfg.feat_dim, "Model width D")->capture_default_str();
  cmd->add_option("--expand", m.cfg.expand)->capture_default_str();
  cmd->add_option("--state", m.cfg.state_dim, "SSM state size N")->capture_default_str();
  cmd->add_option("--rank", m.cfg.delta_rank, "Timescale rank R (0 = ceil(D/16))")->capture_default_str();
  cmd->add_option("--depth", m.cfg.depth)->capture_default_str();
  cmd->add_option("--classes", m.cfg.class_count)->capture_default_str();
  cmd->add_option("--cls", m.cls, "CLS position: middle|front|none")->capture_default_str();
}

void add_input_flags(CLI::App* cmd, InputFlags& in) {
  auto* img = cmd->add_option("--image", in.image, "Input image (binary PPM, P6)");
  auto* syn = cmd->add_option("--synthetic", in.synthetic, "Seeded random input image");
  img->excludes(syn);
}

void add_plan_flags(CLI::App* cmd, PlanFlags& p) {
  cmd->add_option("--target-reduction", p.target, "Global FLOPs reduction target in [0,1)")->capture_default_str();
  cmd->add_option("--strategy", p.strategy, "merge|prune|hybrid")->capture_default_str();
  cmd->add_option("--indicator", p.indicator, "delta|b|c|x|cls")->capture_default_str();
  cmd->add_option("--layers", p.layers, "Comma-separated reduction layers (default: every 5th from 5)");
  cmd->add_flag("--uniform-merge", p.uniform_merge, "Plain mean instead of multiplicity-weighted merging");
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

double parse_double(const std::string& s, const char* what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::logic_error&) {
    throw mtr::ConfigError(std::string("malformed ") + what + " '" + s + "'");
  }
  if (used != s.size()) throw mtr::ConfigError(std::string("malformed ") + what + " '" + s + "'");
  return v;
}

std::vector<std::size_t> parse_layers(const std::string& s, std::size_t depth) {
  if (s.empty()) return mtr::default_reduction_layers(depth);
  std::vector<std::size_t> out;
  for (const auto& item : split_csv(s)) {
    const double v = parse_double(item, "layer index");
    if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v)))
      throw mtr::ConfigError("malformed layer index '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

mtr::Model load_model(ModelFlags& m) {
  if (!m.ckpt.empty()) return mtr::Model::from_checkpoint(mtr::load(m.ckpt));
  m.cfg.cls_position = mtr::cls_position_from_string(m.cls);
  return mtr::Model::random(m.cfg, m.seed);
}

mtr::RgbImage load_input(const InputFlags& in, const mtr::ModelConfig& cfg) {
  if (!in.image.empty()) return mtr::read_ppm(in.image);
  return mtr::synthetic_image(cfg.image_size, cfg.image_size, in.synthetic.value_or(0));
}

struct RunOutcome {
  mtr::RgbImage input;
  mtr::RunReport report;
};

RunOutcome execute_run(ModelFlags& mf, const InputFlags& inf, const PlanFlags& pf, bool diagnostics) {
  const mtr::Model model = load_model(mf);
  const auto& cfg = model.config();
  mtr::ForwardOptions opt;
  opt.indicator = mtr::indicator_from_string(pf.indicator);
  opt.diagnostics = diagnostics;
  if (pf.uniform_merge) opt.reduce.weighting = mtr::MergeWeighting::uniform;
  const mtr::ReductionPlan plan = mtr::solve_k(pf.target, parse_layers(pf.layers, cfg.depth), cfg.flops_model(),
                                               mtr::strategy_from_string(pf.strategy));
  RunOutcome out{load_input(inf, cfg), {}};
  const mtr::Image img = mtr::Image::from_rgb(out.input);
  const auto t0 = std::chrono::steady_clock::now();
  const mtr::ForwardResult fwd = model.forward(img, &plan, opt);
  const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
  out.report = mtr::make_run_report(model, plan, opt.indicator, fwd, dt.count());
  return out;
}

void print_text_report(const mtr::RunReport& r) {
  std::cout << "plan: k=" << r.plan.k << " strategy=" << mtr::to_string(r.plan.strategy)
            << " indicator=" << mtr::to_string(r.indicator) << " layers=";
  for (std::size_t i = 0; i < r.plan.reduce_at_layers.size(); ++i)
    std::cout << (i ? "," : "") << r.plan.reduce_at_layers[i];
  std::cout << "\ntarget reduction " << r.plan.target << ", achieved " << r.achieved_reduction()
            << (r.plan.within_tolerance ? "" : " (outside tolerance)") << "\nflops " << r.reduced_flops() << " / "
            << r.baseline_flops << "\ntokens per layer:";
  for (auto t : r.diagnostics.token_counts()) std::cout << ' ' << t;
  std::cout << "\nthroughput " << r.throughput() << " img/s\ntop-5:";
  for (auto c : mtr::top_k(r.logits, 5)) std::cout << ' ' << c;
  std::cout << '\n';
}

int exit_code_for(const mtr::Error& e) {
  if (dynamic_cast<const mtr::IoError*>(&e) || dynamic_cast<const mtr::FormatError*>(&e) ||
      dynamic_cast<const mtr::TruncationError*>(&e) || dynamic_cast<const mtr::PayloadMismatchError*>(&e))
    return 3;
  if (dynamic_cast<const mtr::NumericError*>(&e)) return 4;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training-free token reduction for vision state-space models"};
  app.require_subcommand(1);

  ModelFlags mf;
  InputFlags inf;
  PlanFlags pf;

  auto* init = app.add_subcommand("init", "Write a seeded random model checkpoint");
  std::string init_out;
  add_model_flags(init, mf);
  init->add_option("--out", init_out, "Checkpoint path")->required();

  auto* run = app.add_subcommand("run", "Run one image through the model with a reduction plan");
  bool json = false, no_diag = false;
  add_model_flags(run, mf);
  add_input_flags(run, inf);
  add_plan_flags(run, pf);
  run->add_flag("--json", json, "Print the run report as JSON");
  run->add_flag("--no-diag", no_diag, "Skip per-layer group diagnostics");

  auto* bench = app.add_subcommand("bench", "Throughput sweep over reduction ratios (CSV)");
  std::string ratios = "0,0.2,0.3,0.4";
  mtr::BenchConfig bc;
  add_model_flags(bench, mf);
  add_plan_flags(bench, pf);
  bench->add_option("--ratios", ratios, "Comma-separated FLOPs reduction targets")->capture_default_str();
  bench->add_option("--batch", bc.batch)->capture_default_str();
  bench->add_option("--repeats", bc.repeats)->capture_default_str();
  bench->add_option("--warmup", bc.warmup)->capture_default_str();
  bench->add_option("--threads", bc.threads, "Worker threads across the batch")->capture_default_str();

  auto* mask = app.add_subcommand("mask", "Render keep/target/source groups of one reduction layer as PPM");
  std::size_t mask_layer = 0;
  std::string mask_out;
  add_model_flags(mask, mf);
  add_input_flags(mask, inf);
  add_plan_flags(mask, pf);
  mask->add_option("--layer", mask_layer, "Reduction layer to render")->required();
  mask->add_option("--out", mask_out, "Output PPM path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "mtr: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*init) {
      mtr::save(load_model(mf).to_checkpoint(), init_out);
      std::cerr << "wrote " << init_out << '\n';
    } else if (*run) {
      const RunOutcome r = execute_run(mf, inf, pf, !no_diag);
      if (json)
        std::cout << mtr::to_json(r.report).dump(2) << '\n';
      else
        print_text_report(r.report);
    } else if (*bench) {
      const mtr::Model model = load_model(mf);
      bc.ratios.clear();
      for (const auto& item : split_csv(ratios)) bc.ratios.push_back(parse_double(item, "ratio"));
      if (bc.ratios.empty()) throw mtr::ConfigError("--ratios is empty");
      bc.layers = parse_layers(pf.layers, model.config().depth);
      bc.strategy = mtr::strategy_from_string(pf.strategy);
      bc.indicator = mtr::indicator_from_string(pf.indicator);
      std::cerr << "timing: " << (bc.threads > 1 ? "parallel, " + std::to_string(bc.threads) + " threads" : "single-threaded")
                << ", batch " << bc.batch << ", " << bc.repeats << " repeats after " << bc.warmup << " warmup\n";
      const auto rows = mtr::run_benchmark(model, bc);
      std::cout << mtr::kBenchCsvHeader << '\n';
      for (const auto& row : rows) std::cout << mtr::to_csv(row) << '\n';
    } else if (*mask) {
      const RunOutcome r = execute_run(mf, inf, pf, true);
      const auto& layers = r.report.diagnostics.layers;
      if (mask_layer >= layers.size() || !layers[mask_layer].reduced)
        throw mtr::ConfigError("layer " + std::to_string(mask_layer) + " is not a reduction layer of this plan");
      mtr::write_ppm(mtr::render_retention_mask(r.input, r.report.config, layers[mask_layer]), mask_out);
      std::cerr << "wrote " << mask_out << '\n';
    }
  } catch (const mtr::Error& e) {
    std::cerr << "mtr: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "mtr: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
