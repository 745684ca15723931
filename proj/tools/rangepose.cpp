// rangepose: simulate, estimate, evaluate and sweep from the command line.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "rangepose/cli.hpp"

namespace {

// Logs go to stderr so stdout carries only the JSON summary.
void setup_logging() {
  auto logger = spdlog::stderr_color_mt("rangepose");
  spdlog::set_default_logger(logger);
  spdlog::level::level_enum level = spdlog::level::warn;
  if (const char* env = std::getenv("RANGEPOSE_LOG")) {
    level = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only honour that when asked for.
    if (level == spdlog::level::off && std::string(env) != "off") {
      level = spdlog::level::warn;
      spdlog::warn("RANGEPOSE_LOG: unknown level '{}', using warn", env);
    }
  }
  spdlog::set_level(level);
}

}  // namespace

int main(int argc, char** argv) {
  using namespace rangepose;
  setup_logging();

  CLI::App app{"Continuous-time range-only pose estimation"};
  app.require_subcommand(1);

  cli::SimulateOptions sim;
  std::uint64_t sim_seed = 0;
  auto* simulate = app.add_subcommand("simulate", "Simulate a ranging dataset and its ground truth");
  simulate->add_option("--config", sim.config, "Scenario JSON")->required()->check(CLI::ExistingFile);
  simulate->add_option("--out", sim.out, "Output directory")->required();
  auto* sim_seed_opt = simulate->add_option("--seed", sim_seed, "Override the scenario seed");

  cli::EstimateOptions est;
  std::string mode = "batch", fls_output = "filtered";
  auto* estimate = app.add_subcommand("estimate", "Estimate the trajectory from range measurements");
  estimate->add_option("--config", est.config, "Problem JSON")->required()->check(CLI::ExistingFile);
  estimate->add_option("--measurements", est.measurements, "Measurements JSONL")->required()->check(CLI::ExistingFile);
  estimate->add_option("--out", est.out, "Estimates JSONL")->required();
  estimate->add_option("--mode", mode, "batch or fls")->check(CLI::IsMember({"batch", "fls"}));
  estimate->add_option("--fls-output", fls_output, "filtered or smoothed (fls mode)")
      ->check(CLI::IsMember({"filtered", "smoothed"}));

  cli::EvaluateOptions ev;
  std::string alignment = "interpolated", ev_out, ev_series;
  auto* evaluate = app.add_subcommand("evaluate", "Score estimates against ground truth");
  evaluate->add_option("--estimates", ev.estimates, "Estimates JSONL")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--truth", ev.truth, "Ground truth JSONL")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--alignment", alignment, "none or interpolated");
  evaluate->add_option("--out", ev_out, "Report JSON");
  evaluate->add_option("--series", ev_series, "Per-sample error CSV");

  cli::SweepOptions sw;
  std::uint64_t sw_seed = 0;
  auto* sweep = app.add_subcommand("sweep", "Lever-arm / noise RMSE grid");
  sweep->add_option("--config", sw.config, "Sweep JSON")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", sw.out, "Output CSV")->required();
  auto* sw_seed_opt = sweep->add_option("--seed", sw_seed, "Override the base seed");
  sweep->add_option("--threads", sw.threads, "Worker threads (0 = all cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cli::kOk : cli::kConfig;
  }

  if (*simulate) {
    if (*sim_seed_opt) sim.seed = sim_seed;
    return cli::cmd_simulate(sim, std::cout, std::cerr);
  }
  if (*estimate) {
    est.mode = cli::parse_mode(mode);
    est.fls_output = cli::parse_fls_output(fls_output);
    return cli::cmd_estimate(est, std::cout, std::cerr);
  }
  if (*evaluate) {
    return cli::guarded(std::cerr, [&] {
      ev.alignment = eval::parse_alignment(alignment);
      if (!ev_out.empty()) ev.out = ev_out;
      if (!ev_series.empty()) ev.series = ev_series;
      return cli::cmd_evaluate(ev, std::cout, std::cerr);
    });
  }
  if (*sw_seed_opt) sw.seed = sw_seed;
  return cli::cmd_sweep(sw, std::cout, std::cerr);
}
