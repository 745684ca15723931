#pragma once
/**
 * cli.hpp - the simulate / estimate / evaluate / sweep subcommands.
 *
 * Each command takes parsed options and two streams (summary, diagnostics)
 * and returns the process exit code; argument parsing lives in the tool.
 */

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "rangepose/config.hpp"
#include "rangepose/errors.hpp"
#include "rangepose/evaluate.hpp"
#include "rangepose/io.hpp"
#include "rangepose/range_model.hpp"
#include "rangepose/sim.hpp"
#include "rangepose/solver.hpp"
#include "rangepose/sweep.hpp"

namespace rangepose::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kUnobservable = 3, kNumerical = 4 };

enum class Mode { batch, fls };
enum class FlsOutput { filtered, smoothed };

inline Mode parse_mode(const std::string& s) {
  if (s == "batch") return Mode::batch;
  if (s == "fls") return Mode::fls;
  throw ConfigError("mode: expected 'batch' or 'fls', got '" + s + "'");
}

inline FlsOutput parse_fls_output(const std::string& s) {
  if (s == "filtered") return FlsOutput::filtered;
  if (s == "smoothed") return FlsOutput::smoothed;
  throw ConfigError("fls-output: expected 'filtered' or 'smoothed', got '" + s + "'");
}

struct SimulateOptions {
  fs::path config;
  fs::path out;  // directory receiving measurements.jsonl and truth.jsonl
  std::optional<std::uint64_t> seed;
};

struct EstimateOptions {
  fs::path config;
  fs::path measurements;
  fs::path out;
  Mode mode = Mode::batch;
  FlsOutput fls_output = FlsOutput::filtered;
};

struct EvaluateOptions {
  fs::path estimates;
  fs::path truth;
  std::optional<fs::path> out;     // report JSON
  std::optional<fs::path> series;  // per-sample error CSV
  eval::Alignment alignment = eval::Alignment::interpolated;
};

struct SweepOptions {
  fs::path config;
  fs::path out;  // CSV grid
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
};

inline constexpr const char* kMeasurementsFile = "measurements.jsonl";
inline constexpr const char* kTruthFile = "truth.jsonl";

/// Maps the library's exception types onto exit codes.
inline int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const UnobservableError& e) {
    err << "unobservable: " << e.what() << '\n';
    return kUnobservable;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

namespace detail {

inline fs::path base_dir(const fs::path& file) {
  const auto p = file.parent_path();
  return p.empty() ? fs::path(".") : p;
}

template <int N>
void require_observable(config::ProblemConfig<N>& c) {
  const auto rep = check_observability<N>(c.setup);
  if (rep.observable()) return;
  std::string msg;
  for (const auto& m : rep.messages) msg += (msg.empty() ? "" : "; ") + m;
  if (!c.allow_unobservable) throw UnobservableError(msg + " (set allow_unobservable to override)");
  spdlog::warn("estimating with unobservable geometry: {}", msg);
  c.solver.report_rank = false;
}

/**
 * Preprocessing on the time-sorted view of `ms`; survivors keep their
 * arrival order so the smoother still sees late measurements as late.
 */
inline std::vector<RangeMeasurement> preprocess_in_arrival_order(const std::vector<RangeMeasurement>& ms,
                                                                 const PreprocessPolicy& policy) {
  std::vector<std::size_t> order(ms.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ms[a].time < ms[b].time; });
  std::vector<RangeMeasurement> sorted;
  sorted.reserve(ms.size());
  for (std::size_t i : order) sorted.push_back(ms[i]);
  PreprocessPolicy unbiased = policy;
  if (policy.bias) {
    for (auto& m : sorted) m.range -= policy.bias->at(m.sensor_id, m.anchor_id);
    unbiased.bias.reset();
  }
  const auto kept = preprocess(sorted, unbiased);
  // `kept` is a subsequence of `sorted`.
  std::vector<std::optional<RangeMeasurement>> by_arrival(ms.size());
  std::size_t j = 0;
  for (std::size_t i = 0; i < sorted.size() && j < kept.size(); ++i) {
    const auto& a = sorted[i];
    const auto& b = kept[j];
    if (a.time == b.time && a.sensor_id == b.sensor_id && a.anchor_id == b.anchor_id && a.range == b.range) {
      by_arrival[order[i]] = b;
      ++j;
    }
  }
  std::vector<RangeMeasurement> out;
  out.reserve(kept.size());
  for (auto& m : by_arrival) {
    if (m) out.push_back(*m);
  }
  return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <int N>
int simulate(const SimulateOptions& opt, std::ostream& out) {
  const json j = io::read_json(opt.config);
  config::detail::check_version(j, "config");
  RangeSetup<N> setup{config::parse_anchors<N>(j), config::parse_sensors<N>(j)};
  auto sc = config::parse_scenario<N>(j, setup);
  if (opt.seed) sc.seed = *opt.seed;
  const sim::Trajectory<N> traj(sc.trajectory);
  const auto ms = sim::schedule_measurements<N>(sc, traj);
  const auto truth = sim::ground_truth<N>(traj, ms);
  io::write_measurements(opt.out / kMeasurementsFile, ms);
  io::write_states<N>(opt.out / kTruthFile, truth);
  out << json{{"command", "simulate"},
              {"dimension", N},
              {"seed", sc.seed},
              {"trajectory", sim::to_string(sc.trajectory.kind)},
              {"duration_s", sc.trajectory.duration},
              {"measurements", ms.size()},
              {"truth_samples", truth.size()},
              {"measurements_file", (opt.out / kMeasurementsFile).string()},
              {"truth_file", (opt.out / kTruthFile).string()}}
             .dump(2)
      << '\n';
  return kOk;
}

template <int N>
int estimate(const EstimateOptions& opt, std::ostream& out) {
  const json j = io::read_json(opt.config);
  auto c = config::parse_problem<N>(j, base_dir(opt.config));
  require_observable(c);
  const auto raw = io::read_measurements(opt.measurements);
  for (const auto& m : raw) {
    if (!c.setup.anchors.positions.count(m.anchor_id)) {
      throw ConfigError("measurement references unknown anchor id " + std::to_string(m.anchor_id));
    }
    if (!c.setup.sensors.sensors.count(m.sensor_id)) {
      throw ConfigError("measurement references unknown sensor id " + std::to_string(m.sensor_id));
    }
  }
  const auto ms = preprocess_in_arrival_order(raw, c.preprocess);
  if (ms.empty()) throw ArgumentError("no measurements left after preprocessing");

  json summary{{"command", "estimate"},
               {"dimension", N},
               {"measurements_read", raw.size()},
               {"measurements_used", ms.size()}};
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Estimate<N>> result;
  if (opt.mode == Mode::batch) {
    std::vector<RangeMeasurement> sorted = ms;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const RangeMeasurement& a, const RangeMeasurement& b) { return a.time < b.time; });
    auto res = run_batch<N>(sorted, c.setup, c.prior, c.solver);
    summary["mode"] = "batch";
    summary["status"] = to_string(res.stats.status);
    summary["iterations"] = res.stats.iterations;
    summary["initial_cost"] = res.stats.cost_history.empty() ? res.stats.final_cost : res.stats.cost_history.front();
    summary["final_cost"] = res.stats.final_cost;
    summary["init_fallback"] = res.init_fallback;
    if (!res.stats.message.empty()) summary["message"] = res.stats.message;
    result = std::move(res.estimates);
  } else {
    auto res = run_fls<N>(ms, c.setup, c.prior, c.solver);
    if (res.worst_status == SolverStatus::numerical_failure) {
      throw NumericalError("a fixed-lag update failed to factor the window's normal equations");
    }
    summary["mode"] = "fls";
    summary["output"] = opt.fls_output == FlsOutput::filtered ? "filtered" : "smoothed";
    summary["status"] = to_string(res.worst_status);
    summary["iterations"] = res.total_iterations;
    summary["dropped_out_of_order"] = res.dropped;
    summary["max_window_knots"] = res.max_window_knots;
    summary["max_window_span_s"] = res.max_window_span;
    summary["init_fallback"] = res.init_fallback;
    result = opt.fls_output == FlsOutput::filtered ? std::move(res.filtered) : std::move(res.smoothed);
  }
  summary["runtime_s"] = seconds_since(t0);
  summary["estimates"] = result.size();
  io::write_estimates<N>(opt.out, result);
  out << summary.dump(2) << '\n';
  return kOk;
}

template <int N>
int evaluate(const EvaluateOptions& opt, std::ostream& out) {
  const auto est = io::read_estimates<N>(opt.estimates);
  const auto truth = io::read_states<N>(opt.truth);
  bool have_cov = true;
  for (const auto& e : est) have_cov = have_cov && e.covariance.allFinite();
  const auto rep = eval::evaluate<N>(est, truth, opt.alignment, have_cov);

  json report{{"schema_version", io::kSchemaVersion},
              {"dimension", N},
              {"alignment", opt.alignment == eval::Alignment::none ? "none" : "interpolated"},
              {"samples", rep.samples},
              {"position_rmse", rep.position_rmse},
              {"orientation_rmse", rep.orientation_rmse},
              {"has_covariance", rep.has_covariance}};
  if (rep.has_covariance) {
    report["position_coverage"] = io::vector_json(rep.position_coverage);
    report["orientation_coverage"] = io::vector_json(rep.orientation_coverage);
    report["coverage"] = rep.coverage();
    report["nees_mean"] = std::accumulate(rep.nees.begin(), rep.nees.end(), 0.0) / static_cast<double>(rep.nees.size());
  }
  if (opt.out) io::write_atomic(*opt.out, report.dump(2) + "\n");
  if (opt.series) {
    constexpr int R = lie::GroupDims<N>::kRotDof;
    io::CsvTable t;
    t.header = {"t"};
    for (int a = 0; a < N; ++a) t.header.push_back("pos_err_" + std::string(1, "xyz"[a]));
    for (int a = 0; a < R; ++a) t.header.push_back(R == 1 ? "ori_err" : "ori_err_" + std::string(1, "xyz"[a]));
    if (rep.has_covariance) t.header.push_back("nees");
    for (std::size_t i = 0; i < rep.samples; ++i) {
      std::vector<double> row{rep.times[i]};
      for (int a = 0; a < N; ++a) row.push_back(rep.position_error[i](a));
      for (int a = 0; a < R; ++a) row.push_back(rep.orientation_error[i](a));
      if (rep.has_covariance) row.push_back(rep.nees[i]);
      t.rows.push_back(std::move(row));
    }
    io::write_atomic(*opt.series, io::to_csv(t));
  }
  report["command"] = "evaluate";
  out << report.dump(2) << '\n';
  return kOk;
}

template <int N>
int sweep(const SweepOptions& opt, std::ostream& out) {
  const json j = io::read_json(opt.config);
  const auto c = config::parse_problem<N>(j, base_dir(opt.config));
  auto sc = config::parse_scenario<N>(j, c.setup);
  if (opt.seed) sc.seed = *opt.seed;
  const auto spec = config::parse_sweep(j);
  sweep::Pipeline<N> p{c.prior, c.solver, c.preprocess, spec.fls};
  p.solver.report_rank = false;  // tiny levers are meant to degrade, not abort
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = sweep::run<N>(sc, p, spec, opt.threads);
  io::write_atomic(opt.out, io::to_csv(sweep::to_table(res)));

  const auto tr = sweep::trends(res);
  json per_sigma = json::array();
  for (std::size_t s = 0; s < res.sigmas.size(); ++s) {
    const double smallest = res.at(0, s).orientation_mean;
    const double largest = res.at(res.levers.size() - 1, s).orientation_mean;
    per_sigma.push_back({{"sigma_m", res.sigmas[s]},
                         {"orientation_vs_lever_spearman", tr.orientation_vs_lever[s]},
                         {"orientation_strictly_decreasing", static_cast<bool>(tr.orientation_strictly_decreasing[s])},
                         {"orientation_first_to_last_lever_ratio", smallest / largest},
                         {"position_spread_across_levers", tr.position_spread[s]}});
  }
  json per_lever = json::array();
  for (std::size_t l = 0; l < res.levers.size(); ++l) {
    per_lever.push_back({{"lever_m", res.levers[l]}, {"position_vs_sigma_spearman", tr.position_vs_sigma[l]}});
  }
  int failures = 0;
  for (const auto& cell : res.cells) failures += cell.failures;
  // nlohmann writes NaN as null.
  out << json{{"command", "sweep"},
              {"dimension", N},
              {"cells", res.cells.size()},
              {"runs_per_cell", spec.runs},
              {"failed_runs", failures},
              {"runtime_s", seconds_since(t0)},
              {"per_sigma", per_sigma},
              {"per_lever", per_lever},
              {"csv", opt.out.string()}}
             .dump(2)
      << '\n';
  return kOk;
}

}  // namespace detail

inline int cmd_simulate(const SimulateOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    return config::dimension_of(io::read_json(opt.config)) == 2 ? detail::simulate<2>(opt, out)
                                                                : detail::simulate<3>(opt, out);
  });
}

inline int cmd_estimate(const EstimateOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    return config::dimension_of(io::read_json(opt.config)) == 2 ? detail::estimate<2>(opt, out)
                                                                : detail::estimate<3>(opt, out);
  });
}

inline int cmd_evaluate(const EvaluateOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const int d = io::state_stream_dimension(opt.estimates);
    if (io::state_stream_dimension(opt.truth) != d) {
      throw ConfigError("estimate and truth files have different dimensions");
    }
    return d == 2 ? detail::evaluate<2>(opt, out) : detail::evaluate<3>(opt, out);
  });
}

inline int cmd_sweep(const SweepOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    return config::dimension_of(io::read_json(opt.config)) == 2 ? detail::sweep<2>(opt, out)
                                                                : detail::sweep<3>(opt, out);
  });
}

}  // namespace rangepose::cli
