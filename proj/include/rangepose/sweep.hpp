#pragma once
/**
 * sweep.hpp - lever-arm / noise grid: simulate, estimate and score every
 * cell over several seeds.
 */

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>

#include "rangepose/config.hpp"
#include "rangepose/evaluate.hpp"
#include "rangepose/io.hpp"
#include "rangepose/range_model.hpp"
#include "rangepose/sim.hpp"
#include "rangepose/solver.hpp"

namespace rangepose::sweep {

struct RunMetrics {
  double position_rmse = std::numeric_limits<double>::quiet_NaN();
  double orientation_rmse = std::numeric_limits<double>::quiet_NaN();
  std::string note;  // non-empty when the run failed
};

template <int N>
struct Pipeline {
  PriorParams<N> prior = PriorParams<N>::isotropic(config::kDefaultPriorQ);
  SolverSettings solver;
  PreprocessPolicy preprocess;
  bool fls = false;
};

/// One simulate -> preprocess -> estimate -> evaluate pass. Estimator failures become NaN metrics.
template <int N>
RunMetrics run_once(const sim::Scenario<N>& sc, const Pipeline<N>& p) {
  RunMetrics out;
  try {
    const sim::Trajectory<N> traj(sc.trajectory);
    const auto ms = preprocess(sim::schedule_measurements<N>(sc, traj), p.preprocess);
    std::vector<Estimate<N>> est;
    if (p.fls) {
      est = run_fls<N>(ms, sc.setup, p.prior, p.solver).smoothed;
    } else {
      est = run_batch<N>(ms, sc.setup, p.prior, p.solver).estimates;
    }
    std::vector<StateKnot<N>> truth;
    truth.reserve(est.size());
    for (const auto& e : est) truth.push_back(traj.state(e.state.time));
    const auto rep = eval::evaluate<N>(est, truth, eval::Alignment::none, false);
    out.position_rmse = rep.position_rmse;
    out.orientation_rmse = rep.orientation_rmse;
    if (!std::isfinite(out.position_rmse) || !std::isfinite(out.orientation_rmse)) {
      out.note = "non-finite estimate";
      out.position_rmse = out.orientation_rmse = std::numeric_limits<double>::quiet_NaN();
    }
  } catch (const std::exception& e) {
    out.note = e.what();
  }
  return out;
}

/// Lever arms rescaled to `length`, keeping their directions. Zero lever arms stay zero.
template <int N>
SensorConfig<N> scale_levers(const SensorConfig<N>& sensors, double length, double sigma) {
  SensorConfig<N> out = sensors;
  for (auto& [id, s] : out.sensors) {
    const double n = s.lever_arm.norm();
    if (n > 0) s.lever_arm *= length / n;
    if (sigma > 0) s.sigma = sigma;
  }
  return out;
}

struct Cell {
  double lever = 0.0;
  double sigma = 0.0;
  double position_mean = 0.0;
  double position_std = 0.0;
  double orientation_mean = 0.0;
  double orientation_std = 0.0;
  int runs = 0;
  int failures = 0;
  std::vector<RunMetrics> samples;
};

struct Result {
  std::vector<Cell> cells;  // lever-major: cells[i * sigmas + j]
  std::vector<double> levers;
  std::vector<double> sigmas;

  const Cell& at(std::size_t lever_idx, std::size_t sigma_idx) const { return cells[lever_idx * sigmas.size() + sigma_idx]; }
};

/// Seed of a cell's private RNG stream; run seeds are drawn from that stream.
inline std::uint64_t cell_seed(std::uint64_t base, std::size_t cell) { return base ^ static_cast<std::uint64_t>(cell); }

inline void summarize(Cell& c) {
  std::vector<double> pos, ori;
  for (const auto& s : c.samples) {
    if (s.note.empty()) {
      pos.push_back(s.position_rmse);
      ori.push_back(s.orientation_rmse);
    }
  }
  c.runs = static_cast<int>(c.samples.size());
  c.failures = c.runs - static_cast<int>(pos.size());
  auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
    if (v.empty()) {
      mean = sd = std::numeric_limits<double>::quiet_NaN();
      return;
    }
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    sd = 0.0;
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(sd / static_cast<double>(v.size() - 1)) : 0.0;
  };
  mean_std(pos, c.position_mean, c.position_std);
  mean_std(ori, c.orientation_mean, c.orientation_std);
  // A cell with any failed run is reported as diverged.
  if (c.failures > 0) {
    c.position_mean = c.position_std = c.orientation_mean = c.orientation_std = std::numeric_limits<double>::quiet_NaN();
  }
}

/**
 * Runs every cell of the grid. Cells are distributed over `threads` workers
 * (0 = hardware concurrency); results do not depend on the thread count.
 */
template <int N>
Result run(const sim::Scenario<N>& base, const Pipeline<N>& pipeline, const config::SweepSpec& spec,
           unsigned threads = 0) {
  spec.validate();
  Result res;
  res.levers = spec.levers;
  res.sigmas = spec.sigmas;
  res.cells.resize(spec.levers.size() * spec.sigmas.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t idx = next++; idx < res.cells.size(); idx = next++) {
      Cell& c = res.cells[idx];
      c.lever = spec.levers[idx / spec.sigmas.size()];
      c.sigma = spec.sigmas[idx % spec.sigmas.size()];
      std::mt19937_64 stream(cell_seed(base.seed, idx));
      for (int r = 0; r < spec.runs; ++r) {
        sim::Scenario<N> sc = base;
        sc.setup.sensors = scale_levers<N>(base.setup.sensors, c.lever, c.sigma);
        sc.noise_sigma = c.sigma;
        sc.seed = stream();
        c.samples.push_back(run_once<N>(sc, pipeline));
        if (!c.samples.back().note.empty()) {
          spdlog::warn("sweep: lever {} sigma {} run {} failed: {}", c.lever, c.sigma, r, c.samples.back().note);
        }
      }
      summarize(c);
      spdlog::info("sweep: lever {:.3f} sigma {:.3f} pos {:.4f} ori {:.4f}", c.lever, c.sigma, c.position_mean,
                   c.orientation_mean);
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(res.cells.size()));
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return res;
}

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{"lever_m",          "sigma_m",         "pos_rmse_mean", "pos_rmse_std",
                                             "ori_rmse_mean",    "ori_rmse_std",    "runs"};
  return cols;
}

inline io::CsvTable to_table(const Result& r) {
  io::CsvTable t;
  t.header = csv_columns();
  for (const auto& c : r.cells) {
    t.rows.push_back({c.lever, c.sigma, c.position_mean, c.position_std, c.orientation_mean, c.orientation_std,
                      static_cast<double>(c.runs)});
  }
  return t;
}

/// Trend statistics over the grid.
struct Trends {
  std::vector<double> orientation_vs_lever;  // Spearman rho per noise level
  std::vector<bool> orientation_strictly_decreasing;
  std::vector<double> position_vs_sigma;  // Spearman rho per lever (NaN with fewer than 2 levels)
  std::vector<double> position_spread;    // max / min position RMSE across levers, per noise level
};

inline Trends trends(const Result& r) {
  Trends t;
  for (std::size_t j = 0; j < r.sigmas.size(); ++j) {
    std::vector<double> ori, pos;
    for (std::size_t i = 0; i < r.levers.size(); ++i) {
      ori.push_back(r.at(i, j).orientation_mean);
      pos.push_back(r.at(i, j).position_mean);
    }
    t.orientation_vs_lever.push_back(r.levers.size() >= 2 ? eval::spearman(r.levers, ori)
                                                          : std::numeric_limits<double>::quiet_NaN());
    bool strict = true;
    for (std::size_t i = 1; i < ori.size(); ++i) strict = strict && ori[i] < ori[i - 1];
    t.orientation_strictly_decreasing.push_back(strict);
    const auto [lo, hi] = std::minmax_element(pos.begin(), pos.end());
    t.position_spread.push_back(*hi / *lo);
  }
  for (std::size_t i = 0; i < r.levers.size(); ++i) {
    std::vector<double> pos;
    for (std::size_t j = 0; j < r.sigmas.size(); ++j) pos.push_back(r.at(i, j).position_mean);
    t.position_vs_sigma.push_back(r.sigmas.size() >= 2 ? eval::spearman(r.sigmas, pos)
                                                       : std::numeric_limits<double>::quiet_NaN());
  }
  return t;
}

}  // namespace rangepose::sweep
