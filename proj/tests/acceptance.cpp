// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <boost/crc.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "rangepose/cli.hpp"
#include "rangepose/evaluate.hpp"
#include "rangepose/lie.hpp"
#include "rangepose/motion_prior.hpp"
#include "rangepose/range_model.hpp"
#include "rangepose/sim.hpp"
#include "rangepose/solver.hpp"
#include "rangepose/sweep.hpp"

#ifndef RANGEPOSE_CLI_PATH
#error "RANGEPOSE_CLI_PATH must point at the rangepose executable"
#endif

using namespace rangepose;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt_ratio(double v) { return std::isfinite(v) ? fmt::format("{:.2f}", v) : "nan"; }

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

template <int N>
sim::Scenario<N> scenario(sim::TrajectoryKind kind, double duration, double lever, double sigma, std::uint64_t seed) {
  sim::Scenario<N> sc;
  sc.setup = {sim::default_anchors<N>(), sim::default_sensors<N>(lever, sigma > 0 ? sigma : kDefaultRangeSigma)};
  sc.trajectory.kind = kind;
  sc.trajectory.duration = duration;
  sc.noise_sigma = sigma;
  sc.rate = 17.0;
  sc.seed = seed;
  return sc;
}

template <int N>
std::vector<StateKnot<N>> truth_at(const sim::Trajectory<N>& traj, const std::vector<Estimate<N>>& est) {
  std::vector<StateKnot<N>> out;
  out.reserve(est.size());
  for (const auto& e : est) out.push_back(traj.state(e.state.time));
  return out;
}

template <int N>
double rotation_angle(const lie::Pose<N>& a, const lie::Pose<N>& b) {
  return lie::so_log<N>(a.rotation().inverse() * b.rotation()).norm();
}

// ---------------------------------------------------------------------------
// 1. Lie kernel and Jacobians
// ---------------------------------------------------------------------------

template <int N>
lie::Tangent<N> random_tangent(std::mt19937_64& rng, double rho_max, double max_angle) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  constexpr int R = lie::GroupDims<N>::kRotDof;
  lie::Tangent<N> v;
  for (int i = 0; i < N; ++i) v(i) = rho_max * u(rng);
  lie::RotTangent<N> phi;
  for (int i = 0; i < R; ++i) phi(i) = u(rng);
  phi *= std::abs(u(rng)) * max_angle / phi.norm();
  v.template tail<R>() = phi;
  return v;
}

template <typename A, typename B>
double max_rel_error(const A& a, const B& b) {
  return ((a - b).cwiseAbs().array() / b.cwiseAbs().array().max(1.0)).maxCoeff();
}

struct LieStats {
  double round_trip = 0.0;
  double prior_jac = 0.0;
  double range_jac = 0.0;
};

template <int N>
LieStats lie_checks(std::mt19937_64& rng) {
  constexpr int B = kStateDof<N>;
  constexpr int D = kDof<N>;
  LieStats st;
  const double angle_cap = std::numbers::pi - 0.1;
  for (int i = 0; i < 10000; ++i) {
    const auto xi = random_tangent<N>(rng, 5.0, angle_cap);
    st.round_trip = std::max(st.round_trip, (lie::log<N>(lie::exp<N>(xi)) - xi).cwiseAbs().maxCoeff());
  }
  const double h = 1e-6;
  const auto params = PriorParams<N>::isotropic(0.5);
  auto random_knot = [&](double t) {
    StateKnot<N> k;
    k.time = t;
    k.pose = lie::exp<N>(random_tangent<N>(rng, 3.0, 3.0));
    k.twist = random_tangent<N>(rng, 1.0, 1.0);
    return k;
  };
  for (int trial = 0; trial < 200; ++trial) {
    const auto prev = random_knot(0.0);
    auto next = random_knot(0.1 + 0.01 * trial);
    if (trial % 2 == 0) next.pose = prev.pose * lie::exp<N>(random_tangent<N>(rng, 0.3, 0.2));
    const auto f = motion_prior::prior_factor(prev, next, params);
    StateMatrix<N> fd_prev, fd_next;
    for (int j = 0; j < B; ++j) {
      const StateVector<N> d = h * StateVector<N>::Unit(j);
      const StateVector<N> md = -d;
      fd_prev.col(j) = (motion_prior::prior_error(state_retract(prev, d), next) -
                        motion_prior::prior_error(state_retract(prev, md), next)) / (2 * h);
      fd_next.col(j) = (motion_prior::prior_error(prev, state_retract(next, d)) -
                        motion_prior::prior_error(prev, state_retract(next, md))) / (2 * h);
    }
    st.prior_jac = std::max({st.prior_jac, max_rel_error(f.jac_prev, fd_prev), max_rel_error(f.jac_next, fd_next)});
  }
  RangeSetup<N> setup{sim::default_anchors<N>(), sim::default_sensors<N>(0.4)};
  for (int trial = 0; trial < 500; ++trial) {
    const auto pose = lie::Pose<N>(lie::exp<N>(random_tangent<N>(rng, 1.0, 3.0)).rotation(), sim::arena_center<N>()) *
                      lie::exp<N>(random_tangent<N>(rng, 1.0, 0.0));
    const RangeMeasurement m{0.0, trial % static_cast<int>(setup.sensors.sensors.size()),
                             trial % static_cast<int>(setup.anchors.positions.size()), 3.0, 0.01};
    const auto r = range_residual<N>(m, pose, setup);
    Eigen::Matrix<double, 1, D> fd;
    for (int j = 0; j < D; ++j) {
      const lie::Tangent<N> d = h * lie::Tangent<N>::Unit(j);
      fd(j) = (range_residual<N>(m, pose * lie::exp<N>(d), setup).error -
               range_residual<N>(m, pose * lie::exp<N>(lie::Tangent<N>(-d)), setup).error) / (2 * h);
    }
    st.range_jac = std::max(st.range_jac, max_rel_error(r.jacobian, fd));
  }
  return st;
}

Outcome lie_kernel() {
  std::mt19937_64 rng(1);
  const auto a = lie_checks<2>(rng);
  const auto b = lie_checks<3>(rng);
  const double rt = std::max(a.round_trip, b.round_trip);
  const double pj = std::max(a.prior_jac, b.prior_jac);
  const double rj = std::max(a.range_jac, b.range_jac);
  return {rt < 1e-9 && pj < 1e-4 && rj < 1e-4,
          fmt::format("exp/log round trip {:.1e} (< 1e-9), prior Jacobian rel err {:.1e}, range Jacobian rel err "
                      "{:.1e} (< 1e-4)",
                      rt, pj, rj)};
}

// ---------------------------------------------------------------------------
// 2. Noiseless identifiability
// ---------------------------------------------------------------------------

template <int N>
eval::EvaluationReport<N> noiseless_run(sim::TrajectoryKind kind) {
  const auto sc = scenario<N>(kind, 60.0, 0.2, 0.0, 3);
  const sim::Trajectory<N> traj(sc.trajectory);
  const auto ms = sim::schedule_measurements<N>(sc, traj);
  const auto res = run_batch<N>(ms, sc.setup, PriorParams<N>::isotropic(config::kDefaultPriorQ), SolverSettings{});
  return eval::evaluate<N>(res.estimates, truth_at(traj, res.estimates), eval::Alignment::none, false);
}

// The circle has a constant body twist, so the truth is the global optimum. The
// figure-eight accelerates, which the prior penalizes; its error is the prior's
// bias and is reported for information only.
Outcome noiseless() {
  const auto a = noiseless_run<2>(sim::TrajectoryKind::circle);
  const auto b = noiseless_run<3>(sim::TrajectoryKind::circle);
  const auto c = noiseless_run<3>(sim::TrajectoryKind::figure_eight);
  const bool pass = a.position_rmse < 1e-4 && a.orientation_rmse < 1e-3 && b.position_rmse < 1e-4 &&
                    b.orientation_rmse < 1e-3;
  return {pass, fmt::format("circle 2D pos {:.2e} m ori {:.2e} rad; 3D pos {:.2e} m ori {:.2e} rad (< 1e-4 m, < 1e-3 "
                            "rad); info: 3D figure-eight prior bias pos {:.1e} m ori {:.1e} rad",
                            a.position_rmse, a.orientation_rmse, b.position_rmse, b.orientation_rmse, c.position_rmse,
                            c.orientation_rmse)};
}

// ---------------------------------------------------------------------------
// 3. Lever / noise trends
// ---------------------------------------------------------------------------

Outcome trends() {
  auto base = scenario<3>(sim::TrajectoryKind::straight_line, 20.0, 0.2, 0.1, 2024);
  config::SweepSpec spec;  // levers {0.014 .. 2.8}, sigmas {0.01, 0.05, 0.1}, 5 runs
  sweep::Pipeline<3> p;
  p.solver.report_rank = false;
  const auto r = sweep::run<3>(base, p, spec);
  const auto t = sweep::trends(r);
  bool pass = true;
  std::string detail;
  for (std::size_t s = 0; s < r.sigmas.size(); ++s) {
    const bool ok = t.orientation_strictly_decreasing[s] && t.orientation_vs_lever[s] <= -0.9 &&
                    t.position_spread[s] < 2.0;
    pass = pass && ok;
    detail += fmt::format("sigma {}: rho {:.2f} strict {} pos spread {}; ", r.sigmas[s], t.orientation_vs_lever[s],
                          t.orientation_strictly_decreasing[s] ? "yes" : "no", fmt_ratio(t.position_spread[s]));
  }
  const std::size_t last = r.sigmas.size() - 1;
  const double ratio = r.at(0, last).orientation_mean / r.at(r.levers.size() - 1, last).orientation_mean;
  pass = pass && ratio >= 5.0;
  detail += fmt::format("ori ratio 0.014/2.8 m at sigma 0.1 = {} (>= 5)", fmt_ratio(ratio));
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 4. Consistency
// ---------------------------------------------------------------------------

Outcome consistency() {
  constexpr int N = 3;
  constexpr int kRuns = 20;
  const double q = config::kDefaultPriorQ;
  constexpr int dof = kStateDof<N>;
  std::map<long, std::vector<double>> nees_by_tick;  // tick index at 17 Hz -> NEES of each run
  lie::Vector<N> pos_cov = lie::Vector<N>::Zero();
  lie::RotTangent<N> ori_cov = lie::RotTangent<N>::Zero();
  for (int run = 0; run < kRuns; ++run) {
    auto sc = scenario<N>(sim::TrajectoryKind::gp_sample, 20.0, 0.5, 0.1, 100 + run);
    sc.trajectory.gp_q = q;
    sc.trajectory.gp_seed = 500 + run;
    const sim::Trajectory<N> traj(sc.trajectory);
    const auto ms = sim::schedule_measurements<N>(sc, traj);
    const auto res = run_batch<N>(ms, sc.setup, PriorParams<N>::isotropic(q), SolverSettings{});
    const auto rep = eval::evaluate<N>(res.estimates, truth_at(traj, res.estimates), eval::Alignment::none, true);
    pos_cov += rep.position_coverage;
    ori_cov += rep.orientation_coverage;
    for (std::size_t i = 0; i < rep.samples; ++i) {
      nees_by_tick[std::lround(rep.times[i] * sc.rate)].push_back(rep.nees[i]);
    }
  }
  pos_cov /= kRuns;
  ori_cov /= kRuns;
  const auto [lo, hi] = eval::nees_interval(dof, kRuns);
  int inside = 0, steps = 0;
  for (const auto& [tick, v] : nees_by_tick) {
    if (static_cast<int>(v.size()) != kRuns) continue;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= kRuns;
    ++steps;
    inside += mean >= lo && mean <= hi;
  }
  const double min_cov = std::min(pos_cov.minCoeff(), ori_cov.minCoeff());
  const double frac = steps > 0 ? static_cast<double>(inside) / steps : 0.0;
  return {min_cov >= 0.95 && frac >= 0.8,
          fmt::format("min per-axis 3-sigma coverage {:.3f} (>= 0.95); mean NEES in [{:.2f}, {:.2f}] on {:.1f}% of {} "
                      "timesteps (>= 80%)",
                      min_cov, lo, hi, 100.0 * frac, steps)};
}

// ---------------------------------------------------------------------------
// 5. Dropout
// ---------------------------------------------------------------------------

template <int N>
double pose_trace(const StateMatrix<N>& c) {
  return c.template topLeftCorner<kDof<N>, kDof<N>>().trace();
}

Outcome dropout() {
  constexpr int N = 3;
  const double gap_a = 25.0, gap_b = 30.0;
  auto sc = scenario<N>(sim::TrajectoryKind::figure_eight, 60.0, 0.2, 0.1, 9);
  const sim::Trajectory<N> traj(sc.trajectory);
  const auto prior = PriorParams<N>::isotropic(config::kDefaultPriorQ);
  const auto full = run_batch<N>(sim::schedule_measurements<N>(sc, traj), sc.setup, prior, SolverSettings{});
  sc.dropouts = {{gap_a, gap_b}};
  const auto gap = run_batch<N>(sim::schedule_measurements<N>(sc, traj), sc.setup, prior, SolverSettings{});

  auto nearest = [](const std::vector<Estimate<N>>& es, double t) {
    const Estimate<N>* best = &es.front();
    for (const auto& e : es) {
      if (std::abs(e.state.time - t) < std::abs(best->state.time - t)) best = &e;
    }
    return *best;
  };
  const auto mid = nearest(gap.estimates, 0.5 * (gap_a + gap_b));
  const auto before = nearest(gap.estimates, 20.0);
  const double growth = pose_trace<N>(mid.covariance) / pose_trace<N>(before.covariance);

  std::vector<Estimate<N>> in_gap;
  for (const auto& e : gap.estimates) {
    if (e.state.time > gap_a && e.state.time < gap_b) in_gap.push_back(e);
  }
  const auto rep_gap = eval::evaluate<N>(in_gap, truth_at(traj, in_gap), eval::Alignment::none, true);
  const bool enveloped = rep_gap.coverage() == 1.0;

  auto outside = [&](const std::vector<Estimate<N>>& es) {
    std::vector<Estimate<N>> out;
    for (const auto& e : es) {
      if (e.state.time < gap_a || e.state.time > gap_b) out.push_back(e);
    }
    return eval::evaluate<N>(out, truth_at(traj, out), eval::Alignment::none, false);
  };
  const auto a = outside(full.estimates);
  const auto b = outside(gap.estimates);
  const double dpos = std::abs(b.position_rmse / a.position_rmse - 1.0);
  const double dori = std::abs(b.orientation_rmse / a.orientation_rmse - 1.0);
  return {growth >= 3.0 && enveloped && dpos <= 0.2 && dori <= 0.2,
          fmt::format("pose-trace growth t={:.2f} vs t={:.2f}: {:.1f}x (>= 3); {} of {} gap knots inside 3-sigma on "
                      "every axis; non-gap RMSE change pos {:.1f}% ori {:.1f}% (<= 20%)",
                      mid.state.time, before.state.time, growth,
                      static_cast<int>(std::lround(rep_gap.coverage() * rep_gap.samples)), rep_gap.samples,
                      100 * dpos, 100 * dori)};
}

// ---------------------------------------------------------------------------
// 6. Fixed-lag vs batch
// ---------------------------------------------------------------------------

Outcome fls_vs_batch() {
  constexpr int N = 3;
  const auto sc = scenario<N>(sim::TrajectoryKind::figure_eight, 60.0, 0.72, 0.1, 11);
  const sim::Trajectory<N> traj(sc.trajectory);
  const auto ms = sim::schedule_measurements<N>(sc, traj);
  const auto prior = PriorParams<N>::isotropic(config::kDefaultPriorQ);
  SolverSettings s;
  s.fls_window = 5.0;
  const auto batch = run_batch<N>(ms, sc.setup, prior, s);
  const auto fls = run_fls<N>(ms, sc.setup, prior, s);
  std::map<double, const Estimate<N>*> by_time;
  for (const auto& e : batch.estimates) by_time[e.state.time] = &e;
  double pos = 0.0, ori = 0.0;
  std::size_t n = 0;
  for (const auto& e : fls.smoothed) {
    const auto it = by_time.find(e.state.time);
    if (it == by_time.end()) continue;
    pos += (e.state.pose.translation() - it->second->state.pose.translation()).squaredNorm();
    ori += std::pow(rotation_angle<N>(e.state.pose, it->second->state.pose), 2);
    ++n;
  }
  const double pos_rms = std::sqrt(pos / n), ori_rms = std::sqrt(ori / n);
  const bool matched = n == batch.estimates.size();
  return {matched && pos_rms < 0.01 && ori_rms < 0.01,
          fmt::format("window 5 s, lever 0.72 m, sigma 0.1 m: {} of {} knots matched; difference pos {:.4f} m, ori "
                      "{:.4f} rad (< 0.01)",
                      n, batch.estimates.size(), pos_rms, ori_rms)};
}

// ---------------------------------------------------------------------------
// 7. 2D plausibility
// ---------------------------------------------------------------------------

Outcome planar_plausibility() {
  constexpr int N = 2;
  double worst_pos = 0.0, worst_ori = 0.0;
  for (int seed = 0; seed < 5; ++seed) {
    const auto sc = scenario<N>(sim::TrajectoryKind::figure_eight, 60.0, 0.095, 0.1, 40 + seed);
    const sim::Trajectory<N> traj(sc.trajectory);
    const auto ms = preprocess(sim::schedule_measurements<N>(sc, traj), PreprocessPolicy{});
    const auto res = run_batch<N>(ms, sc.setup, PriorParams<N>::isotropic(config::kDefaultPriorQ), SolverSettings{});
    const auto rep = eval::evaluate<N>(res.estimates, truth_at(traj, res.estimates), eval::Alignment::none, false);
    worst_pos = std::max(worst_pos, rep.position_rmse);
    worst_ori = std::max(worst_ori, rep.orientation_rmse);
  }
  return {worst_pos < 0.15 && worst_ori < 0.5,
          fmt::format("lever 0.095 m, sigma 0.1 m, 17 Hz, 5 seeds: worst pos {:.3f} m (< 0.15), worst ori {:.3f} rad "
                      "(< 0.5)",
                      worst_pos, worst_ori)};
}

// ---------------------------------------------------------------------------
// 8. Determinism through the executable
// ---------------------------------------------------------------------------

std::uint32_t crc_of(const fs::path& p) {
  const auto s = io::read_file(p);
  boost::crc_32_type crc;
  crc.process_bytes(s.data(), s.size());
  return crc.checksum();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RANGEPOSE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

Outcome determinism() {
  const auto dir = fs::temp_directory_path() / "rangepose_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  RangeSetup<3> setup{sim::default_anchors<3>(), sim::default_sensors<3>(0.3)};
  auto j = config::to_json(setup);
  j["trajectory"] = {{"kind", "figure_eight"}, {"duration", 20.0}};
  j["seed"] = 1;
  io::write_atomic(dir / "config.json", j.dump(2));
  std::vector<std::uint32_t> sums[2];
  for (int rep = 0; rep < 2; ++rep) {
    const auto out = dir / ("run" + std::to_string(rep));
    const auto cfg = (dir / "config.json").string();
    const auto meas = (out / cli::kMeasurementsFile).string();
    if (run_cli(fmt::format("simulate --config {} --out {} --seed 42", cfg, out.string())) != 0 ||
        run_cli(fmt::format("estimate --config {} --measurements {} --out {}", cfg, meas, (out / "batch.jsonl").string())) != 0 ||
        run_cli(fmt::format("estimate --config {} --measurements {} --mode fls --out {}", cfg, meas,
                            (out / "fls.jsonl").string())) != 0) {
      return {false, "rangepose executable failed"};
    }
    for (const char* f : {cli::kMeasurementsFile, cli::kTruthFile, "batch.jsonl", "fls.jsonl"}) {
      sums[rep].push_back(crc_of(out / f));
    }
  }
  return {sums[0] == sums[1],
          fmt::format("crc32 measurements {:08x}/{:08x}, truth {:08x}/{:08x}, batch {:08x}/{:08x}, fls {:08x}/{:08x}",
                      sums[0][0], sums[1][0], sums[0][1], sums[1][1], sums[0][2], sums[1][2], sums[0][3], sums[1][3])};
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::err);
  struct Criterion {
    const char* name;
    double budget_s;  // 0 = no runtime limit
    std::function<Outcome()> check;
  };
  const std::vector<Criterion> criteria{
      {"lie kernel properties and Jacobians", 10.0, lie_kernel},
      {"noiseless identifiability (60 s, 2D and 3D)", 30.0, noiseless},
      {"lever/noise sweep trends", 600.0, trends},
      {"uncertainty consistency (20 Monte Carlo runs)", 0.0, consistency},
      {"sensor dropout [25 s, 30 s]", 0.0, dropout},
      {"fixed-lag smoother vs batch", 0.0, fls_vs_batch},
      {"2D plausibility (lever 0.095 m, sigma 0.1 m)", 0.0, planar_plausibility},
      {"determinism of simulate + estimate", 0.0, determinism},
  };
  // Optional arguments select criteria by number.
  std::vector<bool> selected(criteria.size(), argc <= 1);
  for (int a = 1; a < argc; ++a) {
    const int k = std::atoi(argv[a]);
    if (k >= 1 && k <= static_cast<int>(criteria.size())) selected[static_cast<std::size_t>(k - 1)] = true;
  }
  int failures = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected[i]) continue;
    ++ran;
    const auto& c = criteria[i];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && dt > c.budget_s) {
      o.pass = false;
      o.detail += fmt::format("; over runtime budget {:.0f} s", c.budget_s);
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << (i + 1) << "] " << c.name << ": " << o.detail
              << fmt::format(" ({:.1f} s)", dt) << std::endl;
  }
  std::cout << (ran - failures) << "/" << ran << " criteria passed" << std::endl;
  return failures == 0 ? 0 : 1;
}
