#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "rangepose/cli.hpp"
#include "test_util.hpp"

using namespace rangepose;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("rangepose_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Default arena geometry as a config file, with the given overrides merged in.
template <int N>
fs::path write_config(const fs::path& dir, double lever, const json& overrides = json::object()) {
  RangeSetup<N> setup{sim::default_anchors<N>(), sim::default_sensors<N>(lever)};
  json j = config::to_json(setup);
  j["trajectory"] = {{"kind", "circle"}, {"duration", 12.0}};
  j["seed"] = 5;
  j.merge_patch(overrides);
  const auto path = dir / "config.json";
  io::write_atomic(path, j.dump(2));
  return path;
}

struct Run {
  int code;
  json summary;
  std::string err;
};

template <typename Opts, typename Cmd>
Run run(Cmd cmd, const Opts& opt) {
  std::ostringstream out, err;
  const int code = cmd(opt, out, err);
  Run r{code, json(), err.str()};
  if (code == cli::kOk) r.summary = json::parse(out.str());
  return r;
}

Run simulate(const fs::path& cfg, const fs::path& out, std::optional<std::uint64_t> seed = {}) {
  return run(cli::cmd_simulate, cli::SimulateOptions{cfg, out, seed});
}

Run estimate(const fs::path& cfg, const fs::path& meas, const fs::path& out, cli::Mode mode = cli::Mode::batch) {
  cli::EstimateOptions o;
  o.config = cfg;
  o.measurements = meas;
  o.out = out;
  o.mode = mode;
  return run(cli::cmd_estimate, o);
}

template <int N>
double trace_position(const Estimate<N>& e) {
  return e.covariance.template topLeftCorner<N, N>().trace();
}

}  // namespace

TEST(Cli, SimulateWritesMeasurementsAndTruth) {
  const auto dir = scratch("sim");
  const auto cfg = write_config<3>(dir, 0.2);
  const auto r = simulate(cfg, dir / "out");
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_EQ(r.summary.at("measurements"), 204);  // 12 s at 17 Hz
  const auto ms = io::read_measurements(dir / "out" / cli::kMeasurementsFile);
  const auto truth = io::read_states<3>(dir / "out" / cli::kTruthFile);
  EXPECT_EQ(ms.size(), 204u);
  EXPECT_GT(truth.size(), ms.size());
}

TEST(Cli, MissingAnchorsIsAConfigError) {
  const auto dir = scratch("noanchors");
  io::write_atomic(dir / "config.json", R"({"sensors": [{"id": 0, "lever_arm": [0.1, 0, 0]}]})");
  const auto r = simulate(dir / "config.json", dir / "out");
  EXPECT_EQ(r.code, cli::kConfig);
  EXPECT_NE(r.err.find("anchors"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "out" / cli::kMeasurementsFile));
  EXPECT_EQ(estimate(dir / "config.json", dir / "none.jsonl", dir / "e.jsonl").code, cli::kConfig);
}

TEST(Cli, MissingInputFileIsAnIoFailure) {
  const auto dir = scratch("nofile");
  EXPECT_EQ(simulate(dir / "absent.json", dir / "out").code, cli::kFailure);
  const auto cfg = write_config<2>(dir, 0.2, {{"dimension", 2}});
  EXPECT_EQ(estimate(cfg, dir / "absent.jsonl", dir / "e.jsonl").code, cli::kFailure);
}

TEST(Cli, SameSeedGivesIdenticalFiles) {
  const auto dir = scratch("seed");
  const auto cfg = write_config<3>(dir, 0.2);
  ASSERT_EQ(simulate(cfg, dir / "a").code, cli::kOk);
  ASSERT_EQ(simulate(cfg, dir / "b").code, cli::kOk);
  ASSERT_EQ(simulate(cfg, dir / "c", 99).code, cli::kOk);
  for (const char* f : {cli::kMeasurementsFile, cli::kTruthFile}) {
    EXPECT_EQ(io::read_file(dir / "a" / f), io::read_file(dir / "b" / f)) << f;
  }
  EXPECT_NE(io::read_file(dir / "a" / cli::kMeasurementsFile), io::read_file(dir / "c" / cli::kMeasurementsFile));
  ASSERT_EQ(estimate(cfg, dir / "a" / cli::kMeasurementsFile, dir / "ea.jsonl").code, cli::kOk);
  ASSERT_EQ(estimate(cfg, dir / "b" / cli::kMeasurementsFile, dir / "eb.jsonl").code, cli::kOk);
  EXPECT_EQ(io::read_file(dir / "ea.jsonl"), io::read_file(dir / "eb.jsonl"));
}

TEST(Cli, NoiselessBatchReachesZeroCost) {
  const auto dir = scratch("noiseless");
  const auto cfg = write_config<3>(dir, 0.3, {{"noise_sigma", 0.0}, {"preprocess", {{"outlier_gate", "none"}}}});
  ASSERT_EQ(simulate(cfg, dir / "sim").code, cli::kOk);
  const auto r = estimate(cfg, dir / "sim" / cli::kMeasurementsFile, dir / "est.jsonl");
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_EQ(r.summary.at("status"), "converged");
  EXPECT_LT(r.summary.at("final_cost").get<double>(), 1e-10);
  EXPECT_EQ(r.summary.at("estimates"), 204);
}

TEST(Cli, FixedLagOutputRateEqualsMeasurementRate) {
  const auto dir = scratch("fls");
  const auto cfg = write_config<2>(dir, 0.3,
                                   {{"dimension", 2},
                                    {"solver", {{"fls_window", 5.0}}},
                                    {"preprocess", {{"outlier_gate", "none"}}}});
  ASSERT_EQ(simulate(cfg, dir / "sim").code, cli::kOk);
  const auto ms = io::read_measurements(dir / "sim" / cli::kMeasurementsFile);
  const auto r = estimate(cfg, dir / "sim" / cli::kMeasurementsFile, dir / "fls.jsonl", cli::Mode::fls);
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  const auto est = io::read_estimates<2>(dir / "fls.jsonl");
  ASSERT_EQ(est.size(), ms.size());
  for (std::size_t i = 0; i < ms.size(); ++i) EXPECT_EQ(est[i].state.time, ms[i].time);
  EXPECT_LE(r.summary.at("max_window_span_s").get<double>(), 5.0 + 1.0 / 17.0 + 1e-9);
}

TEST(Cli, DropoutCovariancePeaksInsideTheGap) {
  const auto dir = scratch("dropout");
  const auto cfg = write_config<3>(dir, 0.5,
                                   {{"trajectory", {{"duration", 30.0}}}, {"dropouts", {{12.0, 17.0}}}});
  ASSERT_EQ(simulate(cfg, dir / "sim").code, cli::kOk);
  ASSERT_EQ(estimate(cfg, dir / "sim" / cli::kMeasurementsFile, dir / "est.jsonl").code, cli::kOk);
  const auto est = io::read_estimates<3>(dir / "est.jsonl");
  double peak = 0.0, peak_t = -1.0;
  for (const auto& e : est) {
    if (trace_position(e) > peak) {
      peak = trace_position(e);
      peak_t = e.state.time;
    }
  }
  EXPECT_GT(peak_t, 12.0);
  EXPECT_LT(peak_t, 17.0);
}

TEST(Cli, UnobservableGeometryNeedsOverride) {
  const auto dir = scratch("unobservable");
  json one_sensor = {{"sensors", {{{"id", 0}, {"lever_arm", {0.2, 0.0, 0.0}}}}}};
  const auto cfg = write_config<3>(dir, 0.2, one_sensor);
  ASSERT_EQ(simulate(cfg, dir / "sim").code, cli::kOk);
  const auto r = estimate(cfg, dir / "sim" / cli::kMeasurementsFile, dir / "est.jsonl");
  EXPECT_EQ(r.code, cli::kUnobservable);
  EXPECT_NE(r.err.find("sensor"), std::string::npos);
  one_sensor["allow_unobservable"] = true;
  const auto cfg2 = write_config<3>(dir, 0.2, one_sensor);
  EXPECT_EQ(estimate(cfg2, dir / "sim" / cli::kMeasurementsFile, dir / "est.jsonl").code, cli::kOk);
}

TEST(Cli, MeasurementsMustMatchTheSetup) {
  const auto dir = scratch("ids");
  const auto cfg = write_config<3>(dir, 0.2);
  io::write_measurements(dir / "m.jsonl", {{0.0, 0, 42, 3.0, 0.01}});
  const auto r = estimate(cfg, dir / "m.jsonl", dir / "est.jsonl");
  EXPECT_EQ(r.code, cli::kConfig);
  EXPECT_NE(r.err.find("42"), std::string::npos);
}

TEST(Cli, ExceptionsMapToExitCodes) {
  std::ostringstream err;
  EXPECT_EQ(cli::guarded(err, [] { return cli::kOk; }), cli::kOk);
  EXPECT_EQ(cli::guarded(err, []() -> int { throw ConfigError("c"); }), cli::kConfig);
  EXPECT_EQ(cli::guarded(err, []() -> int { throw UnobservableError("u", 2); }), cli::kUnobservable);
  EXPECT_EQ(cli::guarded(err, []() -> int { throw NumericalError("n"); }), cli::kNumerical);
  EXPECT_EQ(cli::guarded(err, []() -> int { throw io::IoError("i"); }), cli::kFailure);
  EXPECT_EQ(cli::guarded(err, []() -> int { throw ArgumentError("a"); }), cli::kFailure);
  EXPECT_NE(err.str().find("numerical failure: n"), std::string::npos);
}

TEST(Cli, ArrivalOrderSurvivesPreprocessing) {
  std::vector<RangeMeasurement> ms;
  for (int i = 0; i < 40; ++i) ms.push_back({0.1 * i, 0, i % 2, 3.0 + 0.01 * i, 0.01});
  std::swap(ms[10], ms[12]);
  ms[20].range += 5.0;  // outlier
  PreprocessPolicy p;
  p.bias = BiasTable{{{{0, 1}, 0.5}}};
  const auto out = cli::detail::preprocess_in_arrival_order(ms, p);
  ASSERT_EQ(out.size(), ms.size() - 1);
  EXPECT_EQ(out[10].time, ms[10].time);
  EXPECT_EQ(out[12].time, ms[12].time);
  for (const auto& m : out) {
    EXPECT_NE(m.time, ms[20].time);
    const double expected = 3.0 + m.time * 0.1 - (m.anchor_id == 1 ? 0.5 : 0.0);
    EXPECT_NEAR(m.range, expected, 1e-12);
  }
}

TEST(Cli, EvaluateReportsAndWritesSeries) {
  const auto dir = scratch("evaluate");
  const auto cfg = write_config<2>(dir, 0.3, {{"dimension", 2}});
  ASSERT_EQ(simulate(cfg, dir / "sim").code, cli::kOk);
  ASSERT_EQ(estimate(cfg, dir / "sim" / cli::kMeasurementsFile, dir / "est.jsonl").code, cli::kOk);
  cli::EvaluateOptions o;
  o.estimates = dir / "est.jsonl";
  o.truth = dir / "sim" / cli::kTruthFile;
  o.out = dir / "report.json";
  o.series = dir / "errors.csv";
  const auto r = run(cli::cmd_evaluate, o);
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  const auto report = io::read_json(dir / "report.json");
  EXPECT_EQ(report.at("position_rmse"), r.summary.at("position_rmse"));
  EXPECT_GT(report.at("position_rmse").get<double>(), 0.0);
  EXPECT_LT(report.at("position_rmse").get<double>(), 0.2);
  EXPECT_GE(report.at("coverage").get<double>(), 0.0);
  EXPECT_LE(report.at("coverage").get<double>(), 1.0);
  const auto series = io::parse_csv(io::read_file(dir / "errors.csv"));
  EXPECT_EQ(series.header, (std::vector<std::string>{"t", "pos_err_x", "pos_err_y", "ori_err", "nees"}));
  EXPECT_EQ(series.rows.size(), report.at("samples").get<std::size_t>());

  // Truth against itself: zero error, no covariance.
  o.estimates = dir / "sim" / cli::kTruthFile;
  o.out.reset();
  o.series.reset();
  const auto self = run(cli::cmd_evaluate, o);
  ASSERT_EQ(self.code, cli::kOk);
  EXPECT_EQ(self.summary.at("position_rmse"), 0.0);
  EXPECT_EQ(self.summary.at("orientation_rmse"), 0.0);
  EXPECT_FALSE(self.summary.at("has_covariance").get<bool>());
}

TEST(Cli, EvaluateIsInvariantToAGlobalFrameChange) {
  const auto dir = scratch("invariance");
  const auto cfg = write_config<3>(dir, 0.3);
  ASSERT_EQ(simulate(cfg, dir / "sim").code, cli::kOk);
  ASSERT_EQ(estimate(cfg, dir / "sim" / cli::kMeasurementsFile, dir / "est.jsonl").code, cli::kOk);
  auto est = io::read_estimates<3>(dir / "est.jsonl");
  auto truth = io::read_states<3>(dir / "sim" / cli::kTruthFile);
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    const auto g = rangepose::testing::random_pose<3>(rng, 5.0);
    auto est_g = est;
    auto truth_g = truth;
    // Body-frame covariances are unaffected by a change of world frame.
    for (auto& e : est_g) e.state.pose = g * e.state.pose;
    for (auto& k : truth_g) k.pose = g * k.pose;
    io::write_estimates<3>(dir / "est_g.jsonl", est_g);
    io::write_states<3>(dir / "truth_g.jsonl", truth_g);
    cli::EvaluateOptions a, b;
    a.estimates = dir / "est.jsonl";
    a.truth = dir / "sim" / cli::kTruthFile;
    b.estimates = dir / "est_g.jsonl";
    b.truth = dir / "truth_g.jsonl";
    const auto ra = run(cli::cmd_evaluate, a);
    const auto rb = run(cli::cmd_evaluate, b);
    ASSERT_EQ(rb.code, cli::kOk) << rb.err;
    EXPECT_NEAR(ra.summary.at("position_rmse").get<double>(), rb.summary.at("position_rmse").get<double>(), 1e-9);
    EXPECT_NEAR(ra.summary.at("orientation_rmse").get<double>(), rb.summary.at("orientation_rmse").get<double>(), 1e-9);
    EXPECT_NEAR(ra.summary.at("nees_mean").get<double>(), rb.summary.at("nees_mean").get<double>(), 1e-6);
  }
}

TEST(Cli, EvaluateNeedsOverlap) {
  const auto dir = scratch("overlap");
  StateKnot<2> k;
  std::vector<StateKnot<2>> early, late;
  for (int i = 0; i < 20; ++i) {
    k.time = 0.1 * i;
    early.push_back(k);
    k.time = 100.0 + 0.1 * i;
    late.push_back(k);
  }
  io::write_states<2>(dir / "a.jsonl", early);
  io::write_states<2>(dir / "b.jsonl", late);
  cli::EvaluateOptions o;
  o.estimates = dir / "a.jsonl";
  o.truth = dir / "b.jsonl";
  const auto r = run(cli::cmd_evaluate, o);
  EXPECT_EQ(r.code, cli::kFailure);
  EXPECT_NE(r.err.find("overlap"), std::string::npos);
}

TEST(Cli, SweepGridHasOneRowPerCell) {
  const auto dir = scratch("sweep");
  const auto cfg = write_config<2>(dir, 0.3,
                                   {{"dimension", 2},
                                    {"trajectory", {{"duration", 6.0}}},
                                    {"sweep", {{"levers", {0.1, 0.5, 1.0}}, {"sigmas", {0.0, 0.05, 0.1}}, {"runs", 2}}}});
  cli::SweepOptions o{cfg, dir / "grid.csv", {}, 1};
  const auto r = run(cli::cmd_sweep, o);
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  const auto grid = io::parse_csv(io::read_file(dir / "grid.csv"));
  EXPECT_EQ(grid.header, sweep::csv_columns());
  ASSERT_EQ(grid.rows.size(), 9u);
  for (const auto& row : grid.rows) {
    EXPECT_EQ(row[grid.column("runs")], 2.0);
    EXPECT_GE(row[grid.column("pos_rmse_mean")], 0.0);
  }
  EXPECT_EQ(grid.rows[0][grid.column("lever_m")], 0.1);
  EXPECT_EQ(grid.rows[1][grid.column("sigma_m")], 0.05);
  EXPECT_EQ(r.summary.at("per_sigma").size(), 3u);
  EXPECT_TRUE(r.summary.at("per_sigma")[2].contains("orientation_vs_lever_spearman"));
  EXPECT_EQ(r.summary.at("failed_runs"), 0);
}

// ---------------------------------------------------------------------------
// Sweep internals
// ---------------------------------------------------------------------------

TEST(Sweep, ScaleLeversKeepsDirections) {
  const auto s = sim::default_sensors<3>(0.2, 0.1);
  const auto scaled = sweep::scale_levers<3>(s, 1.5, 0.05);
  for (const auto& [id, sensor] : scaled.sensors) {
    EXPECT_NEAR(sensor.lever_arm.norm(), 1.5, 1e-12);
    EXPECT_NEAR(sensor.lever_arm.normalized().dot(s.at(id).lever_arm.normalized()), 1.0, 1e-12);
    EXPECT_EQ(sensor.sigma, 0.05);
  }
  EXPECT_EQ(sweep::scale_levers<3>(s, 1.5, 0.0).at(0).sigma, 0.1);
}

TEST(Sweep, SummaryStatistics) {
  sweep::Cell c;
  c.samples = {{1.0, 2.0, ""}, {3.0, 4.0, ""}};
  sweep::summarize(c);
  EXPECT_EQ(c.runs, 2);
  EXPECT_EQ(c.failures, 0);
  EXPECT_DOUBLE_EQ(c.position_mean, 2.0);
  EXPECT_DOUBLE_EQ(c.position_std, std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(c.orientation_mean, 3.0);
  c.samples.push_back({});
  c.samples.back().note = "diverged";
  sweep::summarize(c);
  EXPECT_EQ(c.failures, 1);
  EXPECT_TRUE(std::isnan(c.position_mean));
}

TEST(Sweep, TrendsOnASyntheticGrid) {
  sweep::Result r;
  r.levers = {0.1, 0.5, 1.0};
  r.sigmas = {0.01, 0.1};
  for (double l : r.levers) {
    for (double s : r.sigmas) {
      sweep::Cell c;
      c.lever = l;
      c.sigma = s;
      c.orientation_mean = s / l;
      c.position_mean = s * (1.0 + 0.1 * l);
      r.cells.push_back(c);
    }
  }
  const auto t = sweep::trends(r);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_DOUBLE_EQ(t.orientation_vs_lever[j], -1.0);
    EXPECT_TRUE(t.orientation_strictly_decreasing[j]);
    EXPECT_NEAR(t.position_spread[j], 1.1 / 1.01, 1e-12);
  }
  for (double rho : t.position_vs_sigma) EXPECT_DOUBLE_EQ(rho, 1.0);
}

TEST(Sweep, ResultsDoNotDependOnThreadCount) {
  sim::Scenario<2> sc;
  sc.setup = {sim::default_anchors<2>(), sim::default_sensors<2>(0.3)};
  sc.trajectory.kind = sim::TrajectoryKind::circle;
  sc.trajectory.duration = 5.0;
  sc.seed = 77;
  config::SweepSpec spec;
  spec.levers = {0.2, 1.0};
  spec.sigmas = {0.05, 0.1};
  spec.runs = 2;
  sweep::Pipeline<2> p;
  p.solver.report_rank = false;
  const auto a = sweep::run<2>(sc, p, spec, 1);
  const auto b = sweep::run<2>(sc, p, spec, 3);
  ASSERT_EQ(a.cells.size(), 4u);
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    EXPECT_EQ(a.cells[i].position_mean, b.cells[i].position_mean);
    EXPECT_EQ(a.cells[i].orientation_mean, b.cells[i].orientation_mean);
  }
  EXPECT_NE(a.cells[0].samples[0].position_rmse, a.cells[0].samples[1].position_rmse);
}
