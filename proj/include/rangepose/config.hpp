#pragma once
/**
 * config.hpp - JSON problem and scenario configuration.
 *
 * A single file may carry both the estimation problem (anchors, sensors,
 * prior, solver, preprocessing) and the simulation scenario (trajectory,
 * rate, noise, seed, dropouts); each command reads the sections it needs.
 */

#include <nlohmann/json.hpp>

#include <filesystem>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "rangepose/errors.hpp"
#include "rangepose/io.hpp"
#include "rangepose/motion_prior.hpp"
#include "rangepose/range_model.hpp"
#include "rangepose/sim.hpp"
#include "rangepose/solver.hpp"

namespace rangepose::config {

using nlohmann::json;

inline constexpr double kDefaultPriorQ = 0.03;

template <int N>
struct ProblemConfig {
  RangeSetup<N> setup;
  PriorParams<N> prior = PriorParams<N>::isotropic(kDefaultPriorQ);
  SolverSettings solver;
  PreprocessPolicy preprocess;
  bool allow_unobservable = false;
};

struct SweepSpec {
  std::vector<double> levers{0.014, 0.1, 0.5, 1.0, 2.8};
  std::vector<double> sigmas{0.01, 0.05, 0.1};
  int runs = 5;
  bool fls = false;  // estimator used in each run

  void validate() const {
    if (levers.empty() || sigmas.empty()) throw ConfigError("sweep: levers and sigmas must be non-empty");
    for (double l : levers)
      if (!(l > 0)) throw ConfigError("sweep.levers: lever lengths must be positive");
    for (double s : sigmas)
      if (!(s >= 0)) throw ConfigError("sweep.sigmas: noise levels must be non-negative");
    if (runs < 1) throw ConfigError("sweep.runs must be at least 1");
  }
};

namespace detail {

inline void check_version(const json& j, const std::string& where) {
  if (j.contains("schema_version")) {
    const auto v = io::field<int>(j, "schema_version", where);
    if (v > io::kSchemaVersion) throw ConfigError(where + ": unsupported schema_version " + std::to_string(v));
  }
}

inline void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, v] : j.items()) {
    if (!known.count(key)) throw ConfigError(where + ": unknown field '" + key + "'");
  }
}

template <typename T>
void optional_field(const json& j, const char* name, T& out, const std::string& where) {
  if (j.contains(name)) out = io::field<T>(j, name, where);
}

inline const json& required_array(const json& j, const char* name) {
  const auto it = j.find(name);
  if (it == j.end()) throw ConfigError(std::string("missing required field '") + name + "'");
  if (!it->is_array() || it->empty()) throw ConfigError(std::string("field '") + name + "' must be a non-empty array");
  return *it;
}

}  // namespace detail

/// 3 unless the file says otherwise.
inline int dimension_of(const json& j) {
  int d = 3;
  detail::optional_field(j, "dimension", d, "config");
  if (d != 2 && d != 3) throw ConfigError("dimension: expected 2 or 3, got " + std::to_string(d));
  return d;
}

template <int N>
AnchorMap<N> parse_anchors(const json& j) {
  AnchorMap<N> m;
  const auto& arr = detail::required_array(j, "anchors");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = "anchors[" + std::to_string(i) + "]";
    const int id = io::field<int>(arr[i], "id", where);
    if (m.positions.count(id)) throw ConfigError(where + ": duplicate anchor id " + std::to_string(id));
    const auto p = io::vector_from<N>(arr[i], "position", where);
    if (!p.allFinite()) throw ConfigError(where + ": position must be finite");
    m.positions[id] = p;
  }
  return m;
}

template <int N>
SensorConfig<N> parse_sensors(const json& j) {
  SensorConfig<N> c;
  const auto& arr = detail::required_array(j, "sensors");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = "sensors[" + std::to_string(i) + "]";
    const int id = io::field<int>(arr[i], "id", where);
    if (c.sensors.count(id)) throw ConfigError(where + ": duplicate sensor id " + std::to_string(id));
    Sensor<N> s;
    s.lever_arm = io::vector_from<N>(arr[i], "lever_arm", where);
    s.sigma = kDefaultRangeSigma;
    detail::optional_field(arr[i], "sigma", s.sigma, where);
    if (!s.lever_arm.allFinite() || !(s.sigma > 0)) {
      throw ConfigError(where + ": lever_arm must be finite and sigma positive");
    }
    c.sensors[id] = s;
  }
  return c;
}

/// "qc": scalar (isotropic) or one entry per tangent axis.
template <int N>
PriorParams<N> parse_prior(const json& j) {
  if (!j.contains("prior")) return PriorParams<N>::isotropic(kDefaultPriorQ);
  const json& p = j.at("prior");
  detail::reject_unknown(p, {"qc"}, "prior");
  if (!p.contains("qc")) return PriorParams<N>::isotropic(kDefaultPriorQ);
  const json& q = p.at("qc");
  if (q.is_number()) return PriorParams<N>::isotropic(q.get<double>());
  return PriorParams<N>::diagonal(io::vector_from<kDof<N>>(p, "qc", "prior"));
}

inline SolverSettings parse_solver(const json& j) {
  SolverSettings s;
  if (!j.contains("solver")) return s;
  const json& o = j.at("solver");
  const std::string w = "solver";
  detail::reject_unknown(o,
                         {"max_iterations", "cost_tolerance", "step_tolerance", "initial_damping", "damping_scale",
                          "max_damping", "robust_kernel", "kernel_width", "fls_window", "fls_max_iterations", "fls_cost_tolerance",
                          "knot_merge_tolerance", "max_knot_gap", "init_measurements", "gauge_sigma",
                          "out_of_order_tolerance", "init_window", "init_screen_iterations", "init_keep",
                          "init_growth", "init_stage_window", "init_stage_iterations", "init_hold_sigma"},
                         w);
  detail::optional_field(o, "max_iterations", s.max_iterations, w);
  detail::optional_field(o, "cost_tolerance", s.cost_tolerance, w);
  detail::optional_field(o, "step_tolerance", s.step_tolerance, w);
  detail::optional_field(o, "initial_damping", s.initial_damping, w);
  detail::optional_field(o, "damping_scale", s.damping_scale, w);
  detail::optional_field(o, "max_damping", s.max_damping, w);
  detail::optional_field(o, "kernel_width", s.kernel_width, w);
  detail::optional_field(o, "fls_window", s.fls_window, w);
  detail::optional_field(o, "fls_max_iterations", s.fls_max_iterations, w);
  detail::optional_field(o, "fls_cost_tolerance", s.fls_cost_tolerance, w);
  detail::optional_field(o, "knot_merge_tolerance", s.knot_merge_tolerance, w);
  detail::optional_field(o, "max_knot_gap", s.max_knot_gap, w);
  detail::optional_field(o, "init_measurements", s.init_measurements, w);
  detail::optional_field(o, "gauge_sigma", s.gauge_sigma, w);
  detail::optional_field(o, "out_of_order_tolerance", s.out_of_order_tolerance, w);
  detail::optional_field(o, "init_window", s.init_window, w);
  detail::optional_field(o, "init_screen_iterations", s.init_screen_iterations, w);
  detail::optional_field(o, "init_keep", s.init_keep, w);
  detail::optional_field(o, "init_growth", s.init_growth, w);
  detail::optional_field(o, "init_stage_window", s.init_stage_window, w);
  detail::optional_field(o, "init_stage_iterations", s.init_stage_iterations, w);
  detail::optional_field(o, "init_hold_sigma", s.init_hold_sigma, w);
  if (o.contains("robust_kernel")) {
    const auto k = io::field<std::string>(o, "robust_kernel", w);
    if (k == "none") {
      s.kernel = RobustKernel::none;
    } else if (k == "huber") {
      s.kernel = RobustKernel::huber;
    } else {
      throw ConfigError("solver.robust_kernel: expected 'none' or 'huber'");
    }
  }
  s.validate();
  return s;
}

/// Relative `bias_file` paths resolve against `base_dir`.
inline PreprocessPolicy parse_preprocess(const json& j, const std::filesystem::path& base_dir) {
  PreprocessPolicy p;
  if (!j.contains("preprocess")) return p;
  const json& o = j.at("preprocess");
  const std::string w = "preprocess";
  detail::reject_unknown(o, {"outlier_gate", "mad_k", "mad_half_width", "bias_file"}, w);
  std::string gate = "mad";
  double k = 5.0;
  int half_width = 3;
  detail::optional_field(o, "outlier_gate", gate, w);
  detail::optional_field(o, "mad_k", k, w);
  detail::optional_field(o, "mad_half_width", half_width, w);
  if (gate == "none") {
    p.gate = std::make_shared<NoGate>();
  } else if (gate == "mad") {
    if (!(k > 0) || half_width < 1) throw ConfigError("preprocess: mad_k and mad_half_width must be positive");
    p.gate = std::make_shared<MadGate>(k, half_width);
  } else {
    throw ConfigError("preprocess.outlier_gate: expected 'mad' or 'none'");
  }
  if (o.contains("bias_file")) {
    std::filesystem::path f = io::field<std::string>(o, "bias_file", w);
    if (f.is_relative()) f = base_dir / f;
    p.bias = io::bias_from_json(io::read_json(f), f.string());
  }
  return p;
}

template <int N>
ProblemConfig<N> parse_problem(const json& j, const std::filesystem::path& base_dir = ".") {
  detail::check_version(j, "config");
  ProblemConfig<N> c;
  c.setup.anchors = parse_anchors<N>(j);
  c.setup.sensors = parse_sensors<N>(j);
  c.prior = parse_prior<N>(j);
  c.solver = parse_solver(j);
  c.preprocess = parse_preprocess(j, base_dir);
  detail::optional_field(j, "allow_unobservable", c.allow_unobservable, "config");
  return c;
}

inline sim::TrajectorySpec parse_trajectory(const json& j) {
  sim::TrajectorySpec t;
  if (!j.contains("trajectory")) return t;
  const json& o = j.at("trajectory");
  const std::string w = "trajectory";
  detail::reject_unknown(
      o, {"kind", "duration", "speed", "radius", "period", "vertical_amplitude", "gp_q", "gp_step", "gp_seed"}, w);
  if (o.contains("kind")) t.kind = sim::parse_trajectory_kind(io::field<std::string>(o, "kind", w));
  detail::optional_field(o, "duration", t.duration, w);
  detail::optional_field(o, "speed", t.speed, w);
  detail::optional_field(o, "radius", t.radius, w);
  detail::optional_field(o, "period", t.period, w);
  detail::optional_field(o, "vertical_amplitude", t.vertical_amplitude, w);
  detail::optional_field(o, "gp_q", t.gp_q, w);
  detail::optional_field(o, "gp_step", t.gp_step, w);
  detail::optional_field(o, "gp_seed", t.gp_seed, w);
  t.validate();
  return t;
}

template <int N>
sim::Scenario<N> parse_scenario(const json& j, const RangeSetup<N>& setup) {
  sim::Scenario<N> sc;
  sc.setup = setup;
  sc.trajectory = parse_trajectory(j);
  detail::optional_field(j, "rate_hz", sc.rate, "config");
  detail::optional_field(j, "noise_sigma", sc.noise_sigma, "config");
  detail::optional_field(j, "seed", sc.seed, "config");
  if (j.contains("schedule")) sc.schedule = sim::parse_schedule(io::field<std::string>(j, "schedule", "config"));
  if (j.contains("dropouts")) {
    for (const auto& w : io::field<std::vector<std::vector<double>>>(j, "dropouts", "config")) {
      if (w.size() != 2) throw ConfigError("dropouts: each window must be [start, end]");
      sc.dropouts.emplace_back(w[0], w[1]);
    }
  }
  sc.validate();
  return sc;
}

inline SweepSpec parse_sweep(const json& j) {
  SweepSpec s;
  if (j.contains("sweep")) {
    const json& o = j.at("sweep");
    detail::reject_unknown(o, {"levers", "sigmas", "runs", "mode"}, "sweep");
    detail::optional_field(o, "levers", s.levers, "sweep");
    detail::optional_field(o, "sigmas", s.sigmas, "sweep");
    detail::optional_field(o, "runs", s.runs, "sweep");
    if (o.contains("mode")) {
      const auto m = io::field<std::string>(o, "mode", "sweep");
      if (m != "batch" && m != "fls") throw ConfigError("sweep.mode: expected 'batch' or 'fls'");
      s.fls = m == "fls";
    }
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Writing (used to emit self-describing example configs)
// ---------------------------------------------------------------------------

template <int N>
json to_json(const RangeSetup<N>& setup) {
  json j = {{"schema_version", io::kSchemaVersion}, {"dimension", N}};
  j["anchors"] = json::array();
  for (const auto& [id, p] : setup.anchors.positions) j["anchors"].push_back({{"id", id}, {"position", io::vector_json(p)}});
  j["sensors"] = json::array();
  for (const auto& [id, s] : setup.sensors.sensors) {
    j["sensors"].push_back({{"id", id}, {"lever_arm", io::vector_json(s.lever_arm)}, {"sigma", s.sigma}});
  }
  return j;
}

}  // namespace rangepose::config
