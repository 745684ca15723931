#pragma once
/**
 * sim.hpp - measurement simulator.
 *
 * Trajectories are analytic (or, for `gp_sample`, a dense draw from the
 * motion prior itself); ranges are scheduled one per tick at a fixed rate
 * and corrupted with Gaussian noise.
 */

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rangepose/errors.hpp"
#include "rangepose/lie.hpp"
#include "rangepose/motion_prior.hpp"
#include "rangepose/range_model.hpp"

namespace rangepose::sim {

enum class TrajectoryKind { straight_line, circle, figure_eight, stop_and_go, gp_sample };

inline TrajectoryKind parse_trajectory_kind(const std::string& s) {
  if (s == "straight_line") return TrajectoryKind::straight_line;
  if (s == "circle") return TrajectoryKind::circle;
  if (s == "figure_eight") return TrajectoryKind::figure_eight;
  if (s == "stop_and_go") return TrajectoryKind::stop_and_go;
  if (s == "gp_sample") return TrajectoryKind::gp_sample;
  throw ConfigError("trajectory.kind: unknown kind '" + s + "'");
}

inline const char* to_string(TrajectoryKind k) {
  switch (k) {
    case TrajectoryKind::straight_line:
      return "straight_line";
    case TrajectoryKind::circle:
      return "circle";
    case TrajectoryKind::figure_eight:
      return "figure_eight";
    case TrajectoryKind::stop_and_go:
      return "stop_and_go";
    case TrajectoryKind::gp_sample:
      return "gp_sample";
  }
  return "unknown";
}

/// Arena geometry shared by the default layouts (meters).
struct Arena {
  static constexpr double kLength = 7.0;
  static constexpr double kWidth = 8.0;
  static constexpr double kHeight = 3.5;
  static constexpr double kFlightHeight = 1.5;
};

struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::straight_line;
  double duration = 20.0;  // seconds; straight line default covers 10 m at 0.5 m/s
  double speed = 0.5;      // m/s (peak speed for stop_and_go)
  double radius = 2.0;     // circle radius, figure-eight half-width
  double period = 8.0;     // stop_and_go cycle length
  double vertical_amplitude = 0.0;  // figure_eight z oscillation (3D)
  // gp_sample
  double gp_q = 1e-3;       // Qc = gp_q * I
  double gp_step = 1e-3;    // integration step
  std::uint64_t gp_seed = 1;

  void validate() const {
    if (!(duration > 0)) throw ConfigError("trajectory.duration must be positive");
    if (!(speed >= 0)) throw ConfigError("trajectory.speed must be non-negative");
    if (!(radius > 0)) throw ConfigError("trajectory.radius must be positive");
    if (!(period > 0)) throw ConfigError("trajectory.period must be positive");
    if (!(gp_q > 0) || !(gp_step > 0)) throw ConfigError("trajectory: gp_q and gp_step must be positive");
  }
};

template <int N>
lie::Vector<N> arena_center() {
  lie::Vector<N> c;
  c(0) = 0.5 * Arena::kLength;
  c(1) = 0.5 * Arena::kWidth;
  if constexpr (N == 3) c(2) = Arena::kFlightHeight;
  return c;
}

template <int N>
lie::Rotation<N> yaw_rotation(double yaw) {
  if constexpr (N == 2) {
    return lie::Rotation<2>::from_angle(yaw);
  } else {
    return lie::Rotation<3>::from_rpy(0.0, 0.0, yaw);
  }
}

/// Analytic pose and body twist at any time in [0, duration].
template <int N>
class Trajectory {
 public:
  explicit Trajectory(TrajectorySpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    if (spec_.kind == TrajectoryKind::gp_sample) sample_gp();
  }

  const TrajectorySpec& spec() const { return spec_; }
  double duration() const { return spec_.duration; }

  StateKnot<N> state(double t) const {
    switch (spec_.kind) {
      case TrajectoryKind::straight_line:
        return straight(t, spec_.speed * t, spec_.speed);
      case TrajectoryKind::circle:
        return circle(t);
      case TrajectoryKind::figure_eight:
        return figure_eight(t);
      case TrajectoryKind::stop_and_go:
        return stop_and_go(t);
      case TrajectoryKind::gp_sample:
        return gp(t);
    }
    throw ConfigError("trajectory: unknown kind");
  }

 private:
  static constexpr int D = kDof<N>;

  // Straight line along the arena diagonal, centred on the arena.
  StateKnot<N> straight(double t, double s, double v) const {
    lie::Vector<N> dir = lie::Vector<N>::Zero();
    dir(0) = Arena::kLength;
    dir(1) = Arena::kWidth;
    dir.normalize();
    const double length = spec_.speed * spec_.duration;
    StateKnot<N> k;
    k.time = t;
    k.pose = lie::Pose<N>(yaw_rotation<N>(std::atan2(dir(1), dir(0))), arena_center<N>() + (s - 0.5 * length) * dir);
    k.twist.setZero();
    k.twist(0) = v;
    return k;
  }

  // Constant body twist: forward speed v and yaw rate v / r.
  StateKnot<N> circle(double t) const {
    const double w = spec_.speed / spec_.radius;
    lie::Vector<N> start = arena_center<N>();
    start(1) -= spec_.radius;
    lie::Tangent<N> twist = lie::Tangent<N>::Zero();
    twist(0) = spec_.speed;
    twist(D - 1) = w;
    StateKnot<N> k;
    k.time = t;
    k.pose = lie::Pose<N>(lie::Rotation<N>::identity(), start) * lie::exp<N>(lie::Tangent<N>(t * twist));
    k.twist = twist;
    return k;
  }

  // Lissajous curve with heading along the velocity.
  StateKnot<N> figure_eight(double t) const {
    const double a = spec_.radius, b = 0.5 * spec_.radius;
    // Angular frequency so that the mean speed roughly matches `speed`.
    const double om = spec_.speed / (1.2 * a);
    const double s1 = std::sin(om * t), c1 = std::cos(om * t);
    const double s2 = std::sin(2 * om * t), c2 = std::cos(2 * om * t);
    const Eigen::Vector2d p(a * s1, b * s2);
    const Eigen::Vector2d v(a * om * c1, 2 * b * om * c2);
    const Eigen::Vector2d acc(-a * om * om * s1, -4 * b * om * om * s2);
    const double yaw = std::atan2(v.y(), v.x());
    const double yaw_rate = (v.x() * acc.y() - v.y() * acc.x()) / v.squaredNorm();

    StateKnot<N> k;
    k.time = t;
    lie::Vector<N> pos = arena_center<N>();
    pos.template head<2>() += p;
    lie::Vector<N> vel = lie::Vector<N>::Zero();
    vel.template head<2>() = v;
    if constexpr (N == 3) {
      pos(2) += spec_.vertical_amplitude * s1;
      vel(2) = spec_.vertical_amplitude * om * c1;
    }
    const auto rot = yaw_rotation<N>(yaw);
    k.pose = lie::Pose<N>(rot, pos);
    k.twist.setZero();
    k.twist.template head<N>() = rot.matrix().transpose() * vel;
    k.twist(D - 1) = yaw_rate;
    return k;
  }

  // Straight line whose speed follows v sin^2(pi t / period), stopping once per cycle.
  StateKnot<N> stop_and_go(double t) const {
    const double T = spec_.period;
    const double v = spec_.speed * std::pow(std::sin(std::numbers::pi * t / T), 2);
    const double s = spec_.speed * (0.5 * t - T / (4 * std::numbers::pi) * std::sin(2 * std::numbers::pi * t / T));
    // Centre the path using its actual length (mean speed is half the peak).
    const double length = spec_.speed * spec_.duration;
    return straight(t, s + 0.25 * length, v);
  }

  void sample_gp() {
    const double h = spec_.gp_step;
    const auto steps = static_cast<std::size_t>(std::ceil(spec_.duration / h)) + 1;
    std::mt19937_64 rng(spec_.gp_seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    const double sd = std::sqrt(spec_.gp_q * h);
    StateKnot<N> k = circle(0.0);
    gp_.reserve(steps + 1);
    gp_.push_back(k);
    for (std::size_t i = 0; i < steps; ++i) {
      // Exact on each step for the pose given the twist; twist is a random walk.
      lie::Tangent<N> dw;
      for (int j = 0; j < D; ++j) dw(j) = sd * nd(rng);
      StateKnot<N> n;
      n.time = k.time + h;
      n.pose = k.pose * lie::exp<N>(lie::Tangent<N>(h * k.twist + 0.5 * h * dw));
      n.twist = k.twist + dw;
      gp_.push_back(n);
      k = n;
    }
  }

  StateKnot<N> gp(double t) const {
    const double h = spec_.gp_step;
    const auto i = static_cast<std::size_t>(std::clamp(std::floor(t / h), 0.0, static_cast<double>(gp_.size() - 2)));
    const auto& a = gp_[i];
    const auto& b = gp_[i + 1];
    const double s = (t - a.time) / h;
    StateKnot<N> k;
    k.time = t;
    k.pose = lie::geodesic<N>(a.pose, b.pose, s);
    k.twist = (1 - s) * a.twist + s * b.twist;
    return k;
  }

  TrajectorySpec spec_;
  std::vector<StateKnot<N>> gp_;
};

template <int N>
Trajectory<N> generate_trajectory(const TrajectorySpec& spec) {
  return Trajectory<N>(spec);
}

// ---------------------------------------------------------------------------
// Geometry defaults
// ---------------------------------------------------------------------------

/// 3D: the eight corners of the arena box. 2D: its four corners and four edge midpoints.
template <int N>
AnchorMap<N> default_anchors() {
  AnchorMap<N> m;
  int id = 0;
  if constexpr (N == 3) {
    for (double x : {0.0, Arena::kLength})
      for (double y : {0.0, Arena::kWidth})
        for (double z : {0.0, Arena::kHeight}) m.positions[id++] = Eigen::Vector3d(x, y, z);
  } else {
    const double l = Arena::kLength, w = Arena::kWidth;
    for (const auto& p : {Eigen::Vector2d(0, 0), Eigen::Vector2d(l, 0), Eigen::Vector2d(l, w), Eigen::Vector2d(0, w),
                          Eigen::Vector2d(0.5 * l, 0), Eigen::Vector2d(l, 0.5 * w), Eigen::Vector2d(0.5 * l, w),
                          Eigen::Vector2d(0, 0.5 * w)})
      m.positions[id++] = p;
  }
  return m;
}

/// 3D: right triangle (l,0,0), (0,l,0), (-l,0,0). 2D: (l,0), (-l,0).
template <int N>
SensorConfig<N> default_sensors(double lever, double sigma = kDefaultRangeSigma) {
  SensorConfig<N> c;
  if constexpr (N == 3) {
    c.sensors[0] = {Eigen::Vector3d(lever, 0, 0), sigma};
    c.sensors[1] = {Eigen::Vector3d(0, lever, 0), sigma};
    c.sensors[2] = {Eigen::Vector3d(-lever, 0, 0), sigma};
  } else {
    c.sensors[0] = {Eigen::Vector2d(lever, 0), sigma};
    c.sensors[1] = {Eigen::Vector2d(-lever, 0), sigma};
  }
  return c;
}

// ---------------------------------------------------------------------------
// Scheduling
// ---------------------------------------------------------------------------

enum class SchedulePolicy { round_robin, uniform_random };

inline SchedulePolicy parse_schedule(const std::string& s) {
  if (s == "round_robin") return SchedulePolicy::round_robin;
  if (s == "uniform_random") return SchedulePolicy::uniform_random;
  throw ConfigError("schedule: unknown policy '" + s + "'");
}

template <int N>
struct Scenario {
  RangeSetup<N> setup{default_anchors<N>(), default_sensors<N>(0.2)};
  TrajectorySpec trajectory;
  double rate = 17.0;
  SchedulePolicy schedule = SchedulePolicy::round_robin;
  double noise_sigma = 0.1;  // standard deviation, meters
  std::uint64_t seed = 0;
  std::vector<std::pair<double, double>> dropouts;

  void validate() const {
    trajectory.validate();
    if (!(rate > 0)) throw ConfigError("rate_hz must be positive");
    if (!(noise_sigma >= 0)) throw ConfigError("noise_sigma must be non-negative");
    if (setup.anchors.positions.empty()) throw ConfigError("anchors: at least one anchor is required");
    if (setup.sensors.sensors.empty()) throw ConfigError("sensors: at least one sensor is required");
    for (const auto& [a, b] : dropouts) {
      if (!(a < b) || a < 0 || b > trajectory.duration) {
        throw ConfigError("dropouts: window must satisfy 0 <= start < end <= duration");
      }
    }
  }
};

inline bool in_dropout(double t, const std::vector<std::pair<double, double>>& windows) {
  for (const auto& [a, b] : windows) {
    if (t >= a && t <= b) return true;
  }
  return false;
}

/**
 * One measurement per tick at `rate`, for ticks in [0, duration). Noise is
 * drawn on every tick, including dropped ones, so a dropout never shifts the
 * noise on the remaining measurements.
 */
template <int N>
std::vector<RangeMeasurement> schedule_measurements(const Scenario<N>& sc,
                                                    const std::function<lie::Pose<N>(double)>& truth) {
  sc.validate();
  std::vector<int> sensors, anchors;
  for (const auto& [id, s] : sc.setup.sensors.sensors) sensors.push_back(id);
  for (const auto& [id, a] : sc.setup.anchors.positions) anchors.push_back(id);
  const std::size_t pairs = sensors.size() * anchors.size();

  std::mt19937_64 rng(sc.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, pairs - 1);

  const auto ticks = static_cast<std::size_t>(std::ceil(sc.trajectory.duration * sc.rate - 1e-9));
  std::vector<RangeMeasurement> out;
  out.reserve(ticks);
  for (std::size_t i = 0; i < ticks; ++i) {
    const double t = static_cast<double>(i) / sc.rate;
    const std::size_t pair = sc.schedule == SchedulePolicy::round_robin ? i % pairs : pick(rng);
    const double eta = noise(rng);
    if (in_dropout(t, sc.dropouts)) continue;
    const int sid = sensors[pair % sensors.size()];
    const int aid = anchors[pair / sensors.size()];
    const double r =
        predict_range<N>(truth(t), sc.setup.sensors.at(sid).lever_arm, sc.setup.anchors.at(aid)) +
        sc.noise_sigma * eta;
    out.push_back({t, sid, aid, std::max(r, 0.0), sc.noise_sigma * sc.noise_sigma});
  }
  return out;
}

template <int N>
std::vector<RangeMeasurement> schedule_measurements(const Scenario<N>& sc, const Trajectory<N>& traj) {
  return schedule_measurements<N>(sc, [&](double t) { return traj.state(t).pose; });
}

/// Truth at the measurement times merged with a uniform grid (100 Hz by default).
template <int N>
std::vector<StateKnot<N>> ground_truth(const Trajectory<N>& traj, const std::vector<RangeMeasurement>& ms,
                                       double grid_rate = 100.0) {
  std::vector<double> times;
  const auto n = static_cast<std::size_t>(std::floor(traj.duration() * grid_rate + 1e-9));
  for (std::size_t i = 0; i <= n; ++i) times.push_back(static_cast<double>(i) / grid_rate);
  for (const auto& m : ms) times.push_back(m.time);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end(), [](double a, double b) { return std::abs(a - b) < 1e-12; }),
              times.end());
  std::vector<StateKnot<N>> out;
  out.reserve(times.size());
  for (double t : times) out.push_back(traj.state(t));
  return out;
}

}  // namespace rangepose::sim
