#pragma once
/**
 * solver.hpp - MAP estimation over a chain of state knots.
 *
 * Factors: one motion prior between consecutive knots, unary range factors,
 * and a dense quadratic prior on the oldest knot (the gauge prior, later
 * replaced by marginalization results). The information matrix is block
 * tridiagonal, so every solve is linear in the number of knots.
 */

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "rangepose/block_tridiagonal.hpp"
#include "rangepose/errors.hpp"
#include "rangepose/lie.hpp"
#include "rangepose/motion_prior.hpp"
#include "rangepose/range_model.hpp"

namespace rangepose {

enum class RobustKernel { none, huber };

struct SolverSettings {
  int max_iterations = 100;
  double cost_tolerance = 1e-12;  // relative cost decrease
  double step_tolerance = 1e-9;
  double initial_damping = 1e-4;
  double damping_scale = 10.0;
  double max_damping = 1e12;
  RobustKernel kernel = RobustKernel::none;
  double kernel_width = 3.0;  // in whitened units
  double fls_window = 5.0;    // seconds
  int fls_max_iterations = 10;
  double fls_cost_tolerance = 1e-6;  // per update; later updates keep refining the window
  double knot_merge_tolerance = 1e-4;
  /// Filler knots are inserted in gaps longer than this (0 disables).
  double max_knot_gap = 0.25;
  int init_measurements = 20;
  double init_window = 3.0;        // seconds solved from every candidate orientation
  int init_screen_iterations = 10;
  int init_keep = 3;               // candidates refined to convergence
  double init_growth = 2.0;        // seconds added per initialization stage
  double init_stage_window = 10.0;  // seconds re-solved per stage
  int init_stage_iterations = 20;
  double init_hold_sigma = 1e-6;    // prior holding the knot before a stage window
  double gauge_sigma = 1e6;
  double out_of_order_tolerance = 0.01;
  bool report_rank = true;

  void validate() const {
    if (max_iterations <= 0) throw ConfigError("solver: max_iterations must be positive");
    if (!(cost_tolerance > 0) || !(step_tolerance > 0) || !(fls_cost_tolerance > 0)) throw ConfigError("solver: tolerances must be positive");
    if (!(fls_window > 0)) throw ConfigError("solver: fls_window must be positive");
    if (!(initial_damping > 0) || !(damping_scale > 1)) throw ConfigError("solver: invalid damping schedule");
    if (!(kernel_width > 0)) throw ConfigError("solver: kernel width must be positive");
    if (!(knot_merge_tolerance > 0)) throw ConfigError("solver: knot_merge_tolerance must be positive");
    if (max_knot_gap < 0) throw ConfigError("solver: max_knot_gap must be non-negative");
    if (!(gauge_sigma > 0)) throw ConfigError("solver: gauge_sigma must be positive");
    if (!(init_window >= 0) || !(init_growth > 0) || !(init_stage_window > 0) || !(init_hold_sigma > 0)) {
      throw ConfigError("solver: initialization windows must be positive");
    }
    if (init_screen_iterations < 1 || init_keep < 1 || init_stage_iterations < 1) {
      throw ConfigError("solver: initialization iteration counts must be positive");
    }
  }
};

/**
 * Quadratic prior on one knot: cost = 1/2 d^T H d - b^T d + offset with
 * d = state_difference(mean, x). The linearization point `mean` is frozen.
 */
template <int N>
struct MarginalPrior {
  StateKnot<N> mean;
  StateMatrix<N> information = StateMatrix<N>::Zero();
  StateVector<N> information_vector = StateVector<N>::Zero();
  double offset = 0.0;

  static MarginalPrior gauge(const StateKnot<N>& at, double sigma) {
    MarginalPrior p;
    p.mean = at;
    p.information = StateMatrix<N>::Identity() / (sigma * sigma);
    return p;
  }

  static MarginalPrior from_covariance(const StateKnot<N>& at, const StateMatrix<N>& cov) {
    MarginalPrior p;
    p.mean = at;
    p.information = cov.inverse();
    p.information = 0.5 * (p.information + p.information.transpose()).eval();
    return p;
  }

  /// Sets `offset` so that the minimum cost is zero.
  void normalize() {
    Eigen::SelfAdjointEigenSolver<StateMatrix<N>> es(information);
    const double tol = 1e-12 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    const StateVector<N> proj = es.eigenvectors().transpose() * information_vector;
    double c = 0.0;
    for (int i = 0; i < kStateDof<N>; ++i) {
      if (es.eigenvalues()(i) > tol) c += proj(i) * proj(i) / es.eigenvalues()(i);
    }
    offset = 0.5 * c;
  }

  double cost(const StateKnot<N>& x) const {
    const StateVector<N> d = state_difference(mean, x);
    return 0.5 * d.dot(information * d) - information_vector.dot(d) + offset;
  }
};

template <int N>
struct FactorGraph {
  RangeSetup<N> setup;
  PriorParams<N> prior;
  std::vector<double> times;
  std::vector<std::vector<RangeMeasurement>> ranges;  // unary factors per knot
  std::optional<MarginalPrior<N>> head_prior;

  std::size_t num_knots() const { return times.size(); }
  std::size_t num_prior_factors() const { return times.empty() ? 0 : times.size() - 1; }
  std::size_t num_range_factors() const {
    std::size_t n = 0;
    for (const auto& r : ranges) n += r.size();
    return n;
  }

  /// Every consecutive pair carries a prior, so a valid chain is connected.
  bool connected() const {
    if (times.empty() || ranges.size() != times.size()) return false;
    for (std::size_t i = 1; i < times.size(); ++i) {
      if (!(times[i] > times[i - 1])) return false;
    }
    return true;
  }

  void append_knot(double t) {
    times.push_back(t);
    ranges.emplace_back();
  }
};

namespace detail {

/// Filler knot times strictly between a and b so that no gap exceeds max_gap.
inline std::vector<double> filler_times(double a, double b, double max_gap) {
  std::vector<double> out;
  if (max_gap <= 0 || b - a <= max_gap) return out;
  const int pieces = static_cast<int>(std::ceil((b - a) / max_gap));
  for (int k = 1; k < pieces; ++k) out.push_back(a + (b - a) * k / pieces);
  return out;
}

inline void require_finite(const RangeMeasurement& m) {
  if (!std::isfinite(m.time) || !std::isfinite(m.range) || !std::isfinite(m.variance)) {
    throw ArgumentError("measurement with non-finite values at t=" + std::to_string(m.time));
  }
}

}  // namespace detail

template <int N>
FactorGraph<N> build_graph(const std::vector<RangeMeasurement>& measurements, const RangeSetup<N>& setup,
                           const PriorParams<N>& prior, const SolverSettings& settings = {}) {
  if (measurements.empty()) throw ArgumentError("build_graph: no measurements");
  FactorGraph<N> g;
  g.setup = setup;
  g.prior = prior;
  for (const auto& m : measurements) {
    detail::require_finite(m);
    setup.sensors.at(m.sensor_id);
    setup.anchors.at(m.anchor_id);
    if (!g.times.empty()) {
      const double last = g.times.back();
      if (m.time < last) throw ArgumentError("build_graph: measurements are not time-sorted");
      if (m.time - last <= settings.knot_merge_tolerance) {
        g.ranges.back().push_back(m);
        continue;
      }
      for (double t : detail::filler_times(last, m.time, settings.max_knot_gap)) g.append_knot(t);
    }
    g.append_knot(m.time);
    g.ranges.back().push_back(m);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Linearization
// ---------------------------------------------------------------------------

namespace detail {

/// Robust cost and IRLS weight for a whitened residual.
inline double robust_cost(double r, const SolverSettings& s, double* weight) {
  if (s.kernel == RobustKernel::huber && std::abs(r) > s.kernel_width) {
    if (weight) *weight = s.kernel_width / std::abs(r);
    return s.kernel_width * std::abs(r) - 0.5 * s.kernel_width * s.kernel_width;
  }
  if (weight) *weight = 1.0;
  return 0.5 * r * r;
}

template <int N>
StateMatrix<N> marginal_prior_jacobian(const StateVector<N>& d) {
  constexpr int D = kDof<N>;
  StateMatrix<N> j = StateMatrix<N>::Identity();
  j.template topLeftCorner<D, D>() = lie::right_jacobian_inv<N>(lie::Tangent<N>(d.template head<D>()));
  return j;
}

}  // namespace detail

template <int N>
struct LinearSystem {
  BlockTridiagonal<kStateDof<N>> sys;
  double cost = 0.0;
};

/**
 * Gauss-Newton system H dx = b (b = -gradient) over the first `knot_count`
 * knots, including range factors only on the first `range_count` of them.
 */
template <int N>
LinearSystem<N> linearize(const FactorGraph<N>& g, const std::vector<StateKnot<N>>& x, const SolverSettings& s,
                          std::size_t knot_count = std::numeric_limits<std::size_t>::max(),
                          std::size_t range_count = std::numeric_limits<std::size_t>::max()) {
  constexpr int D = kDof<N>;
  const std::size_t k = std::min(knot_count, x.size());
  const std::size_t kr = std::min(range_count, k);
  LinearSystem<N> out;
  out.sys.resize(k);
  if (k == 0) return out;

  if (g.head_prior) {
    const auto& p = *g.head_prior;
    const StateVector<N> d = state_difference(p.mean, x[0]);
    const StateMatrix<N> j = detail::marginal_prior_jacobian<N>(d);
    out.cost += 0.5 * d.dot(p.information * d) - p.information_vector.dot(d) + p.offset;
    out.sys.diag[0] += j.transpose() * p.information * j;
    out.sys.rhs[0] -= j.transpose() * (p.information * d - p.information_vector);
  }

  for (std::size_t i = 0; i + 1 < k; ++i) {
    const auto f = motion_prior::prior_factor<N>(x[i], x[i + 1], g.prior);
    const StateMatrix<N> wp = f.information.lazyProduct(f.jac_prev);
    const StateMatrix<N> wn = f.information.lazyProduct(f.jac_next);
    out.cost += f.cost();
    out.sys.diag[i].noalias() += f.jac_prev.transpose().lazyProduct(wp);
    out.sys.diag[i + 1].noalias() += f.jac_next.transpose().lazyProduct(wn);
    out.sys.upper[i].noalias() += f.jac_prev.transpose().lazyProduct(wn);
    out.sys.rhs[i] -= wp.transpose() * f.error;
    out.sys.rhs[i + 1] -= wn.transpose() * f.error;
  }

  for (std::size_t i = 0; i < kr; ++i) {
    for (const auto& m : g.ranges[i]) {
      const auto r = range_residual(m, x[i].pose, g.setup);
      double w = 1.0;
      out.cost += detail::robust_cost(r.whitened, s, &w);
      const double info = w / (r.sigma * r.sigma);
      out.sys.diag[i].template topLeftCorner<D, D>() += info * r.jacobian.transpose() * r.jacobian;
      out.sys.rhs[i].template head<D>() -= info * r.error * r.jacobian.transpose();
    }
  }
  return out;
}

template <int N>
double evaluate_cost(const FactorGraph<N>& g, const std::vector<StateKnot<N>>& x, const SolverSettings& s) {
  double cost = 0.0;
  if (x.empty()) return cost;
  if (g.head_prior) cost += g.head_prior->cost(x[0]);
  for (std::size_t i = 0; i + 1 < x.size(); ++i) {
    const double dt = x[i + 1].time - x[i].time;
    const StateVector<N> e = motion_prior::prior_error<N>(x[i], x[i + 1]);
    cost += 0.5 * e.dot(motion_prior::process_noise_inverse<N>(dt, g.prior) * e);
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (const auto& m : g.ranges[i]) cost += detail::robust_cost(range_residual(m, x[i].pose, g.setup).whitened, s, nullptr);
  }
  return cost;
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt
// ---------------------------------------------------------------------------

enum class SolverStatus { converged, not_converged, numerical_failure };

inline const char* to_string(SolverStatus s) {
  switch (s) {
    case SolverStatus::converged:
      return "converged";
    case SolverStatus::not_converged:
      return "not_converged";
    case SolverStatus::numerical_failure:
      return "numerical_failure";
  }
  return "unknown";
}

struct OptimizeStats {
  SolverStatus status = SolverStatus::not_converged;
  int iterations = 0;
  std::vector<double> cost_history;  // initial cost, then one entry per accepted step
  double final_cost = 0.0;
  double damping = 0.0;
  int null_space_dim = 0;
  std::string message;
};

template <int N>
struct OptimizeResult {
  std::vector<StateKnot<N>> knots;
  OptimizeStats stats;
};

namespace detail {

template <int N>
void ensure_head_prior(FactorGraph<N>& g, const std::vector<StateKnot<N>>& x, const SolverSettings& s) {
  if (!g.head_prior && !x.empty()) g.head_prior = MarginalPrior<N>::gauge(x.front(), s.gauge_sigma);
}

template <int N>
void check_initial(const FactorGraph<N>& g, const std::vector<StateKnot<N>>& x) {
  if (x.size() != g.num_knots()) throw ArgumentError("optimize: initial estimate size does not match the graph");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(x[i].time - g.times[i]) > 1e-12) throw ArgumentError("optimize: initial knot times do not match");
  }
}

}  // namespace detail

template <int N>
OptimizeResult<N> optimize(const FactorGraph<N>& graph, std::vector<StateKnot<N>> initial, const SolverSettings& s) {
  constexpr int B = kStateDof<N>;
  using Vec = Eigen::Matrix<double, B, 1>;
  detail::check_initial(graph, initial);
  FactorGraph<N> g = graph;
  detail::ensure_head_prior(g, initial, s);

  OptimizeResult<N> res;
  res.knots = std::move(initial);
  auto& st = res.stats;
  double lambda = s.initial_damping;
  double cost = evaluate_cost(g, res.knots, s);
  st.cost_history.push_back(cost);
  if (!std::isfinite(cost)) {
    st.status = SolverStatus::numerical_failure;
    st.message = "initial cost is not finite";
    st.final_cost = cost;
    return res;
  }

  bool done = false;
  while (!done && st.iterations < s.max_iterations) {
    ++st.iterations;
    const auto lin = linearize(g, res.knots, s);
    bool accepted = false;
    while (!accepted) {
      std::vector<Vec> damp(lin.sys.size());
      for (std::size_t i = 0; i < damp.size(); ++i) {
        damp[i] = lambda * (lin.sys.diag[i].diagonal().array() + 1e-9).matrix();
      }
      const BlockTridiagonalFactor<B> fac(lin.sys, lin.sys.size(), &damp);
      if (!fac.ok()) {
        lambda *= s.damping_scale;
        if (lambda > s.max_damping) {
          st.status = SolverStatus::numerical_failure;
          st.message = "normal equations are not positive definite at knot " + std::to_string(fac.failed_at());
          done = true;
          break;
        }
        continue;
      }
      const auto dx = fac.solve();
      double step2 = 0.0;
      std::vector<StateKnot<N>> cand(res.knots.size());
      for (std::size_t i = 0; i < dx.size(); ++i) {
        step2 += dx[i].squaredNorm();
        cand[i] = state_retract(res.knots[i], StateVector<N>(dx[i]));
      }
      const double step = std::sqrt(step2);
      const double new_cost = evaluate_cost(g, cand, s);
      if (!std::isfinite(step)) {
        st.status = SolverStatus::numerical_failure;
        st.message = "non-finite step";
        done = true;
        break;
      }
      if (std::isfinite(new_cost) && new_cost <= cost) {
        const double decrease = cost - new_cost;
        res.knots = std::move(cand);
        cost = new_cost;
        st.cost_history.push_back(cost);
        lambda = std::max(lambda / s.damping_scale, 1e-12);
        spdlog::trace("lm: accepted cost {:.12g} lambda {:.3g} step {:.3g}", new_cost, lambda, step);
        accepted = true;
        if (step < s.step_tolerance || decrease <= s.cost_tolerance * std::max(cost, 1e-300) || cost == 0.0) {
          st.status = SolverStatus::converged;
          done = true;
        }
      } else if (step < s.step_tolerance) {
        // Numerically at the optimum; the step only adds round-off.
        st.status = SolverStatus::converged;
        done = true;
        break;
      } else {
        lambda *= s.damping_scale;
        if (lambda > s.max_damping) {
          st.status = SolverStatus::not_converged;
          st.message = "cost does not decrease at maximum damping";
          done = true;
          break;
        }
      }
    }
  }
  if (!done) {
    st.status = SolverStatus::not_converged;
    st.message = "maximum iterations reached";
  }
  st.final_cost = cost;
  st.damping = lambda;
  if (s.report_rank && st.status != SolverStatus::numerical_failure) {
    st.null_space_dim = count_null_directions(linearize(g, res.knots, s).sys);
  }
  spdlog::debug("optimize: {} after {} iterations, cost {:.6e} -> {:.6e}", to_string(st.status), st.iterations,
                st.cost_history.front(), cost);
  return res;
}

// ---------------------------------------------------------------------------
// Covariance and marginalization
// ---------------------------------------------------------------------------

/// Marginal covariance blocks of the requested knots (all if `ids` is empty).
template <int N>
std::vector<StateMatrix<N>> covariance(const FactorGraph<N>& graph, const std::vector<StateKnot<N>>& x,
                                       const SolverSettings& s, const std::vector<std::size_t>& ids = {},
                                       bool check_rank = true) {
  constexpr int B = kStateDof<N>;
  detail::check_initial(graph, x);
  FactorGraph<N> g = graph;
  detail::ensure_head_prior(g, x, s);
  auto lin = linearize(g, x, s);
  if (check_rank) {
    const int null_dim = count_null_directions(lin.sys);
    if (null_dim > 0) {
      throw UnobservableError("information matrix is singular: null space of dimension " + std::to_string(null_dim),
                              null_dim);
    }
  }
  std::optional<BlockTridiagonalFactor<B>> fac;
  fac.emplace(lin.sys);
  if (!fac->ok()) {
    if (check_rank) throw NumericalError("covariance: information matrix is not positive definite");
    // Regularize by a relative epsilon so unobservable directions come out large instead of failing.
    for (auto& d : lin.sys.diag) d.diagonal().array() += 1e-12 * std::max(1.0, d.cwiseAbs().maxCoeff());
    fac.emplace(lin.sys);
    if (!fac->ok()) throw NumericalError("covariance: regularized information is not positive definite");
  }
  auto all = fac->selected_inverse();
  if (ids.empty()) {
    std::vector<StateMatrix<N>> out(all.begin(), all.end());
    return out;
  }
  std::vector<StateMatrix<N>> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) {
    if (id >= all.size()) throw ArgumentError("covariance: knot id out of range");
    out.push_back(all[id]);
  }
  return out;
}

/**
 * Eliminates knots older than `horizon` by a Schur complement at the current
 * estimates, replacing them with a MarginalPrior on the oldest retained knot.
 * Returns the number of knots removed.
 */
template <int N>
std::size_t marginalize(FactorGraph<N>& g, std::vector<StateKnot<N>>& x, double horizon, const SolverSettings& s) {
  constexpr int B = kStateDof<N>;
  detail::check_initial(g, x);
  std::size_t k = 0;
  while (k < g.times.size() && g.times[k] < horizon) ++k;
  if (k == 0 || k == g.times.size()) return 0;

  detail::ensure_head_prior(g, x, s);
  const auto lin = linearize(g, x, s, k + 1, k);
  // Only the eliminated pivots must be definite; the boundary block may still be rank deficient.
  const BlockTridiagonalFactor<B> fac(lin.sys);
  if (!fac.ok() && fac.failed_at() < k) throw NumericalError("marginalize: eliminated block is not positive definite");

  MarginalPrior<N> mp;
  mp.mean = x[k];
  mp.information = fac.pivot(k);
  mp.information_vector = fac.reduced_rhs(k);
  mp.normalize();
  g.head_prior = mp;

  const auto cut = static_cast<std::ptrdiff_t>(k);
  g.times.erase(g.times.begin(), g.times.begin() + cut);
  g.ranges.erase(g.ranges.begin(), g.ranges.begin() + cut);
  x.erase(x.begin(), x.begin() + cut);
  return k;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

template <int N>
struct MultilaterationResult {
  lie::Vector<N> position = lie::Vector<N>::Zero();
  bool converged = false;
  int iterations = 0;
};

/// Position-only Gauss-Newton with identity orientation.
template <int N>
MultilaterationResult<N> multilaterate(const std::vector<RangeMeasurement>& ms, const RangeSetup<N>& setup,
                                       const lie::Vector<N>& start, int max_iterations = 50) {
  MultilaterationResult<N> res;
  res.position = start;
  std::vector<int> ids;
  for (const auto& m : ms) {
    if (std::find(ids.begin(), ids.end(), m.anchor_id) == ids.end()) ids.push_back(m.anchor_id);
  }
  if (static_cast<int>(ids.size()) < N + 1) return res;  // position is ambiguous
  double spread = 1.0;
  for (const auto& [id, a] : setup.anchors.positions) spread = std::max(spread, (a - start).norm());
  for (int it = 0; it < max_iterations; ++it) {
    res.iterations = it + 1;
    Eigen::Matrix<double, N, N> h = Eigen::Matrix<double, N, N>::Zero();
    lie::Vector<N> b = lie::Vector<N>::Zero();
    for (const auto& m : ms) {
      const lie::Vector<N> d =
          setup.anchors.at(m.anchor_id) - setup.sensors.at(m.sensor_id).lever_arm - res.position;
      const double r = d.norm();
      if (r < 1e-12) continue;
      const lie::Vector<N> j = -d / r;  // d r / d position
      h += j * j.transpose();
      b -= j * (r - m.range);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, N, N>> es(h);
    if (es.eigenvalues().minCoeff() < 1e-9 * std::max(1.0, es.eigenvalues().maxCoeff())) return res;
    const lie::Vector<N> step = h.ldlt().solve(b);
    res.position += step;
    if (!res.position.allFinite() || (res.position - start).norm() > 10.0 * spread) return res;
    if (step.norm() < 1e-10) {
      res.converged = true;
      return res;
    }
  }
  return res;
}

template <int N>
struct InitialEstimate {
  std::vector<StateKnot<N>> knots;
  bool fallback = false;
  int iterations = 0;
  std::string note;
};

namespace detail {

template <int N>
InitialEstimate<N> first_pose(const std::vector<RangeMeasurement>& ms, const RangeSetup<N>& setup) {
  InitialEstimate<N> init;
  const lie::Vector<N> centroid = setup.anchors.centroid();
  const auto ml = multilaterate<N>(ms, setup, centroid);
  init.iterations = ml.iterations;
  StateKnot<N> k;
  if (ml.converged) {
    k.pose = lie::Pose<N>(lie::Rotation<N>::identity(), ml.position);
  } else {
    k.pose = lie::Pose<N>(lie::Rotation<N>::identity(), centroid);
    init.fallback = true;
    init.note = "multilateration failed; starting at the anchor centroid";
    spdlog::warn("initialize: {}", init.note);
  }
  init.knots.push_back(k);
  return init;
}

}  // namespace detail

/// Multilaterated first pose, identity orientation, zero twist everywhere.
template <int N>
InitialEstimate<N> initialize(const FactorGraph<N>& g, const SolverSettings& s = {}) {
  std::vector<RangeMeasurement> first;
  for (const auto& rs : g.ranges) {
    for (const auto& m : rs) {
      if (static_cast<int>(first.size()) < s.init_measurements) first.push_back(m);
    }
  }
  auto init = detail::first_pose<N>(first, g.setup);
  const StateKnot<N> base = init.knots.front();
  init.knots.clear();
  for (double t : g.times) {
    StateKnot<N> k = base;
    k.time = t;
    init.knots.push_back(k);
  }
  return init;
}

namespace detail {

/// Orientations spread over the group: the 24 rotations of a cube in 3D, eight headings in 2D.
template <int N>
std::vector<lie::Rotation<N>> orientation_candidates() {
  std::vector<lie::Rotation<N>> out;
  if constexpr (N == 2) {
    for (int k = 0; k < 8; ++k) out.push_back(lie::Rotation<2>::from_angle(k * std::numbers::pi / 4));
  } else {
    std::array<int, 3> perm{0, 1, 2};
    do {
      for (int signs = 0; signs < 8; ++signs) {
        Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
        for (int r = 0; r < 3; ++r) m(r, perm[static_cast<std::size_t>(r)]) = (signs >> r) & 1 ? -1.0 : 1.0;
        if (m.determinant() > 0) out.push_back(lie::Rotation<3>::from_matrix(m));
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
  return out;
}

/// Knots [begin, end) of `g` as a graph of their own, without a head prior.
template <int N>
FactorGraph<N> subgraph(const FactorGraph<N>& g, std::size_t begin, std::size_t end) {
  FactorGraph<N> out;
  out.setup = g.setup;
  out.prior = g.prior;
  out.times.assign(g.times.begin() + static_cast<std::ptrdiff_t>(begin), g.times.begin() + static_cast<std::ptrdiff_t>(end));
  out.ranges.assign(g.ranges.begin() + static_cast<std::ptrdiff_t>(begin),
                    g.ranges.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

}  // namespace detail

/**
 * Solves the first `init_window` seconds from every candidate orientation
 * and keeps the cheapest. Candidates are screened with a few iterations; the
 * best `init_keep` are run to convergence.
 */
template <int N>
InitialEstimate<N> bootstrap(const FactorGraph<N>& g, const SolverSettings& s = {}) {
  if (g.times.empty()) throw ArgumentError("bootstrap: empty graph");
  std::size_t m = 1;
  while (m < g.times.size() && g.times[m] <= g.times.front() + s.init_window) ++m;
  const auto sub = detail::subgraph(g, 0, m);
  auto init = initialize(sub, s);

  SolverSettings screen = s;
  screen.report_rank = false;
  screen.max_iterations = s.init_screen_iterations;
  struct Candidate {
    std::vector<StateKnot<N>> knots;
    double cost;
  };
  std::vector<Candidate> cands;
  for (const auto& rot : detail::orientation_candidates<N>()) {
    std::vector<StateKnot<N>> x = init.knots;
    for (auto& k : x) k.pose = lie::Pose<N>(rot, k.pose.translation());
    auto r = optimize(sub, std::move(x), screen);
    if (r.stats.status == SolverStatus::numerical_failure) continue;
    cands.push_back({std::move(r.knots), r.stats.final_cost});
  }
  if (cands.empty()) throw NumericalError("bootstrap: every orientation candidate failed");
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.cost < b.cost; });
  cands.resize(std::min<std::size_t>(cands.size(), static_cast<std::size_t>(s.init_keep)));

  SolverSettings full = s;
  full.report_rank = false;
  double best = std::numeric_limits<double>::infinity();
  for (auto& c : cands) {
    auto r = optimize(sub, std::move(c.knots), full);
    init.iterations += r.stats.iterations;
    if (r.stats.status != SolverStatus::numerical_failure && r.stats.final_cost < best) {
      best = r.stats.final_cost;
      init.knots = std::move(r.knots);
    }
  }
  if (!std::isfinite(best)) throw NumericalError("bootstrap: every orientation candidate failed");
  return init;
}

namespace detail {

template <int N>
StateKnot<N> propagate(const StateKnot<N>& from, double t) {
  StateKnot<N> k = from;
  k.time = t;
  k.pose = from.pose * lie::exp<N>(lie::Tangent<N>((t - from.time) * from.twist));
  return k;
}

}  // namespace detail

/**
 * Bootstrap, then extend the horizon `init_growth` seconds at a time. New
 * knots are propagated from the newest estimate and the trailing
 * `init_stage_window` seconds are re-solved with the knot before them held.
 */
template <int N>
InitialEstimate<N> initialize_incremental(const FactorGraph<N>& g, const SolverSettings& s = {}) {
  auto init = bootstrap(g, s);
  auto& x = init.knots;
  const std::size_t n = g.times.size();
  SolverSettings stage = s;
  stage.report_rank = false;
  stage.max_iterations = s.init_stage_iterations;
  while (x.size() < n) {
    const double end = g.times[x.size() - 1] + s.init_growth;
    while (x.size() < n && (g.times[x.size()] <= end || x.size() < 2)) x.push_back(detail::propagate(x.back(), g.times[x.size()]));
    std::size_t begin = x.size() - 1;
    while (begin > 0 && g.times[begin - 1] >= g.times[x.size() - 1] - s.init_stage_window) --begin;
    auto sub = detail::subgraph(g, begin, x.size());
    std::vector<StateKnot<N>> xs(x.begin() + static_cast<std::ptrdiff_t>(begin), x.end());
    if (begin > 0) sub.head_prior = MarginalPrior<N>::gauge(xs.front(), s.init_hold_sigma);
    auto r = optimize(sub, std::move(xs), stage);
    init.iterations += r.stats.iterations;
    if (r.stats.status == SolverStatus::numerical_failure) {
      throw NumericalError("initialization stage at t=" + std::to_string(g.times[begin]) + " failed: " + r.stats.message);
    }
    std::copy(r.knots.begin(), r.knots.end(), x.begin() + static_cast<std::ptrdiff_t>(begin));
  }
  return init;
}

// ---------------------------------------------------------------------------
// Estimation drivers
// ---------------------------------------------------------------------------

template <int N>
struct Estimate {
  StateKnot<N> state;
  StateMatrix<N> covariance = StateMatrix<N>::Zero();
};

template <int N>
struct FlsResult {
  std::vector<Estimate<N>> filtered;  // newest knot after each update
  std::vector<Estimate<N>> smoothed;  // each knot as it leaves the window
  std::size_t dropped = 0;
  std::size_t max_window_knots = 0;
  double max_window_span = 0.0;
  int total_iterations = 0;
  bool init_fallback = false;
  SolverStatus worst_status = SolverStatus::converged;
};

namespace detail {

inline SolverStatus worse(SolverStatus a, SolverStatus b) { return static_cast<int>(a) > static_cast<int>(b) ? a : b; }

}  // namespace detail

/// Fixed-lag smoother over a time-ordered measurement stream.
template <int N>
FlsResult<N> run_fls(const std::vector<RangeMeasurement>& measurements, const RangeSetup<N>& setup,
                     const PriorParams<N>& prior, const SolverSettings& settings) {
  settings.validate();
  if (measurements.empty()) throw ArgumentError("run_fls: no measurements");
  SolverSettings s = settings;
  s.max_iterations = settings.fls_max_iterations;
  s.cost_tolerance = settings.fls_cost_tolerance;
  s.report_rank = false;

  FlsResult<N> out;
  FactorGraph<N> g;
  g.setup = setup;
  g.prior = prior;
  std::vector<StateKnot<N>> x;

  auto window_covariance = [&]() { return covariance(g, x, s, {}, false); };

  auto update = [&]() {
    auto res = optimize(g, x, s);
    x = std::move(res.knots);
    out.total_iterations += res.stats.iterations;
    out.worst_status = detail::worse(out.worst_status, res.stats.status);
    out.max_window_knots = std::max(out.max_window_knots, x.size());
    out.max_window_span = std::max(out.max_window_span, x.back().time - x.front().time);

    const auto cov = window_covariance();
    Estimate<N> newest{x.back(), cov.back()};
    if (!out.filtered.empty() && out.filtered.back().state.time == newest.state.time) {
      out.filtered.back() = newest;
    } else {
      out.filtered.push_back(newest);
    }

    const double horizon = x.back().time - s.fls_window;
    std::size_t k = 0;
    while (k < x.size() && x[k].time < horizon) ++k;
    if (k > 0 && k < x.size()) {
      for (std::size_t i = 0; i < k; ++i) out.smoothed.push_back({x[i], cov[i]});
      marginalize(g, x, horizon, s);
    }
  };

  // The first seconds (up to the window length) are solved jointly from every
  // candidate orientation; streaming starts after them. Late arrivals obey the
  // same drop rule as in the stream.
  std::vector<RangeMeasurement> head;
  const double head_end = measurements.front().time + std::min(s.init_window, s.fls_window);
  double latest = measurements.front().time;
  std::size_t next = 0;
  for (; next < measurements.size() && measurements[next].time <= head_end; ++next) {
    const auto& m = measurements[next];
    detail::require_finite(m);
    if (latest - m.time > s.out_of_order_tolerance) {
      spdlog::warn("run_fls: dropping out-of-order measurement at t={:.6f} (window head t={:.6f})", m.time, latest);
      ++out.dropped;
      continue;
    }
    latest = std::max(latest, m.time);
    head.push_back(m);
  }
  std::stable_sort(head.begin(), head.end(),
                   [](const RangeMeasurement& a, const RangeMeasurement& b) { return a.time < b.time; });
  g = build_graph<N>(head, setup, prior, s);
  {
    auto init = bootstrap(g, settings);
    out.init_fallback = init.fallback;
    out.total_iterations += init.iterations;
    x = std::move(init.knots);
  }
  g.head_prior = MarginalPrior<N>::gauge(x.front(), s.gauge_sigma);
  {
    const auto cov = window_covariance();
    for (std::size_t i = 0; i < x.size(); ++i) out.filtered.push_back({x[i], cov[i]});
    out.max_window_knots = x.size();
    out.max_window_span = x.back().time - x.front().time;
  }

  for (; next < measurements.size(); ++next) {
    const auto& m = measurements[next];
    detail::require_finite(m);
    const double last = g.times.back();
    if (m.time < last - s.knot_merge_tolerance) {
      if (last - m.time > s.out_of_order_tolerance) {
        spdlog::warn("run_fls: dropping out-of-order measurement at t={:.6f} (window head t={:.6f})", m.time, last);
        ++out.dropped;
        continue;
      }
      g.ranges.back().push_back(m);
    } else if (m.time - last <= s.knot_merge_tolerance) {
      g.ranges.back().push_back(m);
    } else {
      for (double t : detail::filler_times(last, m.time, s.max_knot_gap)) {
        x.push_back(detail::propagate(x.back(), t));
        g.append_knot(t);
        update();
      }
      x.push_back(detail::propagate(x.back(), m.time));
      g.append_knot(m.time);
      g.ranges.back().push_back(m);
    }
    update();
  }

  const auto cov = window_covariance();
  for (std::size_t i = 0; i < x.size(); ++i) out.smoothed.push_back({x[i], cov[i]});
  return out;
}

template <int N>
struct BatchResult {
  std::vector<Estimate<N>> estimates;
  OptimizeStats stats;
  bool init_fallback = false;
};

/**
 * Full-trajectory MAP. With `warm_start` the LM iterations start from the
 * incremental initialization instead of the static one.
 */
template <int N>
BatchResult<N> run_batch(const std::vector<RangeMeasurement>& measurements, const RangeSetup<N>& setup,
                         const PriorParams<N>& prior, const SolverSettings& settings, bool warm_start = true) {
  settings.validate();
  auto g = build_graph<N>(measurements, setup, prior, settings);
  const auto init = warm_start ? initialize_incremental(g, settings) : initialize(g, settings);
  BatchResult<N> out;
  out.init_fallback = init.fallback;
  std::vector<StateKnot<N>> x0 = init.knots;
  g.head_prior = MarginalPrior<N>::gauge(x0.front(), settings.gauge_sigma);
  auto res = optimize(g, x0, settings);
  out.stats = res.stats;
  if (res.stats.status == SolverStatus::numerical_failure) {
    throw NumericalError("batch optimization failed: " + res.stats.message);
  }
  // With report_rank off a rank-deficient problem gets a regularized covariance instead of an error.
  const auto cov = covariance(g, res.knots, settings, {}, settings.report_rank);
  for (std::size_t i = 0; i < res.knots.size(); ++i) out.estimates.push_back({res.knots[i], cov[i]});
  return out;
}

}  // namespace rangepose
