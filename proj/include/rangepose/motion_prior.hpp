#pragma once
/**
 * motion_prior.hpp - white-noise-on-acceleration prior between trajectory knots.
 *
 * Between two knots the trajectory is described in local coordinates of the
 * earlier knot, gamma = [xi; xi_dot], with T(t) = T_prev exp(xi(t)^) and
 * xi_dot = J_r^-1(xi) * varpi. The local state obeys a linear SDE driven by
 * white acceleration noise of power spectral density Qc, which gives the
 * closed-form transition and process-noise blocks below.
 *
 * Every knot perturbation is ordered [d_pose; d_twist] (2 * dof entries).
 */

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <string>

#include "rangepose/errors.hpp"
#include "rangepose/lie.hpp"

namespace rangepose {

template <int N>
inline constexpr int kDof = lie::GroupDims<N>::kDof;
template <int N>
inline constexpr int kStateDof = 2 * kDof<N>;

template <int N>
using Twist = lie::Tangent<N>;
template <int N>
using StateVector = Eigen::Matrix<double, kStateDof<N>, 1>;
template <int N>
using StateMatrix = Eigen::Matrix<double, kStateDof<N>, kStateDof<N>>;

/// One trajectory node: time, pose in the world frame and body-centric twist.
template <int N>
struct StateKnot {
  double time = 0.0;
  lie::Pose<N> pose;
  Twist<N> twist = Twist<N>::Zero();
};

/// Finite entries and norm below `bound`.
template <int N>
bool twist_is_sane(const Twist<N>& w, double bound = 100.0) {
  return w.allFinite() && w.norm() < bound;
}

/// Power spectral density of the white acceleration noise.
template <int N>
struct PriorParams {
  lie::TangentMatrix<N> qc = lie::TangentMatrix<N>::Identity();

  static PriorParams isotropic(double q) {
    PriorParams p;
    p.qc = q * lie::TangentMatrix<N>::Identity();
    p.validate();
    return p;
  }

  static PriorParams diagonal(const lie::Tangent<N>& d) {
    PriorParams p;
    p.qc = d.asDiagonal();
    p.validate();
    return p;
  }

  void validate() const {
    if (!qc.allFinite() || (qc - qc.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + qc.cwiseAbs().maxCoeff())) {
      throw ConfigError("prior: Qc must be finite and symmetric");
    }
    Eigen::SelfAdjointEigenSolver<lie::TangentMatrix<N>> es(qc);
    if (es.eigenvalues().minCoeff() <= 0.0) {
      throw ConfigError("prior: Qc must be positive definite");
    }
  }
};

/// Right-perturbation difference b (-) a, so that b = a (+) diff.
template <int N>
StateVector<N> state_difference(const StateKnot<N>& a, const StateKnot<N>& b) {
  StateVector<N> d;
  d.template head<kDof<N>>() = lie::log<N>(a.pose.inverse() * b.pose);
  d.template tail<kDof<N>>() = b.twist - a.twist;
  return d;
}

template <int N>
StateKnot<N> state_retract(const StateKnot<N>& a, const StateVector<N>& delta) {
  StateKnot<N> out = a;
  out.pose = a.pose * lie::exp<N>(delta.template head<kDof<N>>());
  out.twist = a.twist + delta.template tail<kDof<N>>();
  return out;
}

namespace motion_prior {

namespace detail {

// Scalar 2x2 skeletons; every block of Phi and Q is one of these times I or Qc.
inline Eigen::Matrix2d phi_scalar(double dt) {
  Eigen::Matrix2d m;
  m << 1.0, dt, 0.0, 1.0;
  return m;
}

inline Eigen::Matrix2d q_scalar(double dt) {
  Eigen::Matrix2d m;
  m << dt * dt * dt / 3.0, dt * dt / 2.0, dt * dt / 2.0, dt;
  return m;
}

inline Eigen::Matrix2d q_scalar_inverse(double dt) {
  Eigen::Matrix2d m;
  m << 12.0 / (dt * dt * dt), -6.0 / (dt * dt), -6.0 / (dt * dt), 4.0 / dt;
  return m;
}

template <int N>
StateMatrix<N> kron(const Eigen::Matrix2d& s, const lie::TangentMatrix<N>& b) {
  constexpr int D = kDof<N>;
  StateMatrix<N> out;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) out.template block<D, D>(i * D, j * D) = s(i, j) * b;
  }
  return out;
}

template <int N>
struct LocalPair {
  lie::Tangent<N> xi;         // log(T_prev^-1 T_next)
  lie::TangentMatrix<N> jinv;  // J_r^-1(xi)
};

template <int N>
LocalPair<N> local_pair(const StateKnot<N>& prev, const StateKnot<N>& next) {
  LocalPair<N> lp;
  lp.xi = lie::log<N>(prev.pose.inverse() * next.pose);
  lp.jinv = lie::right_jacobian_inv<N>(lp.xi);
  return lp;
}

inline void require_increasing(double t_prev, double t_next, const char* where) {
  if (!(t_next > t_prev)) {
    throw ArgumentError(std::string(where) + ": knot times must be strictly increasing");
  }
}

}  // namespace detail

/// Phi(t + dt, t) = [[I, dt I], [0, I]].
template <int N>
StateMatrix<N> transition(double dt) {
  if (!(dt >= 0.0)) throw ArgumentError("transition: dt must be non-negative");
  return detail::kron<N>(detail::phi_scalar(dt), lie::TangentMatrix<N>::Identity());
}

/// Q(dt) = [[dt^3/3 Qc, dt^2/2 Qc], [dt^2/2 Qc, dt Qc]].
template <int N>
StateMatrix<N> process_noise(double dt, const PriorParams<N>& params) {
  if (!(dt > 0.0)) throw ArgumentError("process_noise: dt must be positive");
  return detail::kron<N>(detail::q_scalar(dt), params.qc);
}

/// Q(dt)^-1 in closed form; avoids inverting the badly scaled 2d x 2d matrix.
template <int N>
StateMatrix<N> process_noise_inverse(double dt, const PriorParams<N>& params) {
  if (!(dt > 0.0)) throw ArgumentError("process_noise_inverse: dt must be positive");
  const lie::TangentMatrix<N> qc_inv = params.qc.ldlt().solve(lie::TangentMatrix<N>::Identity());
  StateMatrix<N> info = detail::kron<N>(detail::q_scalar_inverse(dt), qc_inv);
  return 0.5 * (info + info.transpose());
}

/// e = [dt w_prev - xi; w_prev - J_r^-1(xi) w_next] with xi = log(T_prev^-1 T_next).
template <int N>
StateVector<N> prior_error(const StateKnot<N>& prev, const StateKnot<N>& next) {
  detail::require_increasing(prev.time, next.time, "prior_error");
  const double dt = next.time - prev.time;
  const auto lp = detail::local_pair(prev, next);
  StateVector<N> e;
  e.template head<kDof<N>>() = dt * prev.twist - lp.xi;
  e.template tail<kDof<N>>() = prev.twist - lp.jinv * next.twist;
  return e;
}

/// Linearized binary prior factor between consecutive knots.
template <int N>
struct PriorFactor {
  StateVector<N> error;
  StateMatrix<N> jac_prev;  // d error / d [d_pose_prev; d_twist_prev]
  StateMatrix<N> jac_next;
  StateMatrix<N> information;

  double cost() const { return 0.5 * error.dot(information * error); }
};

template <int N>
PriorFactor<N> prior_factor(const StateKnot<N>& prev, const StateKnot<N>& next, const PriorParams<N>& params) {
  constexpr int D = kDof<N>;
  detail::require_increasing(prev.time, next.time, "prior_factor");
  const double dt = next.time - prev.time;
  const auto lp = detail::local_pair(prev, next);
  const lie::TangentMatrix<N> eye = lie::TangentMatrix<N>::Identity();

  // d xi / d prev = -J^-1 Ad(T21^-1),  d xi / d next = J^-1
  const lie::TangentMatrix<N> dxi_prev = -lp.jinv * lie::adjoint<N>(lie::exp<N>(-lp.xi));
  const lie::TangentMatrix<N> dxi_next = lp.jinv;
  const lie::TangentMatrix<N> dv_dxi = lie::right_jacobian_inv_action_derivative<N>(lp.xi, next.twist);

  PriorFactor<N> f;
  f.error.template head<D>() = dt * prev.twist - lp.xi;
  f.error.template tail<D>() = prev.twist - lp.jinv * next.twist;

  f.jac_prev.template block<D, D>(0, 0) = -dxi_prev;
  f.jac_prev.template block<D, D>(0, D) = dt * eye;
  f.jac_prev.template block<D, D>(D, 0) = -dv_dxi * dxi_prev;
  f.jac_prev.template block<D, D>(D, D) = eye;

  f.jac_next.template block<D, D>(0, 0) = -dxi_next;
  f.jac_next.template block<D, D>(0, D).setZero();
  f.jac_next.template block<D, D>(D, 0) = -dv_dxi * dxi_next;
  f.jac_next.template block<D, D>(D, D) = -lp.jinv;

  f.information = process_noise_inverse<N>(dt, params);
  return f;
}

namespace detail {

// Posterior mean of the local state at tau given the two knots.
template <int N>
StateVector<N> local_mean(const StateKnot<N>& prev, const StateKnot<N>& next, const LocalPair<N>& lp, double tau) {
  constexpr int D = kDof<N>;
  const double dt = next.time - prev.time;
  const double s = tau - prev.time;
  const double a = next.time - tau;
  const Eigen::Matrix2d psi = q_scalar(s) * phi_scalar(a).transpose() * q_scalar_inverse(dt);
  const Eigen::Matrix2d lambda = phi_scalar(s) - psi * phi_scalar(dt);
  StateVector<N> g1;
  g1.template head<D>().setZero();
  g1.template tail<D>() = prev.twist;
  StateVector<N> g2;
  g2.template head<D>() = lp.xi;
  g2.template tail<D>() = lp.jinv * next.twist;
  const lie::TangentMatrix<N> eye = lie::TangentMatrix<N>::Identity();
  return kron<N>(lambda, eye) * g1 + kron<N>(psi, eye) * g2;
}

template <int N>
StateKnot<N> state_from_local(const StateKnot<N>& prev, const StateVector<N>& gamma, double tau) {
  constexpr int D = kDof<N>;
  StateKnot<N> out;
  out.time = tau;
  const lie::Tangent<N> xi = gamma.template head<D>();
  out.pose = prev.pose * lie::exp<N>(xi);
  out.twist = lie::right_jacobian<N>(xi) * gamma.template tail<D>();
  return out;
}

inline void require_inside(double t_prev, double t_next, double tau) {
  require_increasing(t_prev, t_next, "interpolate");
  if (tau < t_prev || tau > t_next) throw ArgumentError("interpolate: query time outside the knot interval");
}

}  // namespace detail

/// Posterior mean of the state at tau in [prev.time, next.time].
template <int N>
StateKnot<N> interpolate(const StateKnot<N>& prev, const StateKnot<N>& next, double tau,
                         const PriorParams<N>& /*params*/ = {}) {
  detail::require_inside(prev.time, next.time, tau);
  if (tau == prev.time) return prev;
  if (tau == next.time) return next;
  const auto lp = detail::local_pair(prev, next);
  return detail::state_from_local(prev, detail::local_mean(prev, next, lp, tau), tau);
}

template <int N>
struct InterpolatedState {
  StateKnot<N> state;
  StateMatrix<N> covariance;
};

/**
 * Mean and covariance of the state at tau.
 *
 * `joint_cov` is the covariance of the stacked perturbations [prev; next].
 * The map from knot perturbations to the interpolated perturbation is
 * linearized by central differences; the GP conditional covariance is added
 * on top.
 */
template <int N>
InterpolatedState<N> interpolate_with_covariance(
    const StateKnot<N>& prev, const StateKnot<N>& next, double tau, const PriorParams<N>& params,
    const Eigen::Matrix<double, 2 * kStateDof<N>, 2 * kStateDof<N>>& joint_cov) {
  constexpr int B = kStateDof<N>;
  detail::require_inside(prev.time, next.time, tau);
  InterpolatedState<N> out;
  if (tau == prev.time) {
    out.state = prev;
    out.covariance = joint_cov.template topLeftCorner<B, B>();
    return out;
  }
  if (tau == next.time) {
    out.state = next;
    out.covariance = joint_cov.template bottomRightCorner<B, B>();
    return out;
  }
  const auto lp = detail::local_pair(prev, next);
  const StateVector<N> gamma = detail::local_mean(prev, next, lp, tau);
  out.state = detail::state_from_local(prev, gamma, tau);

  constexpr double h = 1e-6;
  Eigen::Matrix<double, B, 2 * B> g;
  for (int j = 0; j < 2 * B; ++j) {
    StateVector<N> d = StateVector<N>::Zero();
    d(j % B) = h;
    auto eval = [&](double sign) {
      StateKnot<N> p = prev;
      StateKnot<N> n = next;
      if (j < B) {
        p = state_retract(prev, sign * d);
      } else {
        n = state_retract(next, sign * d);
      }
      return state_difference(out.state, interpolate(p, n, tau, params));
    };
    g.col(j) = (eval(1.0) - eval(-1.0)) / (2 * h);
  }
  StateMatrix<N> m;
  for (int j = 0; j < B; ++j) {
    StateVector<N> d = StateVector<N>::Zero();
    d(j) = h;
    m.col(j) = (state_difference(out.state, detail::state_from_local(prev, gamma + d, tau)) -
                state_difference(out.state, detail::state_from_local(prev, gamma - d, tau))) /
               (2 * h);
  }
  const double s = tau - prev.time;
  const double a = next.time - tau;
  const double dt = next.time - prev.time;
  const Eigen::Matrix2d qs = detail::q_scalar(s);
  const Eigen::Matrix2d cond =
      qs - qs * detail::phi_scalar(a).transpose() * detail::q_scalar_inverse(dt) * detail::phi_scalar(a) * qs;
  const StateMatrix<N> cond_cov = detail::kron<N>(cond, params.qc);
  out.covariance = g * joint_cov * g.transpose() + m * cond_cov * m.transpose();
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  return out;
}

}  // namespace motion_prior

}  // namespace rangepose
