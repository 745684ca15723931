#pragma once
/**
 * lie.hpp - SE(2)/SE(3) kernel shared by every other module.
 *
 * Both groups are handled by one set of templates parameterized by the
 * spatial dimension N (2 or 3). Tangent vectors are always stored
 * translation first:
 *
 *   SE(2):  [rho_x, rho_y, theta]
 *   SE(3):  [rho_x, rho_y, rho_z, phi_x, phi_y, phi_z]
 *
 * Perturbations are applied on the right, T = Tbar * exp(xi^), so every
 * Jacobian in this library is expressed in the body frame.
 */

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>
#include <unsupported/Eigen/AutoDiff>

#include <cmath>
#include <numbers>
#include <string>

#include <spdlog/spdlog.h>

#include "rangepose/errors.hpp"

namespace rangepose::lie {

template <int N>
struct GroupDims {
  static_assert(N == 2 || N == 3, "only planar and spatial poses are supported");
  static constexpr int kDim = N;
  static constexpr int kRotDof = N == 2 ? 1 : 3;
  static constexpr int kDof = N + kRotDof;
};

template <int N, typename S = double>
using Vector = Eigen::Matrix<S, N, 1>;
template <int N, typename S = double>
using Tangent = Eigen::Matrix<S, GroupDims<N>::kDof, 1>;
template <int N, typename S = double>
using RotTangent = Eigen::Matrix<S, GroupDims<N>::kRotDof, 1>;
template <int N, typename S = double>
using TangentMatrix = Eigen::Matrix<S, GroupDims<N>::kDof, GroupDims<N>::kDof>;
template <int N, typename S = double>
using AlgebraMatrix = Eigen::Matrix<S, N + 1, N + 1>;

/// Rotation angle below which closed-form coefficients switch to Taylor series.
inline constexpr double kSeriesThreshold = 0.05;
/// Drift in R^T R - I that triggers re-orthonormalization after composition.
inline constexpr double kOrthonormalityTolerance = 1e-9;
/// Distance to pi at which log() warns about the branch cut.
inline constexpr double kNearPiTolerance = 1e-6;

namespace detail {

inline double value_of(double x) { return x; }
template <typename D>
double value_of(const Eigen::AutoDiffScalar<D>& x) {
  return x.value();
}

// Each coefficient takes theta^2 so the series branch never needs sqrt(0).
template <typename S>
S series(const S& tsq, double c0, double c1, double c2, double c3, double c4) {
  return c0 + tsq * (c1 + tsq * (c2 + tsq * (c3 + tsq * c4)));
}

inline bool use_series(double tsq) { return tsq < kSeriesThreshold * kSeriesThreshold; }

// sin(t)/t
template <typename S>
S sinc(const S& tsq) {
  using std::sin;
  using std::sqrt;
  if (use_series(value_of(tsq))) {
    return series(tsq, 1.0, -1.0 / 6, 1.0 / 120, -1.0 / 5040, 1.0 / 362880);
  }
  const S t = sqrt(tsq);
  return sin(t) / t;
}

// (1 - cos t)/t^2
template <typename S>
S cosc(const S& tsq) {
  using std::sin;
  using std::sqrt;
  if (use_series(value_of(tsq))) {
    return series(tsq, 0.5, -1.0 / 24, 1.0 / 720, -1.0 / 40320, 1.0 / 3628800);
  }
  const S t = sqrt(tsq);
  const S s = sin(t / 2) / t;
  return 2.0 * s * s;
}

// (t - sin t)/t^3
template <typename S>
S sinc3(const S& tsq) {
  using std::sin;
  using std::sqrt;
  if (use_series(value_of(tsq))) {
    return series(tsq, 1.0 / 6, -1.0 / 120, 1.0 / 5040, -1.0 / 362880, 1.0 / 39916800);
  }
  const S t = sqrt(tsq);
  return (t - sin(t)) / (tsq * t);
}

// (t^2 + 2 cos t - 2)/(2 t^4)
template <typename S>
S quartic_cos(const S& tsq) {
  using std::cos;
  using std::sqrt;
  if (use_series(value_of(tsq))) {
    return series(tsq, 1.0 / 24, -1.0 / 720, 1.0 / 40320, -1.0 / 3628800, 1.0 / 479001600);
  }
  const S t = sqrt(tsq);
  return (tsq + 2.0 * cos(t) - 2.0) / (2.0 * tsq * tsq);
}

// (2t - 3 sin t + t cos t)/(2 t^5)
template <typename S>
S quintic_sin(const S& tsq) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  if (use_series(value_of(tsq))) {
    return series(tsq, 1.0 / 120, -1.0 / 2520, 1.0 / 120960, -1.0 / 9979200, 1.0 / 1245404160);
  }
  const S t = sqrt(tsq);
  return (2.0 * t - 3.0 * sin(t) + t * cos(t)) / (2.0 * tsq * tsq * t);
}

// (1 - (t/2) cot(t/2))/t^2, the quadratic coefficient of every inverse Jacobian
template <typename S>
S inv_jacobian_coeff(const S& tsq) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  if (use_series(value_of(tsq))) {
    return series(tsq, 1.0 / 12, 1.0 / 720, 1.0 / 30240, 1.0 / 1209600, 1.0 / 47900160);
  }
  const S t = sqrt(tsq);
  return (1.0 - (t / 2) * cos(t / 2) / sin(t / 2)) / tsq;
}

}  // namespace detail

template <typename S>
Eigen::Matrix<S, 3, 3> skew(const Eigen::Matrix<S, 3, 1>& v) {
  Eigen::Matrix<S, 3, 3> m;
  // clang-format off
  m << S(0), -v(2),  v(1),
       v(2),  S(0), -v(0),
      -v(1),  v(0),  S(0);
  // clang-format on
  return m;
}

/// Planar generator [[0,-1],[1,0]].
inline Eigen::Matrix2d planar_generator() {
  Eigen::Matrix2d j;
  j << 0, -1, 1, 0;
  return j;
}

/// Rotation part of hat: skew(phi) in 3D, theta*J in 2D.
template <int N, typename S>
Eigen::Matrix<S, N, N> rot_hat(const RotTangent<N, S>& phi) {
  if constexpr (N == 2) {
    Eigen::Matrix<S, 2, 2> m;
    m << S(0), -phi(0), phi(0), S(0);
    return m;
  } else {
    return skew<S>(phi);
  }
}

/// d(rot_hat(phi) * x)/d phi.
template <int N>
Eigen::Matrix<double, N, GroupDims<N>::kRotDof> rot_hat_action_jacobian(const Vector<N>& x) {
  if constexpr (N == 2) {
    return planar_generator() * x;
  } else {
    return -skew<double>(x);
  }
}

template <int N>
class Rotation {
 public:
  using Matrix = Eigen::Matrix<double, N, N>;

  Rotation() : m_(Matrix::Identity()) {}

  static Rotation identity() { return Rotation(); }

  /// Validates orthonormality and det = +1 to within 1e-9.
  static Rotation from_matrix(const Matrix& m) {
    if (!((m.transpose() * m - Matrix::Identity()).cwiseAbs().maxCoeff() <= 1e-9) ||
        std::abs(m.determinant() - 1.0) > 1e-9) {
      throw ArgumentError("rotation matrix is not orthonormal with det +1");
    }
    return Rotation(m);
  }

  /// Projects a nearly orthonormal matrix onto the group.
  static Rotation orthonormalized(const Matrix& m) {
    if constexpr (N == 2) {
      return from_angle(std::atan2(m(1, 0) - m(0, 1), m(0, 0) + m(1, 1)));
    } else {
      Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
      Matrix r = svd.matrixU() * svd.matrixV().transpose();
      if (r.determinant() < 0) {
        Matrix u = svd.matrixU();
        u.col(2) *= -1.0;
        r = u * svd.matrixV().transpose();
      }
      return Rotation(r);
    }
  }

  /// Wraps a matrix that is orthonormal by construction, skipping validation.
  static Rotation assume_orthonormal(const Matrix& m) { return Rotation(m); }

  static Rotation from_angle(double theta)
    requires(N == 2)
  {
    Matrix m;
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    m << c, -s, s, c;
    return Rotation(m);
  }

  static Rotation from_quaternion(const Eigen::Quaterniond& q)
    requires(N == 3)
  {
    return Rotation(q.normalized().toRotationMatrix());
  }

  /// Z-Y-X (yaw, pitch, roll) convention.
  static Rotation from_rpy(double roll, double pitch, double yaw)
    requires(N == 3)
  {
    const Eigen::Matrix3d m = (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()) *
                               Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitY()) *
                               Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitX()))
                                  .toRotationMatrix();
    return Rotation(m);
  }

  const Matrix& matrix() const { return m_; }

  double angle() const
    requires(N == 2)
  {
    return std::atan2(m_(1, 0), m_(0, 0));
  }

  Eigen::Quaterniond quaternion() const
    requires(N == 3)
  {
    return Eigen::Quaterniond(m_).normalized();
  }

  Rotation inverse() const { return Rotation(m_.transpose()); }

  Rotation operator*(const Rotation& other) const { return checked(m_ * other.m_); }

  Vector<N> operator*(const Vector<N>& x) const { return m_ * x; }

  double orthonormality_error() const {
    return (m_.transpose() * m_ - Matrix::Identity()).cwiseAbs().maxCoeff();
  }

 private:
  explicit Rotation(const Matrix& m) : m_(m) {}

  static Rotation checked(const Matrix& m) {
    if ((m.transpose() * m - Matrix::Identity()).cwiseAbs().maxCoeff() > kOrthonormalityTolerance) {
      return orthonormalized(m);
    }
    return Rotation(m);
  }

  Matrix m_;
};

template <int N>
class Pose {
 public:
  Pose() : translation_(Vector<N>::Zero()) {}
  Pose(const Rotation<N>& rotation, const Vector<N>& translation)
      : rotation_(rotation), translation_(translation) {}

  static Pose identity() { return Pose(); }

  const Rotation<N>& rotation() const { return rotation_; }
  const Vector<N>& translation() const { return translation_; }

  Pose operator*(const Pose& other) const {
    return Pose(rotation_ * other.rotation_, rotation_ * other.translation_ + translation_);
  }

  Pose inverse() const {
    const Rotation<N> rt = rotation_.inverse();
    return Pose(rt, -(rt * translation_));
  }

  /// Rotate, then translate.
  Vector<N> act(const Vector<N>& x) const { return rotation_ * x + translation_; }

  AlgebraMatrix<N> matrix() const {
    AlgebraMatrix<N> m = AlgebraMatrix<N>::Identity();
    m.template topLeftCorner<N, N>() = rotation_.matrix();
    m.template topRightCorner<N, 1>() = translation_;
    return m;
  }

 private:
  Rotation<N> rotation_;
  Vector<N> translation_;
};

template <int N, typename S>
RotTangent<N, S> rot_part(const Tangent<N, S>& v) {
  return v.template tail<GroupDims<N>::kRotDof>();
}

template <int N, typename S>
Vector<N, S> trans_part(const Tangent<N, S>& v) {
  return v.template head<N>();
}

template <int N, typename S = double>
AlgebraMatrix<N, S> hat(const Tangent<N, S>& v) {
  AlgebraMatrix<N, S> m = AlgebraMatrix<N, S>::Zero();
  m.template topLeftCorner<N, N>() = rot_hat<N, S>(rot_part<N, S>(v));
  m.template topRightCorner<N, 1>() = trans_part<N, S>(v);
  return m;
}

/// Runtime-sized overload; rejects vectors of the wrong length.
template <int N>
AlgebraMatrix<N> hat(const Eigen::VectorXd& v) {
  if (v.size() != GroupDims<N>::kDof) {
    throw ConfigError("hat: expected a tangent vector of size " + std::to_string(GroupDims<N>::kDof) +
                      ", got " + std::to_string(v.size()));
  }
  return hat<N, double>(Tangent<N>(v));
}

template <int N>
Tangent<N> vee(const AlgebraMatrix<N>& m) {
  Tangent<N> v;
  v.template head<N>() = m.template topRightCorner<N, 1>();
  if constexpr (N == 2) {
    v(2) = m(1, 0);
  } else {
    v(3) = m(2, 1);
    v(4) = m(0, 2);
    v(5) = m(1, 0);
  }
  return v;
}

/// Left Jacobian of SO(N), i.e. the V matrix of the SE(N) exponential.
template <int N>
Eigen::Matrix<double, N, N> so_left_jacobian(const RotTangent<N>& phi) {
  const double tsq = phi.squaredNorm();
  const Eigen::Matrix<double, N, N> h = rot_hat<N, double>(phi);
  if constexpr (N == 2) {
    return detail::sinc(tsq) * Eigen::Matrix2d::Identity() + detail::cosc(tsq) * h;
  } else {
    return Eigen::Matrix3d::Identity() + detail::cosc(tsq) * h + detail::sinc3(tsq) * h * h;
  }
}

template <int N>
Eigen::Matrix<double, N, N> so_left_jacobian_inv(const RotTangent<N>& phi) {
  const double tsq = phi.squaredNorm();
  if constexpr (N == 2) {
    const double a = detail::sinc(tsq);
    const double b = detail::cosc(tsq) * phi(0);
    return (a * Eigen::Matrix2d::Identity() - b * planar_generator()) / (a * a + b * b);
  } else {
    const Eigen::Matrix3d h = skew<double>(phi);
    return Eigen::Matrix3d::Identity() - 0.5 * h + detail::inv_jacobian_coeff(tsq) * h * h;
  }
}

template <int N>
Rotation<N> so_exp(const RotTangent<N>& phi) {
  if constexpr (N == 2) {
    return Rotation<2>::from_angle(phi(0));
  } else {
    const double tsq = phi.squaredNorm();
    const Eigen::Matrix3d h = skew<double>(phi);
    const Eigen::Matrix3d m = Eigen::Matrix3d::Identity() + detail::sinc(tsq) * h + detail::cosc(tsq) * h * h;
    return Rotation<3>::assume_orthonormal(m);
  }
}

/// Principal-branch logarithm of a rotation; the angle lies in [0, pi].
template <int N>
RotTangent<N> so_log(const Rotation<N>& r) {
  RotTangent<N> phi;
  if constexpr (N == 2) {
    phi(0) = r.angle();
  } else {
    Eigen::Quaterniond q = r.quaternion();
    if (q.w() < 0) q.coeffs() *= -1.0;
    const Eigen::Vector3d v = q.vec();
    const double n = v.norm();
    if (n < 1e-12) {
      phi = 2.0 * v / q.w();
    } else {
      phi = (2.0 * std::atan2(n, q.w()) / n) * v;
    }
  }
  return phi;
}

template <int N>
Pose<N> exp(const Tangent<N>& v) {
  const RotTangent<N> phi = rot_part<N, double>(v);
  return Pose<N>(so_exp<N>(phi), so_left_jacobian<N>(phi) * trans_part<N, double>(v));
}

template <int N>
Tangent<N> log(const Pose<N>& t) {
  const RotTangent<N> phi = so_log<N>(t.rotation());
  if (phi.norm() > std::numbers::pi - kNearPiTolerance) {
    spdlog::warn("lie::log: rotation angle {:.9f} is within {} of pi; returning principal value", phi.norm(),
                 kNearPiTolerance);
  }
  Tangent<N> v;
  v.template head<N>() = so_left_jacobian_inv<N>(phi) * t.translation();
  v.template tail<GroupDims<N>::kRotDof>() = phi;
  return v;
}

/// Adjoint of a pose: exp(Ad(T) xi) = T exp(xi) T^-1.
template <int N>
TangentMatrix<N> adjoint(const Pose<N>& t) {
  TangentMatrix<N> a = TangentMatrix<N>::Zero();
  const auto& r = t.rotation().matrix();
  a.template topLeftCorner<N, N>() = r;
  if constexpr (N == 2) {
    a.template topRightCorner<2, 1>() = -planar_generator() * t.translation();
    a(2, 2) = 1.0;
  } else {
    a.template topRightCorner<3, 3>() = skew<double>(t.translation()) * r;
    a.template bottomRightCorner<3, 3>() = r;
  }
  return a;
}

/// Lie-algebra adjoint: ad(a) b = vee([a^, b^]).
template <int N, typename S = double>
TangentMatrix<N, S> ad(const Tangent<N, S>& v) {
  TangentMatrix<N, S> a = TangentMatrix<N, S>::Zero();
  const RotTangent<N, S> phi = rot_part<N, S>(v);
  const Vector<N, S> rho = trans_part<N, S>(v);
  a.template topLeftCorner<N, N>() = rot_hat<N, S>(phi);
  if constexpr (N == 2) {
    a(0, 2) = rho(1);
    a(1, 2) = -rho(0);
  } else {
    a.template topRightCorner<3, 3>() = skew<S>(rho);
    a.template bottomRightCorner<3, 3>() = skew<S>(phi);
  }
  return a;
}

namespace detail {

// Translational coupling block of the SE(3) left Jacobian.
template <typename S>
Eigen::Matrix<S, 3, 3> se3_left_q(const Eigen::Matrix<S, 3, 1>& rho, const Eigen::Matrix<S, 3, 1>& phi) {
  const S tsq = phi.squaredNorm();
  const Eigen::Matrix<S, 3, 3> p = skew<S>(phi);
  const Eigen::Matrix<S, 3, 3> r = skew<S>(rho);
  const Eigen::Matrix<S, 3, 3> pr = p * r;
  const Eigen::Matrix<S, 3, 3> rp = r * p;
  const Eigen::Matrix<S, 3, 3> prp = pr * p;
  return S(0.5) * r + sinc3(tsq) * (pr + rp + prp) + quartic_cos(tsq) * (p * pr + rp * p - S(3) * prp) +
         quintic_sin(tsq) * (prp * p + p * prp);
}

}  // namespace detail

/// Right Jacobian: exp(xi + d) ~= exp(xi) exp(J_r(xi) d).
template <int N>
TangentMatrix<N> right_jacobian(const Tangent<N>& v) {
  if constexpr (N == 2) {
    const double tsq = v(2) * v(2);
    const TangentMatrix<2> a = ad<2>(v);
    return TangentMatrix<2>::Identity() - detail::cosc(tsq) * a + detail::sinc3(tsq) * a * a;
  } else {
    const Eigen::Vector3d rho = v.template head<3>();
    const Eigen::Vector3d phi = v.template tail<3>();
    const double tsq = phi.squaredNorm();
    const Eigen::Matrix3d h = skew<double>(phi);
    const Eigen::Matrix3d jr = Eigen::Matrix3d::Identity() - detail::cosc(tsq) * h + detail::sinc3(tsq) * h * h;
    TangentMatrix<3> j = TangentMatrix<3>::Zero();
    j.topLeftCorner<3, 3>() = jr;
    j.bottomRightCorner<3, 3>() = jr;
    j.topRightCorner<3, 3>() = detail::se3_left_q<double>(-rho, -phi);
    return j;
  }
}

/// Inverse right Jacobian; templated on the scalar so it can be differentiated.
template <int N, typename S = double>
TangentMatrix<N, S> right_jacobian_inv(const Tangent<N, S>& v) {
  if constexpr (N == 2) {
    const S tsq = v(2) * v(2);
    const TangentMatrix<2, S> a = ad<2, S>(v);
    return TangentMatrix<2, S>::Identity() + S(0.5) * a + detail::inv_jacobian_coeff(tsq) * (a * a);
  } else {
    const Eigen::Matrix<S, 3, 1> rho = v.template head<3>();
    const Eigen::Matrix<S, 3, 1> phi = v.template tail<3>();
    const S tsq = phi.squaredNorm();
    const Eigen::Matrix<S, 3, 3> h = skew<S>(phi);
    const Eigen::Matrix<S, 3, 3> jinv =
        Eigen::Matrix<S, 3, 3>::Identity() + S(0.5) * h + detail::inv_jacobian_coeff(tsq) * (h * h);
    const Eigen::Matrix<S, 3, 1> mrho = -rho;
    const Eigen::Matrix<S, 3, 1> mphi = -phi;
    TangentMatrix<3, S> j = TangentMatrix<3, S>::Zero();
    j.template topLeftCorner<3, 3>() = jinv;
    j.template bottomRightCorner<3, 3>() = jinv;
    j.template topRightCorner<3, 3>() = -(jinv * detail::se3_left_q<S>(mrho, mphi) * jinv);
    return j;
  }
}

/// d(J_r^-1(xi) w)/d xi, evaluated exactly by forward-mode differentiation.
template <int N>
TangentMatrix<N> right_jacobian_inv_action_derivative(const Tangent<N>& xi, const Tangent<N>& w) {
  constexpr int D = GroupDims<N>::kDof;
  using Dual = Eigen::AutoDiffScalar<Eigen::Matrix<double, D, 1>>;
  Tangent<N, Dual> xi_dual;
  for (int i = 0; i < D; ++i) xi_dual(i) = Dual(xi(i), D, i);
  const Tangent<N, Dual> y = right_jacobian_inv<N, Dual>(xi_dual) * w.template cast<Dual>();
  TangentMatrix<N> out;
  for (int i = 0; i < D; ++i) out.row(i) = y(i).derivatives().transpose();
  return out;
}

/// Geodesic interpolation a * exp(s * log(a^-1 b)).
template <int N>
Pose<N> geodesic(const Pose<N>& a, const Pose<N>& b, double s) {
  return a * exp<N>(s * log<N>(a.inverse() * b));
}

/// Rotation angle of the relative rotation a^T b, wrapped to [0, pi].
template <int N>
double angular_distance(const Rotation<N>& a, const Rotation<N>& b) {
  return so_log<N>(a.inverse() * b).norm();
}

}  // namespace rangepose::lie
