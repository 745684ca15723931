#pragma once
/**
 * evaluate.hpp - accuracy and consistency metrics against ground truth.
 */

#include <Eigen/Core>
#include <Eigen/Cholesky>

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "rangepose/errors.hpp"
#include "rangepose/lie.hpp"
#include "rangepose/motion_prior.hpp"
#include "rangepose/solver.hpp"

namespace rangepose::eval {

enum class Alignment { none, interpolated };

inline Alignment parse_alignment(const std::string& s) {
  if (s == "none") return Alignment::none;
  if (s == "interpolated" || s == "time-interpolated") return Alignment::interpolated;
  throw ConfigError("alignment: expected 'none' or 'interpolated', got '" + s + "'");
}

/// Timestamp tolerance when associating estimates with truth samples.
inline constexpr double kAssociationTolerance = 5e-3;
inline constexpr std::size_t kMinSamples = 10;

template <int N>
struct EvaluationReport {
  double position_rmse = 0.0;
  double orientation_rmse = 0.0;
  std::size_t samples = 0;
  std::vector<double> times;
  std::vector<lie::Vector<N>> position_error;        // world frame
  std::vector<lie::RotTangent<N>> orientation_error;  // body frame, log(R_est^T R_true)
  std::vector<double> nees;                           // empty if no covariance was supplied
  lie::Vector<N> position_coverage = lie::Vector<N>::Zero();
  lie::RotTangent<N> orientation_coverage = lie::RotTangent<N>::Zero();
  bool has_covariance = false;

  /// Mean 3-sigma coverage over all pose axes.
  double coverage() const {
    return (position_coverage.sum() + orientation_coverage.sum()) /
           static_cast<double>(N + lie::GroupDims<N>::kRotDof);
  }
};

/// Truth at time t: nearest sample within tolerance, or geodesic interpolation between neighbours.
template <int N>
std::optional<StateKnot<N>> truth_at(const std::vector<StateKnot<N>>& truth, double t, Alignment align) {
  if (truth.empty()) return std::nullopt;
  auto it = std::lower_bound(truth.begin(), truth.end(), t, [](const StateKnot<N>& k, double v) { return k.time < v; });
  const StateKnot<N>* nearest = nullptr;
  double best = std::numeric_limits<double>::infinity();
  for (auto c : {it, it == truth.begin() ? it : std::prev(it)}) {
    if (c != truth.end() && std::abs(c->time - t) < best) {
      best = std::abs(c->time - t);
      nearest = &*c;
    }
  }
  if (align == Alignment::none || best <= 1e-12) {
    if (nearest && best <= kAssociationTolerance) return *nearest;
    return std::nullopt;
  }
  if (it == truth.begin() || it == truth.end()) {
    if (nearest && best <= kAssociationTolerance) return *nearest;
    return std::nullopt;
  }
  const StateKnot<N>& a = *std::prev(it);
  const StateKnot<N>& b = *it;
  const double s = (t - a.time) / (b.time - a.time);
  StateKnot<N> k;
  k.time = t;
  k.pose = lie::geodesic<N>(a.pose, b.pose, s);
  k.twist = (1 - s) * a.twist + s * b.twist;
  return k;
}

template <int N>
EvaluationReport<N> evaluate(const std::vector<Estimate<N>>& estimates, const std::vector<StateKnot<N>>& truth,
                             Alignment align = Alignment::interpolated, bool use_covariance = true) {
  constexpr int R = lie::GroupDims<N>::kRotDof;
  EvaluationReport<N> rep;
  rep.has_covariance = use_covariance;
  double pos_sq = 0.0, ori_sq = 0.0;
  lie::Vector<N> pos_in = lie::Vector<N>::Zero();
  lie::RotTangent<N> ori_in = lie::RotTangent<N>::Zero();
  for (const auto& e : estimates) {
    const auto gt = truth_at<N>(truth, e.state.time, align);
    if (!gt) continue;
    const auto& est = e.state;
    const lie::Vector<N> dp = est.pose.translation() - gt->pose.translation();
    const lie::RotTangent<N> dr =
        lie::so_log<N>(est.pose.rotation().inverse() * gt->pose.rotation());
    rep.times.push_back(est.time);
    rep.position_error.push_back(dp);
    rep.orientation_error.push_back(dr);
    pos_sq += dp.squaredNorm();
    ori_sq += dr.squaredNorm();
    if (use_covariance) {
      const auto& rot = est.pose.rotation().matrix();
      const Eigen::Matrix<double, N, N> pc = rot * e.covariance.template topLeftCorner<N, N>() * rot.transpose();
      const Eigen::Matrix<double, R, R> oc = e.covariance.template block<R, R>(N, N);
      for (int a = 0; a < N; ++a) pos_in(a) += std::abs(dp(a)) <= 3.0 * std::sqrt(std::max(pc(a, a), 0.0));
      for (int a = 0; a < R; ++a) ori_in(a) += std::abs(dr(a)) <= 3.0 * std::sqrt(std::max(oc(a, a), 0.0));
      const StateVector<N> d = state_difference(est, *gt);
      Eigen::LDLT<StateMatrix<N>> ldlt(e.covariance);
      rep.nees.push_back(d.dot(ldlt.solve(d)));
    }
  }
  rep.samples = rep.times.size();
  if (rep.samples < kMinSamples) {
    throw ArgumentError("evaluate: only " + std::to_string(rep.samples) +
                        " estimates overlap the ground truth (need at least " + std::to_string(kMinSamples) + ")");
  }
  const double n = static_cast<double>(rep.samples);
  rep.position_rmse = std::sqrt(pos_sq / n);
  rep.orientation_rmse = std::sqrt(ori_sq / n);
  if (use_covariance) {
    rep.position_coverage = pos_in / n;
    rep.orientation_coverage = ori_in / n;
  }
  return rep;
}

/// Two-sided interval containing the mean of `runs` independent chi-square(dof) draws with probability p.
inline std::pair<double, double> nees_interval(int dof, int runs, double p = 0.95) {
  boost::math::chi_squared dist(static_cast<double>(dof * runs));
  const double lo = boost::math::quantile(dist, 0.5 * (1 - p));
  const double hi = boost::math::quantile(dist, 1 - 0.5 * (1 - p));
  return {lo / runs, hi / runs};
}

/// Average ranks with ties sharing the mean rank.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = mean_rank;
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

/// Spearman rank correlation; NaN if either input is constant or contains NaN.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ArgumentError("spearman: need two equally sized samples");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isnan(a[i]) || std::isnan(b[i])) return std::numeric_limits<double>::quiet_NaN();
  }
  return pearson(ranks(a), ranks(b));
}

}  // namespace rangepose::eval
