#pragma once
/**
 * range_model.hpp - point-to-point range factor with lever arm.
 *
 *   r = || p_anchor - R p_lever - p || + noise
 *
 * The lever arm is the only path by which orientation enters the
 * measurement; with all lever arms at zero the rotation block of the
 * Jacobian vanishes.
 */

#include <Eigen/Core>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rangepose/errors.hpp"
#include "rangepose/lie.hpp"
#include "rangepose/motion_prior.hpp"

namespace rangepose {

/// Default range standard deviation, the precision quoted for the UWB radios.
inline constexpr double kDefaultRangeSigma = 0.10;

template <int N>
struct AnchorMap {
  std::map<int, lie::Vector<N>> positions;

  const lie::Vector<N>& at(int id) const {
    auto it = positions.find(id);
    if (it == positions.end()) throw ConfigError("unknown anchor id " + std::to_string(id));
    return it->second;
  }

  lie::Vector<N> centroid() const {
    lie::Vector<N> c = lie::Vector<N>::Zero();
    for (const auto& [id, p] : positions) c += p;
    return positions.empty() ? c : c / static_cast<double>(positions.size());
  }
};

template <int N>
struct Sensor {
  lie::Vector<N> lever_arm = lie::Vector<N>::Zero();
  double sigma = kDefaultRangeSigma;
};

template <int N>
struct SensorConfig {
  std::map<int, Sensor<N>> sensors;

  const Sensor<N>& at(int id) const {
    auto it = sensors.find(id);
    if (it == sensors.end()) throw ConfigError("unknown sensor id " + std::to_string(id));
    return it->second;
  }
};

/// Anchors plus sensors: everything needed to evaluate a range factor.
template <int N>
struct RangeSetup {
  AnchorMap<N> anchors;
  SensorConfig<N> sensors;
};

struct RangeMeasurement {
  double time = 0.0;
  int sensor_id = 0;
  int anchor_id = 0;
  double range = 0.0;
  /// Non-positive means "use the sensor's configured sigma".
  double variance = 0.0;
};

/// Variance used to weight a measurement.
template <int N>
double effective_variance(const RangeMeasurement& m, const RangeSetup<N>& setup) {
  if (m.variance > 0.0) return m.variance;
  const double s = setup.sensors.at(m.sensor_id).sigma;
  if (!(s > 0.0)) throw ConfigError("sensor " + std::to_string(m.sensor_id) + " has non-positive sigma");
  return s * s;
}

template <int N>
double predict_range(const lie::Pose<N>& pose, const lie::Vector<N>& lever, const lie::Vector<N>& anchor) {
  return (anchor - pose.rotation() * lever - pose.translation()).norm();
}

template <int N>
struct RangeResidual {
  double error = 0.0;     // measured - predicted
  double sigma = 1.0;
  double whitened = 0.0;  // error / sigma
  /// d error / d pose perturbation (right, body frame).
  Eigen::Matrix<double, 1, kDof<N>> jacobian = Eigen::Matrix<double, 1, kDof<N>>::Zero();
};

template <int N>
RangeResidual<N> range_residual(const RangeMeasurement& m, const lie::Pose<N>& pose, const RangeSetup<N>& setup) {
  constexpr int D = kDof<N>;
  const lie::Vector<N>& lever = setup.sensors.at(m.sensor_id).lever_arm;
  const lie::Vector<N>& anchor = setup.anchors.at(m.anchor_id);
  const auto& r = pose.rotation().matrix();
  const lie::Vector<N> d = anchor - r * lever - pose.translation();
  const double predicted = d.norm();

  RangeResidual<N> out;
  out.error = m.range - predicted;
  out.sigma = std::sqrt(effective_variance(m, setup));
  out.whitened = out.error / out.sigma;
  if (predicted > 1e-12) {
    // d(predicted)/d xi = u^T [-R | -R K(lever)], u the unit vector from sensor to anchor.
    const Eigen::Matrix<double, 1, N> u = (d / predicted).transpose();
    out.jacobian.template head<N>() = u * r;
    out.jacobian.template tail<D - N>() = u * r * lie::rot_hat_action_jacobian<N>(lever);
  }
  return out;
}

/// Raw error measured - predicted at a knot.
template <int N>
double range_error(const RangeMeasurement& m, const StateKnot<N>& knot, const RangeSetup<N>& setup) {
  return range_residual(m, knot.pose, setup).error;
}

struct ObservabilityReport {
  bool too_few_anchors = false;
  bool collocated_anchors = false;
  bool too_few_sensors = false;
  bool collinear_sensors = false;
  bool zero_lever_arms = false;
  std::vector<std::string> messages;

  bool observable() const {
    return !(too_few_anchors || collocated_anchors || too_few_sensors || collinear_sensors || zero_lever_arms);
  }
};

/// Geometric preconditions for full-pose identifiability; reports, never throws.
template <int N>
ObservabilityReport check_observability(const RangeSetup<N>& setup) {
  ObservabilityReport rep;
  const auto& anchors = setup.anchors.positions;
  if (anchors.size() < 3) {
    rep.too_few_anchors = true;
    rep.messages.push_back("anchors insufficient: need at least 3, have " + std::to_string(anchors.size()));
  }
  for (auto a = anchors.begin(); a != anchors.end(); ++a) {
    for (auto b = std::next(a); b != anchors.end(); ++b) {
      if ((a->second - b->second).norm() < 1e-6) {
        rep.collocated_anchors = true;
        rep.messages.push_back("anchors " + std::to_string(a->first) + " and " + std::to_string(b->first) +
                               " are collocated");
      }
    }
  }

  const auto& sensors = setup.sensors.sensors;
  const std::size_t needed = N == 2 ? 2 : 3;
  if (sensors.size() < needed) {
    rep.too_few_sensors = true;
    rep.messages.push_back(std::string("sensors insufficient for ") + (N == 2 ? "2D" : "3D") + ": need at least " +
                           std::to_string(needed) + ", have " + std::to_string(sensors.size()));
  }
  if (!sensors.empty()) {
    Eigen::Matrix<double, N, Eigen::Dynamic> levers(N, static_cast<Eigen::Index>(sensors.size()));
    Eigen::Index col = 0;
    for (const auto& [id, s] : sensors) levers.col(col++) = s.lever_arm;
    if (levers.cwiseAbs().maxCoeff() < 1e-9) {
      rep.zero_lever_arms = true;
      rep.messages.push_back("all lever arms are zero: orientation is unobservable");
    }
    const lie::Vector<N> mean = levers.rowwise().mean();
    const Eigen::MatrixXd centered = levers.colwise() - mean;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
    const double scale = std::max(1.0, levers.cwiseAbs().maxCoeff());
    int rank = 0;
    for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i) {
      if (svd.singularValues()(i) > 1e-9 * scale) ++rank;
    }
    if constexpr (N == 2) {
      if (sensors.size() >= 2 && rank < 1 && !rep.zero_lever_arms) {
        rep.collinear_sensors = true;
        rep.messages.push_back("sensor lever arms are not distinct");
      }
    } else {
      if (sensors.size() >= 3 && rank < 2 && !rep.zero_lever_arms) {
        rep.collinear_sensors = true;
        rep.messages.push_back("sensor lever arms are collinear: rotation about the sensor line is unobservable");
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Constant range bias per (sensor, anchor) pair, subtracted from measurements.
struct BiasTable {
  std::map<std::pair<int, int>, double> bias;

  double at(int sensor_id, int anchor_id) const {
    auto it = bias.find({sensor_id, anchor_id});
    return it == bias.end() ? 0.0 : it->second;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

/// Per-pair bias as median(measured - predicted) against a ground-truth pose source.
template <int N>
BiasTable estimate_bias(const std::vector<RangeMeasurement>& meas, const RangeSetup<N>& setup,
                        const std::function<lie::Pose<N>(double)>& truth) {
  std::map<std::pair<int, int>, std::vector<double>> residuals;
  for (const auto& m : meas) {
    const double predicted =
        predict_range<N>(truth(m.time), setup.sensors.at(m.sensor_id).lever_arm, setup.anchors.at(m.anchor_id));
    residuals[{m.sensor_id, m.anchor_id}].push_back(m.range - predicted);
  }
  BiasTable table;
  for (auto& [pair, r] : residuals) table.bias[pair] = median(std::move(r));
  return table;
}

/// Strategy deciding which samples of one (sensor, anchor) stream to keep.
class OutlierGate {
 public:
  virtual ~OutlierGate() = default;
  /// `stream` holds the measurements of a single pair in time order.
  virtual std::vector<bool> accept(const std::vector<RangeMeasurement>& stream) const = 0;
};

class NoGate final : public OutlierGate {
 public:
  std::vector<bool> accept(const std::vector<RangeMeasurement>& stream) const override {
    return std::vector<bool>(stream.size(), true);
  }
};

/**
 * Rejects a sample whose distance to the median of its neighbours exceeds
 * k times their scaled median absolute deviation. The deviation is floored
 * so that noiseless data is never rejected.
 */
class MadGate final : public OutlierGate {
 public:
  explicit MadGate(double k = 5.0, int half_width = 3, double floor = 0.01)
      : k_(k), half_width_(half_width), floor_(floor) {}

  std::vector<bool> accept(const std::vector<RangeMeasurement>& stream) const override {
    const int n = static_cast<int>(stream.size());
    std::vector<bool> keep(stream.size(), true);
    std::vector<double> neighbours;
    for (int i = 0; i < n; ++i) {
      neighbours.clear();
      for (int j = std::max(0, i - half_width_); j <= std::min(n - 1, i + half_width_); ++j) {
        if (j != i) neighbours.push_back(stream[static_cast<std::size_t>(j)].range);
      }
      if (neighbours.size() < 3) continue;
      const double med = median(neighbours);
      std::vector<double> dev;
      dev.reserve(neighbours.size());
      for (double r : neighbours) dev.push_back(std::abs(r - med));
      const double sigma_floor = std::max(floor_, std::sqrt(std::max(0.0, stream[static_cast<std::size_t>(i)].variance)));
      const double mad = std::max(1.4826 * median(std::move(dev)), sigma_floor);
      keep[static_cast<std::size_t>(i)] = std::abs(stream[static_cast<std::size_t>(i)].range - med) <= k_ * mad;
    }
    return keep;
  }

 private:
  double k_;
  int half_width_;
  double floor_;
};

struct PreprocessPolicy {
  std::optional<BiasTable> bias;
  std::shared_ptr<const OutlierGate> gate = std::make_shared<MadGate>();
};

/// Bias removal followed by per-pair outlier gating; keeps time order.
inline std::vector<RangeMeasurement> preprocess(const std::vector<RangeMeasurement>& meas,
                                                const PreprocessPolicy& policy) {
  for (std::size_t i = 1; i < meas.size(); ++i) {
    if (meas[i].time < meas[i - 1].time) throw ArgumentError("preprocess: measurements are not time-sorted");
  }
  std::vector<RangeMeasurement> out = meas;
  if (policy.bias) {
    for (auto& m : out) m.range -= policy.bias->at(m.sensor_id, m.anchor_id);
  }
  if (!policy.gate) return out;

  std::map<std::pair<int, int>, std::vector<std::size_t>> streams;
  for (std::size_t i = 0; i < out.size(); ++i) streams[{out[i].sensor_id, out[i].anchor_id}].push_back(i);
  std::vector<bool> keep(out.size(), true);
  for (const auto& [pair, idx] : streams) {
    std::vector<RangeMeasurement> stream;
    stream.reserve(idx.size());
    for (std::size_t i : idx) stream.push_back(out[i]);
    const auto accepted = policy.gate->accept(stream);
    for (std::size_t k = 0; k < idx.size(); ++k) keep[idx[k]] = accepted[k];
  }
  std::vector<RangeMeasurement> filtered;
  filtered.reserve(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (keep[i]) filtered.push_back(out[i]);
  }
  return filtered;
}

}  // namespace rangepose
