#pragma once
/**
 * io.hpp - JSONL record streams and CSV tables.
 *
 * Every record carries `schema_version`. Files are written to a temporary
 * sibling and renamed into place.
 */

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "rangepose/errors.hpp"
#include "rangepose/lie.hpp"
#include "rangepose/motion_prior.hpp"
#include "rangepose/range_model.hpp"
#include "rangepose/solver.hpp"

namespace rangepose::io {

inline constexpr int kSchemaVersion = 1;

using nlohmann::json;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes `content` to `path` via a temporary file in the same directory.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path() && !fs::exists(path.parent_path())) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing");
    f << content;
    f.flush();
    if (!f) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline json parse_json(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": invalid JSON: " + e.what());
  }
}

inline json read_json(const std::filesystem::path& path) { return parse_json(read_file(path), path.string()); }

/// Parses a JSONL file; blank lines are skipped and records with a newer schema are rejected.
inline std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec = parse_json(line, path.string() + ":" + std::to_string(lineno));
    const int version = rec.value("schema_version", kSchemaVersion);
    if (version > kSchemaVersion) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": unsupported schema_version " +
                        std::to_string(version));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::string to_jsonl(const std::vector<json>& records) {
  std::string s;
  for (const auto& r : records) {
    s += r.dump();
    s += '\n';
  }
  return s;
}

/// Field access that reports the record and field name on failure.
template <typename T>
T field(const json& rec, const char* name, const std::string& where) {
  const auto it = rec.find(name);
  if (it == rec.end()) throw ConfigError(where + ": missing field '" + name + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + ": field '" + name + "' has the wrong type");
  }
}

template <typename Vec>
json vector_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

template <int Rows>
Eigen::Matrix<double, Rows, 1> vector_from(const json& rec, const char* name, const std::string& where) {
  const auto v = field<std::vector<double>>(rec, name, where);
  if (static_cast<int>(v.size()) != Rows) {
    throw ConfigError(where + ": field '" + name + "' must have " + std::to_string(Rows) + " entries");
  }
  return Eigen::Map<const Eigen::Matrix<double, Rows, 1>>(v.data());
}

// ---------------------------------------------------------------------------
// Measurements
// ---------------------------------------------------------------------------

inline json to_json(const RangeMeasurement& m) {
  return {{"schema_version", kSchemaVersion}, {"t", m.time},         {"sensor_id", m.sensor_id},
          {"anchor_id", m.anchor_id},         {"range", m.range},    {"sigma", std::sqrt(std::max(m.variance, 0.0))}};
}

inline RangeMeasurement measurement_from_json(const json& rec, const std::string& where) {
  RangeMeasurement m;
  m.time = field<double>(rec, "t", where);
  m.sensor_id = field<int>(rec, "sensor_id", where);
  m.anchor_id = field<int>(rec, "anchor_id", where);
  m.range = field<double>(rec, "range", where);
  const double sigma = rec.contains("sigma") ? field<double>(rec, "sigma", where) : 0.0;
  m.variance = sigma * sigma;
  return m;
}

inline void write_measurements(const std::filesystem::path& path, const std::vector<RangeMeasurement>& ms) {
  std::vector<json> recs;
  recs.reserve(ms.size());
  for (const auto& m : ms) recs.push_back(to_json(m));
  write_atomic(path, to_jsonl(recs));
}

inline std::vector<RangeMeasurement> read_measurements(const std::filesystem::path& path) {
  const auto recs = read_jsonl(path);
  std::vector<RangeMeasurement> out;
  out.reserve(recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    out.push_back(measurement_from_json(recs[i], path.string() + " record " + std::to_string(i + 1)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// States (ground truth and estimates)
// ---------------------------------------------------------------------------

/// Orientation as an angle in 2D, a [w, x, y, z] quaternion in 3D.
template <int N>
json orientation_json(const lie::Rotation<N>& r) {
  if constexpr (N == 2) {
    return r.angle();
  } else {
    const Eigen::Quaterniond q = r.quaternion();
    return json::array({q.w(), q.x(), q.y(), q.z()});
  }
}

template <int N>
lie::Rotation<N> orientation_from(const json& rec, const std::string& where) {
  if constexpr (N == 2) {
    return lie::Rotation<2>::from_angle(field<double>(rec, "orientation", where));
  } else {
    const auto q = vector_from<4>(rec, "orientation", where);
    if (!(q.norm() > 0)) throw ConfigError(where + ": orientation quaternion is zero");
    return lie::Rotation<3>::from_quaternion(Eigen::Quaterniond(q(0), q(1), q(2), q(3)));
  }
}

template <int N>
json to_json(const StateKnot<N>& k) {
  return {{"schema_version", kSchemaVersion},
          {"t", k.time},
          {"position", vector_json(k.pose.translation())},
          {"orientation", orientation_json<N>(k.pose.rotation())},
          {"twist", vector_json(k.twist)}};
}

/// Estimate record: the state plus its row-major covariance.
template <int N>
json to_json(const Estimate<N>& e) {
  json rec = to_json<N>(e.state);
  json cov = json::array();
  for (int r = 0; r < e.covariance.rows(); ++r)
    for (int c = 0; c < e.covariance.cols(); ++c) cov.push_back(e.covariance(r, c));
  rec["covariance"] = std::move(cov);
  return rec;
}

template <int N>
StateKnot<N> state_from_json(const json& rec, const std::string& where) {
  StateKnot<N> k;
  k.time = field<double>(rec, "t", where);
  k.pose = lie::Pose<N>(orientation_from<N>(rec, where), vector_from<N>(rec, "position", where));
  k.twist = vector_from<kDof<N>>(rec, "twist", where);
  return k;
}

template <int N>
Estimate<N> estimate_from_json(const json& rec, const std::string& where) {
  Estimate<N> e;
  e.state = state_from_json<N>(rec, where);
  constexpr int B = kStateDof<N>;
  if (rec.contains("covariance")) {
    const auto v = field<std::vector<double>>(rec, "covariance", where);
    if (static_cast<int>(v.size()) != B * B) {
      throw ConfigError(where + ": covariance must have " + std::to_string(B * B) + " entries");
    }
    e.covariance = Eigen::Map<const Eigen::Matrix<double, B, B, Eigen::RowMajor>>(v.data());
  } else {
    e.covariance.setConstant(std::numeric_limits<double>::quiet_NaN());
  }
  return e;
}

template <int N>
void write_states(const std::filesystem::path& path, const std::vector<StateKnot<N>>& ks) {
  std::vector<json> recs;
  recs.reserve(ks.size());
  for (const auto& k : ks) recs.push_back(to_json<N>(k));
  write_atomic(path, to_jsonl(recs));
}

template <int N>
void write_estimates(const std::filesystem::path& path, const std::vector<Estimate<N>>& es) {
  std::vector<json> recs;
  recs.reserve(es.size());
  for (const auto& e : es) recs.push_back(to_json<N>(e));
  write_atomic(path, to_jsonl(recs));
}

template <int N>
std::vector<StateKnot<N>> read_states(const std::filesystem::path& path) {
  const auto recs = read_jsonl(path);
  std::vector<StateKnot<N>> out;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    out.push_back(state_from_json<N>(recs[i], path.string() + " record " + std::to_string(i + 1)));
  }
  return out;
}

template <int N>
std::vector<Estimate<N>> read_estimates(const std::filesystem::path& path) {
  const auto recs = read_jsonl(path);
  std::vector<Estimate<N>> out;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    out.push_back(estimate_from_json<N>(recs[i], path.string() + " record " + std::to_string(i + 1)));
  }
  return out;
}

/// Spatial dimension of a state stream, read from the first record (2 if orientation is a scalar).
inline int state_stream_dimension(const std::filesystem::path& path) {
  const auto recs = read_jsonl(path);
  if (recs.empty()) throw ConfigError(path.string() + ": no records");
  const auto& pos = recs.front().at("position");
  if (!pos.is_array() || (pos.size() != 2 && pos.size() != 3)) {
    throw ConfigError(path.string() + ": position must have 2 or 3 entries");
  }
  return static_cast<int>(pos.size());
}

// ---------------------------------------------------------------------------
// Bias calibration: {"sensor_id:anchor_id": meters}
// ---------------------------------------------------------------------------

inline BiasTable bias_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": bias calibration must be an object");
  BiasTable t;
  for (const auto& [key, value] : j.items()) {
    if (key == "schema_version") continue;
    const auto colon = key.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument(key);
      t.bias[{std::stoi(key.substr(0, colon)), std::stoi(key.substr(colon + 1))}] = value.get<double>();
    } catch (const std::exception&) {
      throw ConfigError(where + ": bad bias entry '" + key + "' (expected \"sensor_id:anchor_id\": meters)");
    }
  }
  return t;
}

inline json bias_to_json(const BiasTable& t) {
  json j = {{"schema_version", kSchemaVersion}};
  for (const auto& [key, b] : t.bias) j[std::to_string(key.first) + ":" + std::to_string(key.second)] = b;
  return j;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw ConfigError("csv: no column '" + name + "'");
  }
};

/// Shortest text that parses back to the same double; NaN is written as "nan".
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  return json(v).dump();
}

inline std::string to_csv(const CsvTable& t) {
  std::string s;
  for (std::size_t i = 0; i < t.header.size(); ++i) s += (i ? "," : "") + t.header[i];
  s += '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) s += (i ? "," : "") + format_double(row[i]);
    s += '\n';
  }
  return s;
}

inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::stringstream ss(l);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    return cells;
  };
  if (!std::getline(in, line)) throw ConfigError("csv: empty file");
  t.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != t.header.size()) throw ConfigError("csv: ragged row '" + line + "'");
    std::vector<double> row;
    for (const auto& c : cells) {
      row.push_back(c == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(c));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace rangepose::io
