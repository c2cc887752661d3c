#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "json.hpp"
#include "stgrit/common.hpp"
#include "stgrit/geo.hpp"

namespace stgrit {

/// One annotated radar flight segment: per-trace coordinates and a
/// trace × layer thickness matrix, layers ordered youngest first. Layers that
/// are not fully annotated across all traces carry complete = false; their
/// thickness entries are present but must not be consumed downstream.
struct LayerRecord {
  std::string source_id;
  std::size_t num_traces = 0;
  std::size_t num_layers = 0;
  std::vector<double> latitude;     // per trace
  std::vector<double> longitude;    // per trace
  std::vector<double> thickness;    // num_traces × num_layers, row-major
  std::vector<bool> layer_complete;  // per layer

  double thickness_at(std::size_t trace, std::size_t layer) const {
    return thickness[trace * num_layers + layer];
  }

  std::size_t complete_layer_count() const {
    return static_cast<std::size_t>(
        std::count(layer_complete.begin(), layer_complete.end(), true));
  }

  std::vector<std::size_t> complete_layer_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < layer_complete.size(); ++i)
      if (layer_complete[i]) idx.push_back(i);
    return idx;
  }
};

struct ValidationResult {
  bool accepted = false;
  std::string reason;  // empty when accepted
};

/// A record qualifies when at least min_layers of its layers are complete
/// across all traces. Rejection is a value, not an error.
inline ValidationResult validate(const LayerRecord& record, std::size_t min_layers = 20) {
  if (record.num_traces < 2) {
    return {false, "insufficient traces: " + std::to_string(record.num_traces) + ", need >= 2"};
  }
  const std::size_t complete = record.complete_layer_count();
  if (complete < min_layers) {
    return {false, "insufficient complete layers: " + std::to_string(complete) + " of " +
                       std::to_string(record.num_layers) + ", need >= " +
                       std::to_string(min_layers)};
  }
  return {true, {}};
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

/// One train/val/test assignment over record ids. Counts follow the exact
/// 3:1:1 integer split of the record count; the remainder goes to train.
struct SplitSpec {
  std::uint64_t seed = 0;
  std::vector<std::string> train, val, test;
};

inline std::vector<SplitSpec> make_splits(const std::vector<std::string>& record_ids,
                                          std::size_t num_versions = 5,
                                          std::uint64_t base_seed = 0) {
  if (record_ids.empty()) throw ValidationError("make_splits: record list is empty");
  std::vector<SplitSpec> specs;
  specs.reserve(num_versions);
  const std::size_t n = record_ids.size();
  const std::size_t unit = n / 5;
  const std::size_t train_count = n - 2 * unit;
  for (std::size_t k = 0; k < num_versions; ++k) {
    SplitSpec spec;
    spec.seed = base_seed + k;
    std::vector<std::string> ids = record_ids;
    Rng rng(spec.seed);
    rng.shuffle(ids);
    spec.train.assign(ids.begin(), ids.begin() + train_count);
    spec.val.assign(ids.begin() + train_count, ids.begin() + train_count + unit);
    spec.test.assign(ids.begin() + train_count + unit, ids.end());
    specs.push_back(std::move(spec));
  }
  return specs;
}

inline std::vector<SplitSpec> make_splits(const std::vector<LayerRecord>& records,
                                          std::size_t num_versions = 5,
                                          std::uint64_t base_seed = 0) {
  std::vector<std::string> ids;
  ids.reserve(records.size());
  for (const auto& r : records) ids.push_back(r.source_id);
  return make_splits(ids, num_versions, base_seed);
}

// ---------------------------------------------------------------------------
// normalization statistics
// ---------------------------------------------------------------------------

/// Feature statistics computed on a training split and applied unchanged at
/// validation and test time. Thickness statistics cover complete layers only.
struct NormStats {
  double lat_mean = 0.0, lat_std = 1.0;
  double lon_mean = 0.0, lon_std = 1.0;
  double thick_mean = 0.0, thick_std = 1.0;
};

namespace detail {

struct RunningMoments {
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    sum_sq += v * v;
    ++n;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
  double stddev() const {
    if (n == 0) return 1.0;
    const double m = mean();
    const double var = std::max(sum_sq / static_cast<double>(n) - m * m, 0.0);
    const double s = std::sqrt(var);
    return s > 0.0 ? s : 1.0;  // constant features pass through unscaled
  }
};

}  // namespace detail

inline NormStats compute_norm_stats(const std::vector<LayerRecord>& records,
                                    const std::vector<std::string>& train_ids) {
  detail::RunningMoments lat, lon, thick;
  for (const auto& rec : records) {
    if (std::find(train_ids.begin(), train_ids.end(), rec.source_id) == train_ids.end()) continue;
    for (double v : rec.latitude) lat.add(v);
    for (double v : rec.longitude) lon.add(v);
    for (std::size_t layer = 0; layer < rec.num_layers; ++layer) {
      if (!rec.layer_complete[layer]) continue;
      for (std::size_t t = 0; t < rec.num_traces; ++t) thick.add(rec.thickness_at(t, layer));
    }
  }
  NormStats s;
  s.lat_mean = lat.mean();
  s.lat_std = lat.stddev();
  s.lon_mean = lon.mean();
  s.lon_std = lon.stddev();
  s.thick_mean = thick.mean();
  s.thick_std = thick.stddev();
  return s;
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

/// Synthetic stand-in for annotated flight data. Each record gets a smoothed
/// random-walk flight line inside Greenland's bounding box and a thickness
/// field with learnable structure: a per-layer base plus a smooth spatial
/// signal shared across layers, attenuated by depth_correlation^layer, plus
/// independent smooth noise. Deep layers therefore stay predictable from
/// shallow ones to a controllable degree.
struct SyntheticConfig {
  std::size_t num_records = 1;
  std::size_t num_traces = 256;
  std::size_t num_layers = 20;
  std::size_t min_layers_required = 20;  // typically p + q of the downstream task
  double depth_correlation = 0.8;
  double signal_std = 8.0;
  double noise_std = 1.0;
  double base_thickness = 30.0;
  double thickness_step = 2.0;
  std::uint64_t seed = 0;
};

namespace detail {

// Random walk, centered moving average, then rescaled to zero mean and unit
// (population) standard deviation.
inline std::vector<double> smooth_unit_series(std::size_t n, Rng& rng, std::size_t window) {
  std::vector<double> walk(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += rng.normal();
    walk[i] = acc;
  }
  std::vector<double> smooth(n, 0.0);
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(window / 2);
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, i - half);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(n) - 1, i + half);
    double s = 0.0;
    for (std::ptrdiff_t j = lo; j <= hi; ++j) s += walk[j];
    smooth[i] = s / static_cast<double>(hi - lo + 1);
  }
  double mean = std::accumulate(smooth.begin(), smooth.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : smooth) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
  for (double& v : smooth) v = (v - mean) * inv;
  return smooth;
}

}  // namespace detail

inline std::vector<LayerRecord> generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.num_layers < cfg.min_layers_required) {
    throw ConfigError("generate_synthetic: num_layers " + std::to_string(cfg.num_layers) +
                      " below required " + std::to_string(cfg.min_layers_required));
  }
  if (cfg.num_traces < 2) throw ConfigError("generate_synthetic: need at least 2 traces");
  // Greenland bounding box with margin for the walk
  const double lat_lo = 60.5, lat_hi = 81.5, lon_lo = -72.5, lon_hi = -12.5;
  std::vector<LayerRecord> records;
  records.reserve(cfg.num_records);
  for (std::size_t r = 0; r < cfg.num_records; ++r) {
    Rng rng = Rng(cfg.seed).child(r);  // independent per-record stream
    LayerRecord rec;
    {
      std::ostringstream os;
      os << "synth-" << std::setw(6) << std::setfill('0') << r;
      rec.source_id = os.str();
    }
    rec.num_traces = cfg.num_traces;
    rec.num_layers = cfg.num_layers;

    // flight line: small-step random walk, smoothed
    const double step = 0.002;  // degrees per trace, ~200 m
    double lat = rng.uniform(lat_lo, lat_hi);
    double lon = rng.uniform(lon_lo, lon_hi);
    std::vector<double> raw_lat(cfg.num_traces), raw_lon(cfg.num_traces);
    for (std::size_t t = 0; t < cfg.num_traces; ++t) {
      raw_lat[t] = lat;
      raw_lon[t] = lon;
      lat += rng.normal() * step;
      lon += rng.normal() * step;
    }
    rec.latitude.resize(cfg.num_traces);
    rec.longitude.resize(cfg.num_traces);
    const std::ptrdiff_t half = 4;
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(cfg.num_traces); ++i) {
      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, i - half);
      const std::ptrdiff_t hi =
          std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(cfg.num_traces) - 1, i + half);
      double sl = 0.0, so = 0.0;
      for (std::ptrdiff_t j = lo; j <= hi; ++j) {
        sl += raw_lat[j];
        so += raw_lon[j];
      }
      rec.latitude[i] = sl / static_cast<double>(hi - lo + 1);
      rec.longitude[i] = so / static_cast<double>(hi - lo + 1);
    }

    // thickness field
    const std::vector<double> shared = detail::smooth_unit_series(cfg.num_traces, rng, 15);
    rec.thickness.resize(cfg.num_traces * cfg.num_layers);
    double depth_factor = 1.0;
    for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
      const std::vector<double> noise = detail::smooth_unit_series(cfg.num_traces, rng, 15);
      const double base = cfg.base_thickness + cfg.thickness_step * static_cast<double>(layer);
      for (std::size_t t = 0; t < cfg.num_traces; ++t) {
        const double v = base + cfg.signal_std * depth_factor * shared[t] + cfg.noise_std * noise[t];
        rec.thickness[t * cfg.num_layers + layer] = std::max(v, 0.1);
      }
      depth_factor *= cfg.depth_correlation;
    }
    rec.layer_complete.assign(cfg.num_layers, true);
    records.push_back(std::move(rec));
  }
  return records;
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------
// Format: header `source_id,trace_index,latitude,longitude,layer_index,
// thickness,complete`, one row per (trace, layer), UTF-8, LF line endings,
// '.' decimal separator, >= 17 significant digits so doubles round-trip.

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  out.append(buf, res.ptr);
}

inline double parse_double(std::string_view field, std::size_t line_no, const char* what) {
  double v = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) {
    throw ParseError("line " + std::to_string(line_no) + ": bad " + what + " '" +
                     std::string(field) + "'");
  }
  return v;
}

inline std::size_t parse_index(std::string_view field, std::size_t line_no, const char* what) {
  std::size_t v = 0;
  auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
    throw ParseError("line " + std::to_string(line_no) + ": bad " + what + " '" +
                     std::string(field) + "'");
  }
  return v;
}

}  // namespace detail

inline constexpr const char* kRecordCsvHeader =
    "source_id,trace_index,latitude,longitude,layer_index,thickness,complete";

inline void save_records(const std::vector<LayerRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);  // binary keeps LF endings everywhere
  if (!out) throw ParseError("save_records: cannot open '" + path + "' for writing");
  std::string buf;
  buf.reserve(1 << 20);
  buf += kRecordCsvHeader;
  buf += '\n';
  for (const auto& rec : records) {
    if (rec.source_id.find_first_of(",\n\r") != std::string::npos)
      throw ValidationError("save_records: source_id contains a delimiter: " + rec.source_id);
    for (std::size_t t = 0; t < rec.num_traces; ++t) {
      for (std::size_t layer = 0; layer < rec.num_layers; ++layer) {
        buf += rec.source_id;
        buf += ',';
        buf += std::to_string(t);
        buf += ',';
        detail::append_double(buf, rec.latitude[t]);
        buf += ',';
        detail::append_double(buf, rec.longitude[t]);
        buf += ',';
        buf += std::to_string(layer);
        buf += ',';
        detail::append_double(buf, rec.thickness_at(t, layer));
        buf += ',';
        buf += rec.layer_complete[layer] ? '1' : '0';
        buf += '\n';
        if (buf.size() > (1 << 20)) {
          out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
          buf.clear();
        }
      }
    }
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw ParseError("save_records: write to '" + path + "' failed");
}

inline std::vector<LayerRecord> load_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("load_records: cannot open '" + path + "'");

  struct Cell {
    std::size_t trace, layer;
    double lat, lon, thickness;
    bool complete;
  };
  struct Pending {
    std::vector<Cell> cells;
  };
  std::vector<std::string> order;
  std::map<std::string, Pending> pending;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != kRecordCsvHeader)
        throw ParseError("line 1: unexpected header, expected '" +
                         std::string(kRecordCsvHeader) + "'");
      continue;
    }
    if (line.empty()) continue;
    std::array<std::string_view, 7> fields;
    std::size_t field_count = 0;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        if (field_count >= 7)
          throw ParseError("line " + std::to_string(line_no) + ": too many fields");
        fields[field_count++] = std::string_view(line).substr(start, i - start);
        start = i + 1;
      }
    }
    if (field_count != 7)
      throw ParseError("line " + std::to_string(line_no) + ": expected 7 fields, got " +
                       std::to_string(field_count));
    Cell c;
    c.trace = detail::parse_index(fields[1], line_no, "trace_index");
    c.lat = detail::parse_double(fields[2], line_no, "latitude");
    c.lon = detail::parse_double(fields[3], line_no, "longitude");
    c.layer = detail::parse_index(fields[4], line_no, "layer_index");
    c.thickness = detail::parse_double(fields[5], line_no, "thickness");
    if (fields[6] == "1") {
      c.complete = true;
    } else if (fields[6] == "0") {
      c.complete = false;
    } else {
      throw ParseError("line " + std::to_string(line_no) + ": bad complete flag '" +
                       std::string(fields[6]) + "'");
    }
    std::string id(fields[0]);
    if (id.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty source_id");
    auto it = pending.find(id);
    if (it == pending.end()) {
      order.push_back(id);
      it = pending.emplace(id, Pending{}).first;
    }
    it->second.cells.push_back(c);
  }

  std::vector<LayerRecord> records;
  records.reserve(order.size());
  for (const auto& id : order) {
    const auto& cells = pending[id].cells;
    std::size_t num_traces = 0, num_layers = 0;
    for (const Cell& c : cells) {
      num_traces = std::max(num_traces, c.trace + 1);
      num_layers = std::max(num_layers, c.layer + 1);
    }
    LayerRecord rec;
    rec.source_id = id;
    rec.num_traces = num_traces;
    rec.num_layers = num_layers;
    rec.latitude.assign(num_traces, 0.0);
    rec.longitude.assign(num_traces, 0.0);
    rec.thickness.assign(num_traces * num_layers, 0.0);
    rec.layer_complete.assign(num_layers, true);
    std::vector<bool> seen(num_traces * num_layers, false);
    std::vector<bool> trace_seen(num_traces, false);
    for (const Cell& c : cells) {
      const std::size_t flat = c.trace * num_layers + c.layer;
      if (seen[flat])
        throw ParseError("record '" + id + "': duplicate cell (trace " + std::to_string(c.trace) +
                         ", layer " + std::to_string(c.layer) + ")");
      seen[flat] = true;
      rec.thickness[flat] = c.thickness;
      if (!c.complete) rec.layer_complete[c.layer] = false;
      if (!trace_seen[c.trace]) {
        trace_seen[c.trace] = true;
        rec.latitude[c.trace] = c.lat;
        rec.longitude[c.trace] = c.lon;
      } else if (rec.latitude[c.trace] != c.lat || rec.longitude[c.trace] != c.lon) {
        throw ParseError("record '" + id + "': inconsistent coordinates for trace " +
                         std::to_string(c.trace));
      }
    }
    for (std::size_t i = 0; i < seen.size(); ++i) {
      if (!seen[i])
        throw ParseError("record '" + id + "': missing cell (trace " +
                         std::to_string(i / num_layers) + ", layer " +
                         std::to_string(i % num_layers) + ")");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

// ---------------------------------------------------------------------------
// sequences
// ---------------------------------------------------------------------------

/// Builds the training sequence for one record: the first p complete layers
/// become inputs, the following q complete layers the targets. Incomplete
/// layers are skipped entirely.
inline GraphSequence sequence_from_record(const LayerRecord& rec, std::size_t p, std::size_t q,
                                          HaversineMode mode = HaversineMode::AsPrinted) {
  const std::vector<std::size_t> layers = rec.complete_layer_indices();
  if (layers.size() < p + q) {
    throw ValidationError("sequence_from_record: record '" + rec.source_id + "' has " +
                          std::to_string(layers.size()) + " complete layers, needs " +
                          std::to_string(p + q));
  }
  std::vector<double> matrix(rec.num_traces * (p + q));
  for (std::size_t t = 0; t < rec.num_traces; ++t)
    for (std::size_t j = 0; j < p + q; ++j)
      matrix[t * (p + q) + j] = rec.thickness_at(t, layers[j]);
  GraphSequence seq = build_sequence(rec.latitude, rec.longitude, matrix, p + q, p, q, mode,
                                     rec.source_id);
  for (std::size_t j = 0; j < p; ++j) seq.input_layer_indices[j] = layers[j];
  for (std::size_t j = 0; j < q; ++j) seq.target_layer_indices[j] = layers[p + j];
  return seq;
}

// ---------------------------------------------------------------------------
// split manifest (JSON)
// ---------------------------------------------------------------------------

struct SplitManifest {
  std::vector<SplitSpec> versions;
  std::vector<NormStats> stats;  // train-split statistics, one per version
};

inline nlohmann::json norm_stats_to_json(const NormStats& s) {
  return nlohmann::json{{"lat_mean", s.lat_mean},   {"lat_std", s.lat_std},
                        {"lon_mean", s.lon_mean},   {"lon_std", s.lon_std},
                        {"thick_mean", s.thick_mean}, {"thick_std", s.thick_std}};
}

inline NormStats norm_stats_from_json(const nlohmann::json& j) {
  NormStats s;
  s.lat_mean = j.at("lat_mean").get<double>();
  s.lat_std = j.at("lat_std").get<double>();
  s.lon_mean = j.at("lon_mean").get<double>();
  s.lon_std = j.at("lon_std").get<double>();
  s.thick_mean = j.at("thick_mean").get<double>();
  s.thick_std = j.at("thick_std").get<double>();
  return s;
}

inline void save_manifest(const SplitManifest& manifest, const std::string& path) {
  nlohmann::json root = nlohmann::json::object();
  for (std::size_t k = 0; k < manifest.versions.size(); ++k) {
    const SplitSpec& spec = manifest.versions[k];
    nlohmann::json v{{"seed", spec.seed},
                     {"train", spec.train},
                     {"val", spec.val},
                     {"test", spec.test}};
    if (k < manifest.stats.size()) v["stats"] = norm_stats_to_json(manifest.stats[k]);
    root[std::to_string(k)] = std::move(v);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("save_manifest: cannot open '" + path + "'");
  out << root.dump(2) << '\n';
}

inline SplitManifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("load_manifest: cannot open '" + path + "'");
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_manifest: " + std::string(e.what()));
  }
  SplitManifest manifest;
  for (std::size_t k = 0;; ++k) {
    const std::string key = std::to_string(k);
    if (!root.contains(key)) break;
    const auto& v = root.at(key);
    SplitSpec spec;
    spec.seed = v.at("seed").get<std::uint64_t>();
    spec.train = v.at("train").get<std::vector<std::string>>();
    spec.val = v.at("val").get<std::vector<std::string>>();
    spec.test = v.at("test").get<std::vector<std::string>>();
    manifest.versions.push_back(std::move(spec));
    if (v.contains("stats")) {
      manifest.stats.push_back(norm_stats_from_json(v.at("stats")));
    }
  }
  if (manifest.versions.empty()) throw ParseError("load_manifest: no versions in '" + path + "'");
  return manifest;
}

}  // namespace stgrit
