#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "stgrit/common.hpp"

namespace stgrit {

/// The great-circle weighting has two variants: AsPrinted applies arcsin to
/// the raw haversine sum (the default used throughout this project), Standard
/// inserts the square root of the classical formula.
enum class HaversineMode { AsPrinted, Standard };

inline HaversineMode haversine_mode_from_string(const std::string& s) {
  if (s == "as-printed") return HaversineMode::AsPrinted;
  if (s == "standard") return HaversineMode::Standard;
  throw ConfigError("unknown haversine_mode '" + s + "' (expected as-printed or standard)");
}

inline std::string to_string(HaversineMode m) {
  return m == HaversineMode::AsPrinted ? "as-printed" : "standard";
}

constexpr double kDegToRad = 0.017453292519943295769236907684886;

inline double hav(double theta) {
  const double s = std::sin(theta * 0.5);
  return s * s;
}

/// Central angle between two coordinates, in radians. The arcsin argument is
/// clamped to [0, 1]; the AsPrinted variant can push it past 1 for nearly
/// antipodal pairs and floating-point drift can push either variant below 0.
inline double haversine_angle(double lat1, double lon1, double lat2, double lon2,
                              HaversineMode mode = HaversineMode::AsPrinted) {
  if (std::fabs(lat1) > 90.0 || std::fabs(lat2) > 90.0)
    throw ValidationError("haversine_angle: latitude outside [-90, 90]");
  if (std::fabs(lon1) > 180.0 || std::fabs(lon2) > 180.0)
    throw ValidationError("haversine_angle: longitude outside [-180, 180]");
  const double phi1 = lat1 * kDegToRad;
  const double phi2 = lat2 * kDegToRad;
  const double dphi = (lat2 - lat1) * kDegToRad;
  const double dlambda = (lon2 - lon1) * kDegToRad;
  double arg = hav(dphi) + std::cos(phi1) * std::cos(phi2) * hav(dlambda);
  if (mode == HaversineMode::Standard) arg = std::sqrt(std::max(arg, 0.0));
  arg = std::clamp(arg, 0.0, 1.0);
  return 2.0 * std::asin(arg);
}

/// Reciprocal-angle edge weight; the angle is clamped away from zero so
/// coincident GPS fixes yield a large finite weight instead of a singularity.
inline double edge_weight_from_angle(double angle, double min_angle = 1e-9) {
  if (angle < 0.0) throw ValidationError("edge_weight_from_angle: negative angle");
  return 1.0 / std::max(angle, min_angle);
}

/// One internal ice layer as a spatial graph: per-trace coordinates, one
/// thickness per trace, and a dense symmetric edge-weight matrix with zero
/// diagonal. Sequences share a single weight matrix across their layers.
struct LayerGraph {
  std::size_t num_nodes = 0;
  std::vector<double> latitude;
  std::vector<double> longitude;
  std::vector<double> thickness;
  std::shared_ptr<const std::vector<double>> edge_weight;  // num_nodes × num_nodes

  double weight_at(std::size_t i, std::size_t j) const {
    return (*edge_weight)[i * num_nodes + j];
  }
};

namespace detail {

inline void validate_coordinates(const std::vector<double>& lat, const std::vector<double>& lon) {
  for (double v : lat)
    if (!(v >= -90.0 && v <= 90.0)) throw ValidationError("latitude outside [-90, 90]");
  for (double v : lon)
    if (!(v >= -180.0 && v <= 180.0)) throw ValidationError("longitude outside [-180, 180]");
}

inline std::shared_ptr<const std::vector<double>> build_weight_matrix(
    const std::vector<double>& lat, const std::vector<double>& lon, HaversineMode mode,
    double min_angle) {
  const std::size_t n = lat.size();
  auto w = std::make_shared<std::vector<double>>(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double angle = haversine_angle(lat[i], lon[i], lat[j], lon[j], mode);
      const double weight = edge_weight_from_angle(angle, min_angle);
      (*w)[i * n + j] = weight;
      (*w)[j * n + i] = weight;
    }
  }
  return w;
}

}  // namespace detail

/// Fully connected undirected spatial graph over one layer's traces.
inline LayerGraph build_layer_graph(const std::vector<double>& latitude,
                                    const std::vector<double>& longitude,
                                    const std::vector<double>& thickness,
                                    HaversineMode mode = HaversineMode::AsPrinted,
                                    double min_angle = 1e-9) {
  const std::size_t n = latitude.size();
  if (longitude.size() != n || thickness.size() != n)
    throw ValidationError("build_layer_graph: coordinate/thickness lengths disagree");
  if (n < 2) throw ValidationError("build_layer_graph: need at least 2 nodes");
  detail::validate_coordinates(latitude, longitude);
  for (double t : thickness)
    if (t < 0.0) throw ValidationError("build_layer_graph: negative thickness");
  LayerGraph g;
  g.num_nodes = n;
  g.latitude = latitude;
  g.longitude = longitude;
  g.thickness = thickness;
  g.edge_weight = detail::build_weight_matrix(latitude, longitude, mode, min_angle);
  return g;
}

/// Temporal stack of p input LayerGraphs over a shared node set plus the
/// q-layer target thickness matrix. The input graphs share one edge-weight
/// matrix, computed once.
struct GraphSequence {
  std::vector<LayerGraph> inputs;  // p graphs, youngest first
  std::vector<double> targets;     // num_nodes × q, row-major
  std::size_t num_nodes = 0;
  std::size_t q = 0;
  std::string source_id;
  // original layer indices within the source record, for export and plots
  std::vector<std::size_t> input_layer_indices;
  std::vector<std::size_t> target_layer_indices;

  double target_at(std::size_t node, std::size_t layer) const { return targets[node * q + layer]; }
};

/// Builds a GraphSequence from a num_nodes × num_layers thickness matrix
/// (row-major, columns ordered youngest first). The first p columns become
/// input graphs, the next q the target matrix.
inline GraphSequence build_sequence(const std::vector<double>& latitude,
                                    const std::vector<double>& longitude,
                                    const std::vector<double>& thickness_matrix,
                                    std::size_t num_layers, std::size_t p, std::size_t q,
                                    HaversineMode mode = HaversineMode::AsPrinted,
                                    std::string source_id = {}, double min_angle = 1e-9) {
  const std::size_t n = latitude.size();
  if (p == 0 || q == 0) throw ConfigError("build_sequence: p and q must be positive");
  if (num_layers < p + q)
    throw ValidationError("build_sequence: record has " + std::to_string(num_layers) +
                          " layers, needs at least " + std::to_string(p + q));
  if (longitude.size() != n || thickness_matrix.size() != n * num_layers)
    throw ValidationError("build_sequence: input lengths disagree");
  if (n < 2) throw ValidationError("build_sequence: need at least 2 nodes");
  detail::validate_coordinates(latitude, longitude);

  GraphSequence seq;
  seq.num_nodes = n;
  seq.q = q;
  seq.source_id = std::move(source_id);
  auto weights = detail::build_weight_matrix(latitude, longitude, mode, min_angle);
  seq.inputs.reserve(p);
  for (std::size_t layer = 0; layer < p; ++layer) {
    LayerGraph g;
    g.num_nodes = n;
    g.latitude = latitude;
    g.longitude = longitude;
    g.thickness.resize(n);
    for (std::size_t t = 0; t < n; ++t) {
      const double th = thickness_matrix[t * num_layers + layer];
      if (th < 0.0) throw ValidationError("build_sequence: negative thickness");
      g.thickness[t] = th;
    }
    g.edge_weight = weights;
    seq.inputs.push_back(std::move(g));
    seq.input_layer_indices.push_back(layer);
  }
  seq.targets.resize(n * q);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t layer = 0; layer < q; ++layer)
      seq.targets[t * q + layer] = thickness_matrix[t * num_layers + (p + layer)];
  for (std::size_t layer = 0; layer < q; ++layer) seq.target_layer_indices.push_back(p + layer);
  return seq;
}

}  // namespace stgrit
