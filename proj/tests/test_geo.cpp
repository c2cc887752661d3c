#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "stgrit/geo.hpp"

using namespace stgrit;

// Reference values computed independently with 50-digit arithmetic.
namespace reference {
// central angle of (0deg,0deg)-(0deg,1deg) under the raw-arcsin formula
constexpr double kOneDegreeEquatorAngle = 1.5230484375596833189e-4;
constexpr double kOneDegreeEquatorWeight = 6565.7793628826282791;
// same pair under the standard (square-root) formula: exactly 1 degree
constexpr double kOneDegreeRadians = 0.017453292519943295769;
// (70.5,-45.25)-(70.75,-44.5), raw-arcsin formula
constexpr double kGreenlandPairAngle = 1.8947786661990397263e-5;
}  // namespace reference

TEST(HaversineAngle, IdenticalPointsGiveZero) {
  EXPECT_DOUBLE_EQ(haversine_angle(45.0, -60.0, 45.0, -60.0), 0.0);
  EXPECT_DOUBLE_EQ(haversine_angle(0.0, 0.0, 0.0, 0.0, HaversineMode::Standard), 0.0);
}

TEST(HaversineAngle, MatchesHighPrecisionReference) {
  const double angle = haversine_angle(0.0, 0.0, 0.0, 1.0);
  EXPECT_NEAR(angle / reference::kOneDegreeEquatorAngle, 1.0, 1e-14);
  const double greenland = haversine_angle(70.5, -45.25, 70.75, -44.5);
  EXPECT_NEAR(greenland / reference::kGreenlandPairAngle, 1.0, 1e-13);
}

TEST(HaversineAngle, StandardModeRecoversGreatCircle) {
  const double angle = haversine_angle(0.0, 0.0, 0.0, 1.0, HaversineMode::Standard);
  EXPECT_NEAR(angle / reference::kOneDegreeRadians, 1.0, 1e-14);
}

TEST(HaversineAngle, SymmetricUnderSwap) {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double lat1 = rng.uniform(-90.0, 90.0);
    const double lon1 = rng.uniform(-180.0, 180.0);
    const double lat2 = rng.uniform(-90.0, 90.0);
    const double lon2 = rng.uniform(-180.0, 180.0);
    EXPECT_EQ(haversine_angle(lat1, lon1, lat2, lon2), haversine_angle(lat2, lon2, lat1, lon1));
  }
}

TEST(HaversineAngle, OutOfRangeRejected) {
  EXPECT_THROW(haversine_angle(91.0, 0.0, 0.0, 0.0), ValidationError);
  EXPECT_THROW(haversine_angle(0.0, 181.0, 0.0, 0.0), ValidationError);
}

TEST(EdgeWeight, UnitAngle) { EXPECT_DOUBLE_EQ(edge_weight_from_angle(1.0), 1.0); }

TEST(EdgeWeight, ZeroAngleClamped) { EXPECT_DOUBLE_EQ(edge_weight_from_angle(0.0), 1e9); }

TEST(EdgeWeight, ReciprocalOfReferenceAngle) {
  const double w = edge_weight_from_angle(haversine_angle(0.0, 0.0, 0.0, 1.0));
  EXPECT_NEAR(w / reference::kOneDegreeEquatorWeight, 1.0, 1e-13);
}

TEST(BuildLayerGraph, SymmetricZeroDiagonal) {
  std::vector<double> lat{70.0, 70.01, 70.02, 70.05};
  std::vector<double> lon{-45.0, -45.02, -45.01, -44.98};
  std::vector<double> thick{10.0, 11.0, 12.0, 13.0};
  LayerGraph g = build_layer_graph(lat, lon, thick);
  ASSERT_EQ(g.num_nodes, 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(g.weight_at(i, i), 0.0);
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_EQ(g.weight_at(i, j), g.weight_at(j, i));
      if (i != j) {
        EXPECT_GT(g.weight_at(i, j), 0.0);
      }
    }
  }
}

TEST(BuildLayerGraph, InputValidation) {
  std::vector<double> lat{70.0, 70.1};
  std::vector<double> lon{-45.0, -45.1};
  EXPECT_THROW(build_layer_graph(lat, lon, {1.0}), ValidationError);  // length mismatch
  EXPECT_THROW(build_layer_graph({95.0, 70.0}, lon, {1.0, 2.0}), ValidationError);
  EXPECT_THROW(build_layer_graph(lat, {-200.0, 10.0}, {1.0, 2.0}), ValidationError);
  EXPECT_THROW(build_layer_graph(lat, lon, {-1.0, 2.0}), ValidationError);  // negative thickness
  EXPECT_THROW(build_layer_graph({70.0}, {-45.0}, {1.0}), ValidationError);  // single node
}

TEST(BuildLayerGraph, CoincidentFixesUseClamp) {
  // repeated GPS fix: weight hits the 1/min_angle ceiling instead of erroring
  std::vector<double> lat{70.0, 70.0, 70.1};
  std::vector<double> lon{-45.0, -45.0, -45.1};
  LayerGraph g = build_layer_graph(lat, lon, {1.0, 1.0, 1.0});
  EXPECT_DOUBLE_EQ(g.weight_at(0, 1), 1e9);
}

TEST(EdgeWeight, MonotoneAlongEquator) {
  double prev = edge_weight_from_angle(haversine_angle(0.0, 0.0, 0.0, 0.1));
  for (double sep = 0.2; sep < 20.0; sep += 0.1) {
    const double w = edge_weight_from_angle(haversine_angle(0.0, 0.0, 0.0, sep));
    EXPECT_LT(w, prev) << "separation " << sep;
    prev = w;
  }
}

TEST(EdgeWeight, NearerPairsOutweighFartherOnes) {
  // straight flight line along a parallel
  std::vector<double> lat(8, 71.0), lon(8), thick(8, 5.0);
  for (std::size_t i = 0; i < 8; ++i) lon[i] = -45.0 + 0.01 * static_cast<double>(i);
  LayerGraph g = build_layer_graph(lat, lon, thick);
  for (std::size_t d = 2; d < 8; ++d) EXPECT_GT(g.weight_at(0, d - 1), g.weight_at(0, d));
}

TEST(BuildSequence, TwoNodeExample) {
  // thickness matrix rows per node: layer0 (input), layer1 (target)
  std::vector<double> lat{70.0, 70.1};
  std::vector<double> lon{-45.0, -45.1};
  std::vector<double> matrix{3, 7, 4, 8};
  GraphSequence seq = build_sequence(lat, lon, matrix, 2, 1, 1);
  ASSERT_EQ(seq.inputs.size(), 1u);
  EXPECT_EQ(seq.inputs[0].thickness, (std::vector<double>{3, 4}));
  EXPECT_EQ(seq.targets, (std::vector<double>{7, 8}));
}

TEST(BuildSequence, PaperScaleShapes) {
  const std::size_t n = 256, p = 5, q = 15;
  std::vector<double> lat(n), lon(n), matrix(n * (p + q));
  Rng rng(3);
  for (std::size_t i = 0; i < n; ++i) {
    lat[i] = 70.0 + 0.001 * static_cast<double>(i);
    lon[i] = -45.0 + 0.001 * static_cast<double>(i);
  }
  for (double& v : matrix) v = rng.uniform(5.0, 50.0);
  GraphSequence seq = build_sequence(lat, lon, matrix, p + q, p, q);
  EXPECT_EQ(seq.inputs.size(), p);
  EXPECT_EQ(seq.num_nodes, n);
  EXPECT_EQ(seq.targets.size(), n * q);
}

TEST(BuildSequence, InputsShareOneWeightMatrix) {
  const std::size_t n = 6, p = 5, q = 2;
  std::vector<double> lat(n), lon(n), matrix(n * (p + q), 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    lat[i] = 70.0 + 0.01 * static_cast<double>(i);
    lon[i] = -45.0;
  }
  GraphSequence seq = build_sequence(lat, lon, matrix, p + q, p, q);
  // same buffer, computed once
  EXPECT_EQ(seq.inputs[0].edge_weight.get(), seq.inputs[4].edge_weight.get());
}

TEST(BuildSequence, InsufficientLayersRejected) {
  std::vector<double> lat{70.0, 70.1};
  std::vector<double> lon{-45.0, -45.1};
  std::vector<double> matrix{1, 2, 3, 4};  // 2 layers
  EXPECT_THROW(build_sequence(lat, lon, matrix, 2, 2, 1), ValidationError);
}

// An independent long-double evaluation of the raw-arcsin formula, written
// separately from the implementation it checks.
namespace {

long double independent_angle(long double lat1, long double lon1, long double lat2,
                              long double lon2) {
  const long double deg = 0.01745329251994329576923690768488612713L;
  const long double p1 = lat1 * deg, p2 = lat2 * deg;
  auto hav_ld = [](long double t) {
    const long double s = sinl(t / 2.0L);
    return s * s;
  };
  long double arg =
      hav_ld((lat2 - lat1) * deg) + cosl(p1) * cosl(p2) * hav_ld((lon2 - lon1) * deg);
  if (arg > 1.0L) arg = 1.0L;
  if (arg < 0.0L) arg = 0.0L;
  return 2.0L * asinl(arg);
}

}  // namespace

TEST(EdgeWeight, MatchesIndependentHighPrecisionEvaluation) {
  Rng rng(77);
  for (int i = 0; i < 50; ++i) {
    const double lat1 = rng.uniform(60.0, 82.0);
    const double lon1 = rng.uniform(-73.0, -12.0);
    const double lat2 = lat1 + rng.uniform(0.001, 0.5);
    const double lon2 = lon1 + rng.uniform(0.001, 0.5);
    const double w = edge_weight_from_angle(haversine_angle(lat1, lon1, lat2, lon2));
    const long double expected = 1.0L / independent_angle(lat1, lon1, lat2, lon2);
    const double rel =
        std::fabs(w - static_cast<double>(expected)) / static_cast<double>(expected);
    EXPECT_LT(rel, 1e-12);
    EXPECT_EQ(haversine_angle(lat1, lon1, lat2, lon2), haversine_angle(lat2, lon2, lat1, lon1));
  }
}
