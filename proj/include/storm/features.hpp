#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "storm/tensor.hpp"

namespace storm {

/// Planar Cartesian coordinates in meters.
struct Location {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Location&, const Location&) = default;
};

struct Measurement {
  Location location;
  double power_db = 0.0;
  friend bool operator==(const Measurement&, const Measurement&) = default;
};

double distance(Location a, Location b);

/// Rotation that turns the power-weighted measurement direction (as seen from
/// the target) onto the positive first axis.
struct RotationFrame {
  std::array<double, 4> rotation{1.0, 0.0, 0.0, 1.0};  // row-major 2x2
  Location direction;                                  // un-normalized weighted sum
  bool degenerate = true;

  Location apply(Location offset) const {
    return {rotation[0] * offset.x + rotation[1] * offset.y, rotation[2] * offset.x + rotation[3] * offset.y};
  }
};

/// Affine standardization of powers, estimated on training data.
struct PowerNormalization {
  double mean = 0.0;
  double stddev = 1.0;
  double normalize(double power_db) const { return (power_db - mean) / stddev; }
  double denormalize(double value) const { return value * stddev + mean; }
};

struct FeatureConfig {
  /// Append radius, cos and sin of the rotated offset.
  bool polar = true;
  /// Geometric entries are divided by this length (meters).
  double length_scale = 32.0;

  std::size_t dim() const { return polar ? 6 : 3; }
  std::size_t geometric_dim() const { return dim() - 1; }
  void validate() const;
};

/// One column per measurement: [normalized power, geometric entries...].
struct FeatureMatrix {
  Tensor values;
  Location target;
  RotationFrame frame;
  std::vector<std::size_t> source;  // column -> index into the input list

  std::size_t columns() const { return values.cols(); }
};

/// Below this norm (meters) the weighted direction is treated as zero.
inline constexpr double kDegenerateDirection = 1e-9;

RotationFrame rotation_frame(std::span<const Measurement> measurements, Location target);

FeatureMatrix build_features(std::span<const Measurement> measurements, Location target,
                             const FeatureConfig& config, const PowerNormalization& normalization);
/// Same as above with a caller-supplied frame (candidate columns must share
/// the frame of the real measurements).
FeatureMatrix build_features(std::span<const Measurement> measurements, Location target,
                             const RotationFrame& frame, const FeatureConfig& config,
                             const PowerNormalization& normalization);

/// Geometric rows only; one row fewer than build_features.
Tensor build_candidate_features(std::span<const Location> candidates, const RotationFrame& frame,
                                Location target, const FeatureConfig& config);

}  // namespace storm
