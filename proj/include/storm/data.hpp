#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "storm/features.hpp"

namespace storm {

class Rng;

/// Geolocated power measurements drawn from one ground-truth map. Locations
/// lie in [0, extent_x] x [0, extent_y].
struct MeasurementSet {
  std::string id;
  std::vector<Measurement> measurements;
  double extent_x = 0.0;
  double extent_y = 0.0;
  std::optional<double> grid_spacing;

  void validate() const;
  std::size_t size() const { return measurements.size(); }
};

struct SyntheticMapConfig {
  /// Empty: one transmitter placed uniformly at random inside the map.
  std::vector<Location> transmitters;
  double reference_power_db = -30.0;
  double reference_distance = 10.0;
  double path_loss_exponent = 3.0;
  double shadowing_std = 6.0;
  double shadowing_correlation = 30.0;
  double noise_std = 1.0;
  double extent_x = 700.0;
  double extent_y = 700.0;
  /// Spacing of the grid the shadowing field is synthesized on.
  double grid_resolution = 4.0;
  /// Spacing of the measurement grid; 0 draws `random_measurements`
  /// uniformly scattered locations instead.
  double measurement_spacing = 4.0;
  std::size_t random_measurements = 0;
  std::uint64_t seed = 1;

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static SyntheticMapConfig from_map(const std::map<std::string, std::string>& values);
};

/// Noise-free power map p(x): log-distance path loss plus a correlated
/// Gaussian shadowing field, bilinearly interpolated between grid nodes.
class GroundTruthMap {
 public:
  GroundTruthMap() = default;
  GroundTruthMap(const SyntheticMapConfig& config, std::vector<Location> transmitters,
                 std::vector<double> shadowing, std::size_t nx, std::size_t ny);

  double operator()(Location x) const;
  double path_loss_db(Location x) const;
  double shadowing_db(Location x) const;
  /// Shadowing at grid node (i, j), i along x.
  double shadowing_node(std::size_t i, std::size_t j) const { return shadowing_[j * nx_ + i]; }
  std::size_t nodes_x() const { return nx_; }
  std::size_t nodes_y() const { return ny_; }
  const std::vector<Location>& transmitters() const { return transmitters_; }

 private:
  SyntheticMapConfig config_;
  std::vector<Location> transmitters_;
  std::vector<double> shadowing_;
  std::size_t nx_ = 0;
  std::size_t ny_ = 0;
};

struct SyntheticScene {
  MeasurementSet ms;
  GroundTruthMap truth;
};

SyntheticScene generate_synthetic_ms(const SyntheticMapConfig& config, const std::string& id = "ms");

/// Sub-square of a measurement set.
struct Patch {
  MeasurementSet ms;                 // measurements inside the square, original coordinates
  std::vector<std::size_t> indices;  // positions in the parent set
  Location corner;
  double side = 0.0;
};

/// Range queries over a measurement set, indexed by x coordinate.
class PatchSampler {
 public:
  explicit PatchSampler(const MeasurementSet& ms);

  /// Uniformly placed square; `aligned` snaps the corner to the grid.
  Patch sample(double side, Rng& rng, bool aligned = true) const;
  /// All measurements with corner <= location <= corner + side.
  Patch extract(Location corner, double side) const;
  const MeasurementSet& source() const { return *ms_; }

 private:
  const MeasurementSet* ms_;
  std::vector<std::size_t> by_x_;
};

MeasurementSet sample_patch(const MeasurementSet& ms, double side, Rng& rng, bool aligned = true);

/// One training or evaluation example: features of N inputs relative to a
/// held-out target measurement.
struct Example {
  FeatureMatrix features;
  double target_db = 0.0;
  std::string source_id;
  std::size_t n = 0;
};

/// Random roles inside one patch: a target, N ordered inputs, and the rest.
struct SceneDraw {
  Measurement target;
  std::vector<Measurement> inputs;
  std::vector<Measurement> rest;
};

SceneDraw draw_scene(const MeasurementSet& patch, std::size_t n, Rng& rng);
Example build_example(const MeasurementSet& patch, std::size_t n, Rng& rng, const FeatureConfig& config,
                      const PowerNormalization& normalization);

/// Text table: optional "# key=value" metadata lines, then the header
/// `x_m,y_m,power_db` and one measurement per line.
/// `header` adds further metadata lines; readers ignore unknown keys.
void write_ms_file(const MeasurementSet& ms, const std::string& path,
                   const std::map<std::string, std::string>& header = {});
MeasurementSet read_ms_file(const std::string& path);

PowerNormalization estimate_normalization(std::span<const MeasurementSet> sets);

}  // namespace storm
