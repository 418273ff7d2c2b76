#include "storm/features.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "storm/errors.hpp"

namespace storm {

double distance(Location a, Location b) { return std::hypot(a.x - b.x, a.y - b.y); }

void FeatureConfig::validate() const {
  if (!(length_scale > 0.0) || !std::isfinite(length_scale)) {
    throw ConfigError("feature length scale must be positive");
  }
}

namespace {

void check_finite(Location l, const char* what) {
  if (!std::isfinite(l.x) || !std::isfinite(l.y)) throw std::invalid_argument(std::string(what) + " is not finite");
}

// Geometric entries of one offset, written into rows [first, first + geometric_dim).
void write_geometry(Tensor& out, std::size_t first, std::size_t col, Location offset, const RotationFrame& frame,
                    const FeatureConfig& config) {
  const Location r = frame.apply(offset);
  out(first, col) = r.x / config.length_scale;
  out(first + 1, col) = r.y / config.length_scale;
  if (!config.polar) return;
  const double radius = std::hypot(r.x, r.y);
  out(first + 2, col) = radius / config.length_scale;
  if (radius > 0.0) {
    out(first + 3, col) = r.x / radius;
    out(first + 4, col) = r.y / radius;
  } else {
    out(first + 3, col) = 1.0;
    out(first + 4, col) = 0.0;
  }
}

}  // namespace

RotationFrame rotation_frame(std::span<const Measurement> measurements, Location target) {
  if (measurements.empty()) throw std::invalid_argument("rotation frame needs at least one measurement");
  check_finite(target, "target location");
  double peak = measurements.front().power_db;
  for (const auto& m : measurements) {
    check_finite(m.location, "measurement location");
    if (!std::isfinite(m.power_db)) throw std::invalid_argument("measurement power is not finite");
    peak = std::max(peak, m.power_db);
  }
  RotationFrame frame;
  for (const auto& m : measurements) {
    const double w = std::exp(m.power_db - peak);
    frame.direction.x += w * (m.location.x - target.x);
    frame.direction.y += w * (m.location.y - target.y);
  }
  const double norm = std::hypot(frame.direction.x, frame.direction.y);
  if (norm < kDegenerateDirection) {
    frame.degenerate = true;
    frame.rotation = {1.0, 0.0, 0.0, 1.0};
    return frame;
  }
  const double ux = frame.direction.x / norm;
  const double uy = frame.direction.y / norm;
  frame.degenerate = false;
  frame.rotation = {ux, uy, -uy, ux};
  return frame;
}

FeatureMatrix build_features(std::span<const Measurement> measurements, Location target,
                             const FeatureConfig& config, const PowerNormalization& normalization) {
  return build_features(measurements, target, rotation_frame(measurements, target), config, normalization);
}

FeatureMatrix build_features(std::span<const Measurement> measurements, Location target,
                             const RotationFrame& frame, const FeatureConfig& config,
                             const PowerNormalization& normalization) {
  if (measurements.empty()) throw std::invalid_argument("cannot build features from zero measurements");
  config.validate();
  check_finite(target, "target location");
  FeatureMatrix fm;
  fm.values = Tensor(config.dim(), measurements.size());
  fm.target = target;
  fm.frame = frame;
  fm.source.resize(measurements.size());
  for (std::size_t n = 0; n < measurements.size(); ++n) {
    const Measurement& m = measurements[n];
    check_finite(m.location, "measurement location");
    if (!std::isfinite(m.power_db)) throw std::invalid_argument("measurement power is not finite");
    fm.values(0, n) = normalization.normalize(m.power_db);
    write_geometry(fm.values, 1, n, {m.location.x - target.x, m.location.y - target.y}, frame, config);
    fm.source[n] = n;
  }
  return fm;
}

Tensor build_candidate_features(std::span<const Location> candidates, const RotationFrame& frame,
                                Location target, const FeatureConfig& config) {
  if (candidates.empty()) throw std::invalid_argument("candidate list is empty");
  config.validate();
  Tensor c(config.geometric_dim(), candidates.size());
  for (std::size_t q = 0; q < candidates.size(); ++q) {
    check_finite(candidates[q], "candidate location");
    write_geometry(c, 0, q, {candidates[q].x - target.x, candidates[q].y - target.y}, frame, config);
  }
  return c;
}

}  // namespace storm
