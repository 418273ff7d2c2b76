#include "storm/data.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>

#include "storm/config.hpp"
#include "storm/errors.hpp"
#include "storm/random.hpp"

namespace storm {

namespace {

// FFTW's planner is not re-entrant.
std::mutex& fftw_mutex() {
  static std::mutex m;
  return m;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

std::size_t grid_count(double extent, double spacing) {
  return static_cast<std::size_t>(std::floor(extent / spacing + 1e-9)) + 1;
}

// Zero-mean Gaussian field with covariance sigma^2 exp(-r / corr) on an
// nx x ny grid: white noise filtered by the square root of the covariance,
// applied as a circular convolution on a padded torus.
std::vector<double> correlated_field(std::size_t nx, std::size_t ny, double spacing, double sigma, double corr,
                                     Rng& rng) {
  std::vector<double> out(nx * ny, 0.0);
  if (sigma == 0.0) return out;
  const std::size_t pad = static_cast<std::size_t>(std::ceil(8.0 * corr / spacing));
  const std::size_t lx = next_pow2(nx + pad);
  const std::size_t ly = next_pow2(ny + pad);
  const std::size_t total = lx * ly;
  const std::size_t half = lx / 2 + 1;

  std::vector<double> cov(total), white(total);
  for (std::size_t j = 0; j < ly; ++j) {
    const double dy = static_cast<double>(std::min(j, ly - j)) * spacing;
    for (std::size_t i = 0; i < lx; ++i) {
      const double dx = static_cast<double>(std::min(i, lx - i)) * spacing;
      cov[j * lx + i] = sigma * sigma * std::exp(-std::hypot(dx, dy) / corr);
    }
  }
  for (double& w : white) w = rng.normal();

  fftw_complex* spec_cov = fftw_alloc_complex(ly * half);
  fftw_complex* spec_white = fftw_alloc_complex(ly * half);
  std::vector<double> field(total);
  {
    std::lock_guard lock(fftw_mutex());
    fftw_plan p1 = fftw_plan_dft_r2c_2d(static_cast<int>(ly), static_cast<int>(lx), cov.data(), spec_cov, FFTW_ESTIMATE);
    fftw_plan p2 =
        fftw_plan_dft_r2c_2d(static_cast<int>(ly), static_cast<int>(lx), white.data(), spec_white, FFTW_ESTIMATE);
    fftw_execute(p1);
    fftw_execute(p2);
    for (std::size_t k = 0; k < ly * half; ++k) {
      const double eig = std::max(spec_cov[k][0], 0.0);
      const double amp = std::sqrt(eig);
      spec_white[k][0] *= amp;
      spec_white[k][1] *= amp;
    }
    fftw_plan p3 =
        fftw_plan_dft_c2r_2d(static_cast<int>(ly), static_cast<int>(lx), spec_white, field.data(), FFTW_ESTIMATE);
    fftw_execute(p3);
    fftw_destroy_plan(p1);
    fftw_destroy_plan(p2);
    fftw_destroy_plan(p3);
  }
  fftw_free(spec_cov);
  fftw_free(spec_white);

  const double norm = 1.0 / static_cast<double>(total);
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) out[j * nx + i] = field[j * lx + i] * norm;
  return out;
}

double require(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ConfigError("missing key " + key);
  auto v = parse_double(it->second);
  if (!v) throw ConfigError(key + ": not a number");
  return *v;
}

}  // namespace

// ---------------------------------------------------------------------------

void MeasurementSet::validate() const {
  for (std::size_t i = 0; i < measurements.size(); ++i) {
    const auto& m = measurements[i];
    if (!std::isfinite(m.location.x) || !std::isfinite(m.location.y) || !std::isfinite(m.power_db)) {
      throw FormatError("measurement " + std::to_string(i) + " of " + id + " is not finite");
    }
    if (m.location.x < 0.0 || m.location.x > extent_x || m.location.y < 0.0 || m.location.y > extent_y) {
      throw FormatError("measurement " + std::to_string(i) + " of " + id + " lies outside the " +
                        format_double(extent_x) + " x " + format_double(extent_y) + " m bounding box");
    }
  }
}

void SyntheticMapConfig::validate() const {
  if (!(path_loss_exponent > 0.0)) throw ConfigError("path_loss_exponent must be positive");
  if (!(shadowing_std >= 0.0)) throw ConfigError("shadowing_std must be non-negative");
  if (!(shadowing_correlation > 0.0)) throw ConfigError("shadowing_correlation must be positive");
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be non-negative");
  if (!(reference_distance > 0.0)) throw ConfigError("reference_distance must be positive");
  if (!(extent_x > 0.0) || !(extent_y > 0.0)) throw ConfigError("map extents must be positive");
  if (!(grid_resolution > 0.0)) throw ConfigError("grid_resolution must be positive");
  if (measurement_spacing < 0.0) throw ConfigError("measurement_spacing must be non-negative");
  if (measurement_spacing == 0.0 && random_measurements == 0) {
    throw ConfigError("gridless generation needs random_measurements > 0");
  }
  for (const auto& t : transmitters)
    if (!std::isfinite(t.x) || !std::isfinite(t.y)) throw ConfigError("transmitter location is not finite");
}

std::map<std::string, std::string> SyntheticMapConfig::to_map() const {
  std::map<std::string, std::string> m{
      {"reference_power_db", format_double(reference_power_db)},
      {"reference_distance", format_double(reference_distance)},
      {"path_loss_exponent", format_double(path_loss_exponent)},
      {"shadowing_std", format_double(shadowing_std)},
      {"shadowing_correlation", format_double(shadowing_correlation)},
      {"noise_std", format_double(noise_std)},
      {"extent_x", format_double(extent_x)},
      {"extent_y", format_double(extent_y)},
      {"grid_resolution", format_double(grid_resolution)},
      {"measurement_spacing", format_double(measurement_spacing)},
      {"random_measurements", std::to_string(random_measurements)},
      {"seed", std::to_string(seed)},
  };
  std::string tx;
  for (const auto& t : transmitters) {
    if (!tx.empty()) tx += ";";
    tx += format_double(t.x) + " " + format_double(t.y);
  }
  if (!tx.empty()) m["transmitters"] = tx;
  return m;
}

SyntheticMapConfig SyntheticMapConfig::from_map(const std::map<std::string, std::string>& values) {
  SyntheticMapConfig c;
  SectionReader r("synthetic", values);
  c.reference_power_db = r.get_double("reference_power_db", c.reference_power_db);
  c.reference_distance = r.get_double("reference_distance", c.reference_distance);
  c.path_loss_exponent = r.get_double("path_loss_exponent", c.path_loss_exponent);
  c.shadowing_std = r.get_double("shadowing_std", c.shadowing_std);
  c.shadowing_correlation = r.get_double("shadowing_correlation", c.shadowing_correlation);
  c.noise_std = r.get_double("noise_std", c.noise_std);
  c.extent_x = r.get_double("extent_x", c.extent_x);
  c.extent_y = r.get_double("extent_y", c.extent_y);
  c.grid_resolution = r.get_double("grid_resolution", c.grid_resolution);
  c.measurement_spacing = r.get_double("measurement_spacing", c.measurement_spacing);
  c.random_measurements = r.get_size("random_measurements", c.random_measurements);
  c.seed = r.get_u64("seed", c.seed);
  const std::string tx = r.get_string("transmitters", "");
  for (const auto& item : split(tx, ';')) {
    if (trim(item).empty()) continue;
    auto parts = split(trim(item), ' ');
    std::vector<double> xy;
    for (const auto& p : parts)
      if (!trim(p).empty()) {
        auto v = parse_double(p);
        if (!v) throw ConfigError("synthetic.transmitters: bad coordinate '" + p + "'");
        xy.push_back(*v);
      }
    if (xy.size() != 2) throw ConfigError("synthetic.transmitters: expected 'x y' pairs separated by ';'");
    c.transmitters.push_back({xy[0], xy[1]});
  }
  r.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

GroundTruthMap::GroundTruthMap(const SyntheticMapConfig& config, std::vector<Location> transmitters,
                               std::vector<double> shadowing, std::size_t nx, std::size_t ny)
    : config_(config), transmitters_(std::move(transmitters)), shadowing_(std::move(shadowing)), nx_(nx), ny_(ny) {}

double GroundTruthMap::path_loss_db(Location x) const {
  auto single = [&](Location tx) {
    const double d = std::max(distance(x, tx), config_.reference_distance);
    return config_.reference_power_db - 10.0 * config_.path_loss_exponent * std::log10(d / config_.reference_distance);
  };
  if (transmitters_.size() == 1) return single(transmitters_.front());
  double linear = 0.0;
  for (const auto& tx : transmitters_) linear += std::pow(10.0, single(tx) / 10.0);
  return 10.0 * std::log10(linear);
}

double GroundTruthMap::shadowing_db(Location x) const {
  if (shadowing_.empty()) return 0.0;
  const double res = config_.grid_resolution;
  const double gx = std::clamp(x.x / res, 0.0, static_cast<double>(nx_ - 1));
  const double gy = std::clamp(x.y / res, 0.0, static_cast<double>(ny_ - 1));
  const std::size_t i0 = std::min(static_cast<std::size_t>(gx), nx_ > 1 ? nx_ - 2 : 0);
  const std::size_t j0 = std::min(static_cast<std::size_t>(gy), ny_ > 1 ? ny_ - 2 : 0);
  const std::size_t i1 = std::min(i0 + 1, nx_ - 1);
  const std::size_t j1 = std::min(j0 + 1, ny_ - 1);
  const double fx = gx - static_cast<double>(i0);
  const double fy = gy - static_cast<double>(j0);
  const double a = shadowing_node(i0, j0) * (1.0 - fx) + shadowing_node(i1, j0) * fx;
  const double b = shadowing_node(i0, j1) * (1.0 - fx) + shadowing_node(i1, j1) * fx;
  return a * (1.0 - fy) + b * fy;
}

double GroundTruthMap::operator()(Location x) const { return path_loss_db(x) + shadowing_db(x); }

SyntheticScene generate_synthetic_ms(const SyntheticMapConfig& config, const std::string& id) {
  config.validate();
  Rng rng(derive_seed(config.seed, 0x5ce9e));
  std::vector<Location> tx = config.transmitters;
  if (tx.empty()) tx.push_back({rng.uniform(0.0, config.extent_x), rng.uniform(0.0, config.extent_y)});

  const std::size_t nx = grid_count(config.extent_x, config.grid_resolution);
  const std::size_t ny = grid_count(config.extent_y, config.grid_resolution);
  Rng field_rng(derive_seed(config.seed, 0xf1e1d));
  auto field = correlated_field(nx, ny, config.grid_resolution, config.shadowing_std, config.shadowing_correlation,
                                field_rng);

  SyntheticScene scene;
  scene.truth = GroundTruthMap(config, std::move(tx), std::move(field), nx, ny);
  MeasurementSet& ms = scene.ms;
  ms.id = id;
  ms.extent_x = config.extent_x;
  ms.extent_y = config.extent_y;
  Rng noise_rng(derive_seed(config.seed, 0x0015e));
  auto measure = [&](Location l) {
    double y = scene.truth(l);
    if (config.noise_std > 0.0) y += noise_rng.normal(0.0, config.noise_std);
    ms.measurements.push_back({l, y});
  };
  if (config.measurement_spacing > 0.0) {
    ms.grid_spacing = config.measurement_spacing;
    const std::size_t mx = grid_count(config.extent_x, config.measurement_spacing);
    const std::size_t my = grid_count(config.extent_y, config.measurement_spacing);
    ms.measurements.reserve(mx * my);
    for (std::size_t j = 0; j < my; ++j)
      for (std::size_t i = 0; i < mx; ++i)
        measure({static_cast<double>(i) * config.measurement_spacing,
                 static_cast<double>(j) * config.measurement_spacing});
  } else {
    Rng loc_rng(derive_seed(config.seed, 0x10c));
    for (std::size_t k = 0; k < config.random_measurements; ++k)
      measure({loc_rng.uniform(0.0, config.extent_x), loc_rng.uniform(0.0, config.extent_y)});
  }
  return scene;
}

// ---------------------------------------------------------------------------

PatchSampler::PatchSampler(const MeasurementSet& ms) : ms_(&ms), by_x_(ms.size()) {
  std::iota(by_x_.begin(), by_x_.end(), std::size_t{0});
  std::stable_sort(by_x_.begin(), by_x_.end(), [&](std::size_t a, std::size_t b) {
    return ms.measurements[a].location.x < ms.measurements[b].location.x;
  });
}

Patch PatchSampler::extract(Location corner, double side) const {
  const auto& meas = ms_->measurements;
  auto lo = std::lower_bound(by_x_.begin(), by_x_.end(), corner.x,
                             [&](std::size_t i, double v) { return meas[i].location.x < v; });
  auto hi = std::upper_bound(by_x_.begin(), by_x_.end(), corner.x + side,
                             [&](double v, std::size_t i) { return v < meas[i].location.x; });
  Patch patch;
  patch.corner = corner;
  patch.side = side;
  for (auto it = lo; it != hi; ++it) {
    const double y = meas[*it].location.y;
    if (y >= corner.y && y <= corner.y + side) patch.indices.push_back(*it);
  }
  std::sort(patch.indices.begin(), patch.indices.end());
  patch.ms.id = ms_->id;
  patch.ms.extent_x = ms_->extent_x;
  patch.ms.extent_y = ms_->extent_y;
  patch.ms.grid_spacing = ms_->grid_spacing;
  patch.ms.measurements.reserve(patch.indices.size());
  for (std::size_t i : patch.indices) patch.ms.measurements.push_back(meas[i]);
  return patch;
}

Patch PatchSampler::sample(double side, Rng& rng, bool aligned) const {
  if (!(side > 0.0)) throw std::invalid_argument("patch side must be positive");
  if (side > std::min(ms_->extent_x, ms_->extent_y)) {
    throw std::invalid_argument("patch side " + format_double(side) + " m exceeds the measurement set extent");
  }
  Location corner;
  if (aligned && ms_->grid_spacing) {
    const double g = *ms_->grid_spacing;
    const std::size_t kx = static_cast<std::size_t>(std::floor((ms_->extent_x - side) / g + 1e-9)) + 1;
    const std::size_t ky = static_cast<std::size_t>(std::floor((ms_->extent_y - side) / g + 1e-9)) + 1;
    corner = {static_cast<double>(rng.index(kx)) * g, static_cast<double>(rng.index(ky)) * g};
  } else {
    corner = {rng.uniform(0.0, ms_->extent_x - side), rng.uniform(0.0, ms_->extent_y - side)};
  }
  return extract(corner, side);
}

MeasurementSet sample_patch(const MeasurementSet& ms, double side, Rng& rng, bool aligned) {
  return PatchSampler(ms).sample(side, rng, aligned).ms;
}

SceneDraw draw_scene(const MeasurementSet& patch, std::size_t n, Rng& rng) {
  if (patch.size() < n + 1) {
    throw std::invalid_argument("patch holds " + std::to_string(patch.size()) + " measurements, need " +
                                std::to_string(n + 1));
  }
  std::vector<std::size_t> order(patch.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span(order));
  SceneDraw draw;
  draw.target = patch.measurements[order[0]];
  draw.inputs.reserve(n);
  for (std::size_t k = 1; k <= n; ++k) draw.inputs.push_back(patch.measurements[order[k]]);
  for (std::size_t k = n + 1; k < order.size(); ++k) draw.rest.push_back(patch.measurements[order[k]]);
  return draw;
}

Example build_example(const MeasurementSet& patch, std::size_t n, Rng& rng, const FeatureConfig& config,
                      const PowerNormalization& normalization) {
  if (n == 0) throw std::invalid_argument("an example needs at least one input measurement");
  SceneDraw draw = draw_scene(patch, n, rng);
  Example ex;
  ex.features = build_features(draw.inputs, draw.target.location, config, normalization);
  ex.target_db = draw.target.power_db;
  ex.source_id = patch.id;
  ex.n = n;
  return ex;
}

// ---------------------------------------------------------------------------

void write_ms_file(const MeasurementSet& ms, const std::string& path,
                   const std::map<std::string, std::string>& header) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  out << "# id=" << ms.id << "\n";
  out << "# extent_x=" << format_double(ms.extent_x) << "\n";
  out << "# extent_y=" << format_double(ms.extent_y) << "\n";
  if (ms.grid_spacing) out << "# grid_spacing=" << format_double(*ms.grid_spacing) << "\n";
  for (const auto& [k, v] : header) out << "# " << k << "=" << v << "\n";
  out << "x_m,y_m,power_db\n";
  for (const auto& m : ms.measurements) {
    out << format_double(m.location.x) << ',' << format_double(m.location.y) << ',' << format_double(m.power_db)
        << '\n';
  }
  if (!out) throw FormatError("write failed for " + path);
}

MeasurementSet read_ms_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  MeasurementSet ms;
  ms.id = std::filesystem::path(path).stem().string();
  KeyValues meta;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  auto fail = [&](const std::string& what) {
    throw FormatError(path + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!header) {
      std::string_view t = trim(line);
      if (t.empty()) continue;
      if (t.front() == '#') {
        t.remove_prefix(1);
        const auto eq = t.find('=');
        if (eq != std::string_view::npos) meta[std::string(trim(t.substr(0, eq)))] = std::string(trim(t.substr(eq + 1)));
        continue;
      }
      if (t != "x_m,y_m,power_db") fail("expected header 'x_m,y_m,power_db'");
      header = true;
      continue;
    }
    if (trim(line).empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() != 3) fail("expected 3 fields, got " + std::to_string(fields.size()));
    auto x = parse_double(fields[0]);
    auto y = parse_double(fields[1]);
    auto p = parse_double(fields[2]);
    if (!x) fail("x_m is not a number: '" + fields[0] + "'");
    if (!y) fail("y_m is not a number: '" + fields[1] + "'");
    if (!p) fail("power_db is not a number: '" + fields[2] + "'");
    ms.measurements.push_back({{*x, *y}, *p});
  }
  if (!header) throw FormatError(path + ": missing header 'x_m,y_m,power_db'");
  if (meta.count("id")) ms.id = meta["id"];
  if (meta.count("extent_x") && meta.count("extent_y")) {
    ms.extent_x = require(meta, "extent_x");
    ms.extent_y = require(meta, "extent_y");
  } else {
    for (const auto& m : ms.measurements) {
      ms.extent_x = std::max(ms.extent_x, m.location.x);
      ms.extent_y = std::max(ms.extent_y, m.location.y);
    }
  }
  if (meta.count("grid_spacing")) ms.grid_spacing = require(meta, "grid_spacing");
  ms.validate();
  return ms;
}

PowerNormalization estimate_normalization(std::span<const MeasurementSet> sets) {
  double sum = 0.0, sum_sq = 0.0;
  std::size_t count = 0;
  for (const auto& ms : sets)
    for (const auto& m : ms.measurements) {
      sum += m.power_db;
      ++count;
    }
  if (count == 0) throw std::invalid_argument("no measurements to estimate normalization from");
  const double mean = sum / static_cast<double>(count);
  for (const auto& ms : sets)
    for (const auto& m : ms.measurements) sum_sq += (m.power_db - mean) * (m.power_db - mean);
  const double stddev = std::sqrt(sum_sq / static_cast<double>(count));
  return {mean, stddev > 0.0 ? stddev : 1.0};
}

}  // namespace storm
