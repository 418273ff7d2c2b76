#include "storm/baselines.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "storm/config.hpp"
#include "storm/errors.hpp"
#include "storm/model.hpp"
#include "storm/random.hpp"
#include "storm/train.hpp"

namespace storm {

namespace {

template <typename Map>
const typename Map::mapped_type* nearest_entry(const Map& tuned, std::size_t n) {
  if (tuned.empty()) return nullptr;
  auto hi = tuned.lower_bound(n);
  if (hi == tuned.end()) return &std::prev(hi)->second;
  if (hi == tuned.begin() || hi->first == n) return &hi->second;
  auto lo = std::prev(hi);
  return (n - lo->first <= hi->first - n) ? &lo->second : &hi->second;
}

std::map<std::size_t, std::vector<const TuningScene*>> group_by_n(std::span<const TuningScene> scenes) {
  std::map<std::size_t, std::vector<const TuningScene*>> groups;
  for (const auto& s : scenes) groups[s.observed.size()].push_back(&s);
  return groups;
}

std::vector<Location> held_out_locations(const TuningScene& s) {
  std::vector<Location> xs;
  xs.reserve(s.held_out.size());
  for (const auto& m : s.held_out) xs.push_back(m.location);
  return xs;
}

template <typename Predict>
double group_mse(const std::vector<const TuningScene*>& group, Predict&& predict) {
  double sq = 0.0;
  std::size_t count = 0;
  for (const TuningScene* s : group) {
    const std::vector<double> est = predict(*s);
    for (std::size_t i = 0; i < est.size(); ++i) {
      const double e = est[i] - s->held_out[i].power_db;
      sq += e * e;
    }
    count += est.size();
  }
  return count ? sq / static_cast<double>(count) : 0.0;
}

}  // namespace

std::vector<TuningScene> make_tuning_scenes(std::span<const MeasurementSet> sets, std::span<const std::size_t> n_values,
                                            std::size_t per_n, double patch_side, std::size_t max_held_out,
                                            std::uint64_t seed) {
  SceneSampler sampler(sets);
  std::vector<TuningScene> scenes;
  for (std::size_t n : n_values) {
    for (std::size_t i = 0; i < per_n; ++i) {
      Rng rng(derive_seed(seed, 0x7a4e, n, i));
      MeasurementSet patch = sampler.patch(patch_side, true, n + 1, rng);
      std::vector<std::size_t> order(patch.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      rng.shuffle(std::span<std::size_t>(order));
      TuningScene scene;
      scene.source_id = patch.id;
      for (std::size_t j = 0; j < n; ++j) scene.observed.push_back(patch.measurements[order[j]]);
      for (std::size_t j = n; j < order.size() && scene.held_out.size() < max_held_out; ++j) {
        scene.held_out.push_back(patch.measurements[order[j]]);
      }
      scenes.push_back(std::move(scene));
    }
  }
  return scenes;
}

// ---- KNN

double knn_estimate(std::span<const Measurement> measurements, Location x, std::size_t k) {
  if (measurements.empty()) throw ContractError("KNN needs at least one measurement");
  if (k == 0 || k > measurements.size()) {
    throw ContractError("KNN needs 1 <= k <= N (k=" + std::to_string(k) + ", N=" +
                        std::to_string(measurements.size()) + ")");
  }
  std::vector<std::pair<double, std::size_t>> order;
  order.reserve(measurements.size());
  for (std::size_t i = 0; i < measurements.size(); ++i) order.emplace_back(distance(measurements[i].location, x), i);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
  double exact_sum = 0.0;
  std::size_t exact = 0;
  for (std::size_t j = 0; j < k && order[j].first == 0.0; ++j, ++exact) exact_sum += measurements[order[j].second].power_db;
  if (exact > 0) return exact_sum / static_cast<double>(exact);
  double num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    const double w = 1.0 / order[j].first;
    num += w * measurements[order[j].second].power_db;
    den += w;
  }
  return num / den;
}

KnnEstimator::KnnEstimator(std::size_t k, std::vector<std::size_t> grid) : default_k_(k), grid_(std::move(grid)) {
  if (k == 0) throw ConfigError("knn k must be positive");
}

std::size_t KnnEstimator::k_for(std::size_t n) const {
  const std::size_t* t = nearest_entry(tuned_, n);
  return std::min(t ? *t : default_k_, n);
}

std::vector<double> KnnEstimator::estimate(const EstimationTask& task) const {
  const std::size_t k = k_for(task.observed.size());
  std::vector<double> out;
  out.reserve(task.queries.size());
  for (Location q : task.queries) out.push_back(knn_estimate(task.observed, q, k));
  return out;
}

void KnnEstimator::tune(std::span<const TuningScene> scenes) {
  for (const auto& [n, group] : group_by_n(scenes)) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k : grid_) {
      if (k > n) continue;
      const double mse = group_mse(group, [&](const TuningScene& s) {
        std::vector<double> est;
        for (const auto& m : s.held_out) est.push_back(knn_estimate(s.observed, m.location, k));
        return est;
      });
      if (mse < best) {
        best = mse;
        tuned_[n] = k;
      }
    }
  }
}

std::map<std::string, std::string> KnnEstimator::describe() const {
  std::map<std::string, std::string> out;
  for (const auto& [n, k] : tuned_) out["knn.k@" + std::to_string(n)] = std::to_string(k);
  return out;
}

// ---- KRR

void KrrParams::validate() const {
  if (!(width > 0.0)) throw ConfigError("KRR kernel width must be positive");
  if (!(ridge > 0.0)) throw ConfigError("KRR ridge must be positive");
}

namespace {
double gaussian_kernel(Location a, Location b, double width) {
  const double dx = a.x - b.x, dy = a.y - b.y;
  return std::exp(-(dx * dx + dy * dy) / (2.0 * width * width));
}
}  // namespace

KrrModel::KrrModel(std::span<const Measurement> measurements, const KrrParams& params)
    : measurements_(measurements.begin(), measurements.end()), params_(params) {
  params.validate();
  const std::size_t n = measurements.size();
  if (n == 0) throw ContractError("KRR needs at least one measurement");
  if (params.center) {
    for (const auto& m : measurements) offset_ += m.power_db;
    offset_ /= static_cast<double>(n);
  }
  Eigen::MatrixXd k(n, n);
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y(i) = measurements[i].power_db - offset_;
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = gaussian_kernel(measurements[i].location, measurements[j].location, params.width);
      k(i, j) = v;
      k(j, i) = v;
    }
    k(i, i) += params.ridge;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  if (llt.info() != Eigen::Success) throw NumericalError("KRR system is not positive definite");
  Eigen::VectorXd a = llt.solve(y);
  alpha_.assign(a.data(), a.data() + n);
}

double KrrModel::operator()(Location x) const {
  double s = offset_;
  for (std::size_t i = 0; i < measurements_.size(); ++i) {
    s += alpha_[i] * gaussian_kernel(x, measurements_[i].location, params_.width);
  }
  return s;
}

double krr_estimate(std::span<const Measurement> measurements, Location x, const KrrParams& params) {
  return KrrModel(measurements, params)(x);
}

KrrEstimator::KrrEstimator(KrrParams params, std::vector<double> widths, std::vector<double> ridges)
    : default_(params), widths_(std::move(widths)), ridges_(std::move(ridges)) {
  params.validate();
}

const KrrParams& KrrEstimator::params_for(std::size_t n) const {
  const KrrParams* t = nearest_entry(tuned_, n);
  return t ? *t : default_;
}

std::vector<double> KrrEstimator::estimate(const EstimationTask& task) const {
  KrrModel model(task.observed, params_for(task.observed.size()));
  std::vector<double> out;
  out.reserve(task.queries.size());
  for (Location q : task.queries) out.push_back(model(q));
  return out;
}

void KrrEstimator::tune(std::span<const TuningScene> scenes) {
  for (const auto& [n, group] : group_by_n(scenes)) {
    double best = std::numeric_limits<double>::infinity();
    for (double w : widths_) {
      for (double r : ridges_) {
        KrrParams p = default_;
        p.width = w;
        p.ridge = r;
        const double mse = group_mse(group, [&](const TuningScene& s) {
          KrrModel model(s.observed, p);
          std::vector<double> est;
          for (const auto& m : s.held_out) est.push_back(model(m.location));
          return est;
        });
        if (mse < best) {
          best = mse;
          tuned_[n] = p;
        }
      }
    }
  }
}

std::map<std::string, std::string> KrrEstimator::describe() const {
  std::map<std::string, std::string> out;
  for (const auto& [n, p] : tuned_) {
    out["krr.width@" + std::to_string(n)] = format_double(p.width);
    out["krr.ridge@" + std::to_string(n)] = format_double(p.ridge);
  }
  return out;
}

// ---- Kriging

void KrigingParams::validate() const {
  if (!(nugget >= 0.0)) throw ConfigError("kriging nugget must be non-negative");
  if (!(sill > 0.0)) throw ConfigError("kriging sill must be positive");
  if (!(range > 0.0)) throw ConfigError("kriging range must be positive");
}

double KrigingParams::variogram(double h) const {
  return h > 0.0 ? nugget + sill * (1.0 - std::exp(-h / range)) : 0.0;
}

double KrigingParams::covariance(double h) const { return sill * std::exp(-h / range); }

struct KrigingModel::Impl {
  std::vector<Measurement> measurements;
  KrigingParams params;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu;
};

KrigingModel::KrigingModel(std::span<const Measurement> measurements, const KrigingParams& params) {
  params.validate();
  const std::size_t n = measurements.size();
  if (n < 2) throw ContractError("ordinary kriging needs at least two measurements");
  auto impl = std::make_shared<Impl>();
  impl->measurements.assign(measurements.begin(), measurements.end());
  impl->params = params;
  Eigen::MatrixXd a(n + 1, n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const double c = params.covariance(distance(measurements[i].location, measurements[j].location));
      a(i, j) = c;
      a(j, i) = c;
    }
    a(i, i) += params.nugget;
    a(i, n) = 1.0;
    a(n, i) = 1.0;
  }
  a(n, n) = 0.0;
  constexpr double kMinRcond = 1e-13;
  const double scale = params.sill + params.nugget;
  double load = 0.0;
  for (int attempt = 0; attempt < 4; ++attempt) {
    Eigen::MatrixXd loaded = a;
    for (std::size_t i = 0; i < n; ++i) loaded(i, i) += load;
    impl->lu.compute(loaded);
    if (impl->lu.rcond() >= kMinRcond) {
      regularization_ = load;
      impl_ = std::move(impl);
      return;
    }
    load = load == 0.0 ? 1e-10 * scale : load * 1e3;
  }
  throw NumericalError("kriging system is singular even after diagonal loading");
}

KrigingPrediction KrigingModel::predict(Location x) const {
  const auto& m = impl_->measurements;
  const std::size_t n = m.size();
  Eigen::VectorXd rhs(n + 1);
  for (std::size_t i = 0; i < n; ++i) rhs(i) = impl_->params.covariance(distance(m[i].location, x));
  rhs(n) = 1.0;
  const Eigen::VectorXd sol = impl_->lu.solve(rhs);
  KrigingPrediction p;
  p.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    p.weights[i] = sol(i);
    p.value += sol(i) * m[i].power_db;
  }
  p.variance = std::max(0.0, impl_->params.sill - sol.head(n).dot(rhs.head(n)) - sol(n));
  return p;
}

std::vector<double> KrigingModel::predict_values(std::span<const Location> xs) const {
  const auto& m = impl_->measurements;
  const std::size_t n = m.size();
  Eigen::MatrixXd rhs(n + 1, xs.size());
  for (std::size_t q = 0; q < xs.size(); ++q) {
    for (std::size_t i = 0; i < n; ++i) rhs(i, q) = impl_->params.covariance(distance(m[i].location, xs[q]));
    rhs(n, q) = 1.0;
  }
  const Eigen::MatrixXd sol = impl_->lu.solve(rhs);
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) y(i) = m[i].power_db;
  const Eigen::VectorXd values = sol.topRows(n).transpose() * y;
  return {values.data(), values.data() + values.size()};
}

KrigingPrediction kriging_estimate(std::span<const Measurement> measurements, Location x,
                                   const KrigingParams& params) {
  return KrigingModel(measurements, params).predict(x);
}

EmpiricalVariogram empirical_variogram(std::span<const std::vector<Measurement>> groups, std::size_t bins,
                                       double max_lag) {
  if (bins == 0) throw ContractError("variogram needs at least one bin");
  if (max_lag <= 0.0) {
    double longest = 0.0;
    for (const auto& g : groups)
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = 0; j < i; ++j) longest = std::max(longest, distance(g[i].location, g[j].location));
    max_lag = 0.5 * longest;
  }
  if (!(max_lag > 0.0)) throw ContractError("variogram needs measurement pairs at distinct locations");
  const double width = max_lag / static_cast<double>(bins);
  std::vector<double> lag_sum(bins, 0.0), gamma_sum(bins, 0.0), count(bins, 0.0);
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        const double h = distance(g[i].location, g[j].location);
        if (h <= 0.0 || h > max_lag) continue;
        const std::size_t b = std::min(bins - 1, static_cast<std::size_t>(h / width));
        const double d = g[i].power_db - g[j].power_db;
        lag_sum[b] += h;
        gamma_sum[b] += 0.5 * d * d;
        count[b] += 1.0;
      }
    }
  }
  EmpiricalVariogram ev;
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0.0) continue;
    ev.lag.push_back(lag_sum[b] / count[b]);
    ev.gamma.push_back(gamma_sum[b] / count[b]);
    ev.pairs.push_back(count[b]);
  }
  if (ev.lag.empty()) throw ContractError("variogram needs measurement pairs at distinct locations");
  return ev;
}

namespace {

struct VariogramFit {
  double nugget = 0.0, sill = 0.0, sse = std::numeric_limits<double>::infinity();
};

// Nonnegative weighted least squares for gamma ~ nugget + sill * b(h).
VariogramFit fit_linear_part(const EmpiricalVariogram& ev, double range) {
  double sw = 0, sb = 0, sbb = 0, sg = 0, sbg = 0;
  std::vector<double> basis(ev.lag.size());
  for (std::size_t i = 0; i < ev.lag.size(); ++i) {
    const double w = ev.pairs[i], b = 1.0 - std::exp(-ev.lag[i] / range), g = ev.gamma[i];
    basis[i] = b;
    sw += w;
    sb += w * b;
    sbb += w * b * b;
    sg += w * g;
    sbg += w * b * g;
  }
  auto sse = [&](double c0, double c1) {
    double s = 0;
    for (std::size_t i = 0; i < ev.lag.size(); ++i) {
      const double r = ev.gamma[i] - c0 - c1 * basis[i];
      s += ev.pairs[i] * r * r;
    }
    return s;
  };
  VariogramFit best;
  auto consider = [&](double c0, double c1) {
    if (c0 < 0.0 || c1 < 0.0) return;
    const double s = sse(c0, c1);
    if (s < best.sse) best = {c0, c1, s};
  };
  const double det = sw * sbb - sb * sb;
  if (det > 1e-12 * sw * sbb) consider((sbb * sg - sb * sbg) / det, (sw * sbg - sb * sg) / det);
  consider(0.0, sbb > 0.0 ? std::max(0.0, sbg / sbb) : 0.0);
  consider(std::max(0.0, sg / sw), 0.0);
  return best;
}

}  // namespace

KrigingParams fit_variogram(const EmpiricalVariogram& ev) {
  if (ev.lag.empty()) throw ContractError("empty empirical variogram");
  const double max_lag = *std::max_element(ev.lag.begin(), ev.lag.end());
  constexpr int kGrid = 141;
  const double lo = std::log(max_lag * 1e-2), hi = std::log(max_lag * 30.0);
  auto at = [&](int i) { return lo + (hi - lo) * i / (kGrid - 1); };
  int best_i = 0;
  double best_sse = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kGrid; ++i) {
    const double s = fit_linear_part(ev, std::exp(at(i))).sse;
    if (s < best_sse) {
      best_sse = s;
      best_i = i;
    }
  }
  // Golden-section refinement of log(range) around the best grid point.
  double a = at(std::max(0, best_i - 1)), b = at(std::min(kGrid - 1, best_i + 1));
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  auto f = [&](double t) { return fit_linear_part(ev, std::exp(t)).sse; };
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = f(c), fd = f(d);
  for (int it = 0; it < 60; ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = f(d);
    }
  }
  double t = 0.5 * (a + b);
  if (f(t) > best_sse) t = at(best_i);
  const VariogramFit fit = fit_linear_part(ev, std::exp(t));
  KrigingParams p;
  p.range = std::exp(t);
  p.nugget = fit.nugget;
  p.sill = std::max(fit.sill, 1e-12);
  return p;
}

KrigingParams fit_variogram(std::span<const Measurement> measurements, std::size_t bins) {
  std::vector<std::vector<Measurement>> groups{{measurements.begin(), measurements.end()}};
  return fit_variogram(empirical_variogram(groups, bins));
}

KrigingEstimator::KrigingEstimator(KrigingParams params) : default_(params) { params.validate(); }

const KrigingParams& KrigingEstimator::params_for(std::size_t n) const {
  const KrigingParams* t = nearest_entry(tuned_, n);
  return t ? *t : default_;
}

std::vector<double> KrigingEstimator::estimate(const EstimationTask& task) const {
  return KrigingModel(task.observed, params_for(task.observed.size())).predict_values(task.queries);
}

void KrigingEstimator::tune(std::span<const TuningScene> scenes) {
  if (scenes.empty()) return;
  std::vector<std::vector<Measurement>> groups;
  for (const auto& s : scenes) {
    std::vector<Measurement> all = s.observed;
    all.insert(all.end(), s.held_out.begin(), s.held_out.end());
    groups.push_back(std::move(all));
  }
  const KrigingParams base = fit_variogram(empirical_variogram(groups, 15));
  default_ = base;
  const double total = base.sill + base.nugget;
  for (const auto& [n, group] : group_by_n(scenes)) {
    if (n < 2) continue;
    double best = std::numeric_limits<double>::infinity();
    for (double range_scale : {0.5, 0.75, 1.0, 1.5, 2.0, 3.0}) {
      for (double nugget_share : {0.0, 0.02, 0.05, 0.1, 0.2, 0.4}) {
        KrigingParams p;
        p.range = base.range * range_scale;
        p.nugget = nugget_share * total;
        p.sill = total - p.nugget;
        const double mse = group_mse(group, [&](const TuningScene& s) {
          return KrigingModel(s.observed, p).predict_values(held_out_locations(s));
        });
        if (mse < best) {
          best = mse;
          tuned_[n] = p;
        }
      }
    }
  }
}

std::map<std::string, std::string> KrigingEstimator::describe() const {
  std::map<std::string, std::string> out{{"kriging.fitted.nugget", format_double(default_.nugget)},
                                         {"kriging.fitted.sill", format_double(default_.sill)},
                                         {"kriging.fitted.range", format_double(default_.range)}};
  for (const auto& [n, p] : tuned_) {
    out["kriging.nugget@" + std::to_string(n)] = format_double(p.nugget);
    out["kriging.sill@" + std::to_string(n)] = format_double(p.sill);
    out["kriging.range@" + std::to_string(n)] = format_double(p.range);
  }
  return out;
}

std::vector<double> OracleEstimator::estimate(const EstimationTask& task) const {
  std::vector<double> out;
  out.reserve(task.queries.size());
  for (Location q : task.queries) out.push_back(truth_(task.source_id, q));
  return out;
}

std::vector<double> StormEstimator::estimate(const EstimationTask& task) const {
  std::vector<double> out;
  out.reserve(task.queries.size());
  for (Location q : task.queries) out.push_back(storm::estimate(*model_, task.observed, q));
  return out;
}

double validation_mse(const Estimator& estimator, std::span<const TuningScene> scenes) {
  double sq = 0.0;
  std::size_t count = 0;
  for (const auto& s : scenes) {
    const std::vector<Location> xs = held_out_locations(s);
    const std::vector<double> est = estimator.estimate({s.source_id, s.observed, xs});
    for (std::size_t i = 0; i < est.size(); ++i) {
      const double e = est[i] - s.held_out[i].power_db;
      sq += e * e;
    }
    count += est.size();
  }
  if (count == 0) throw ContractError("validation over no held-out measurements");
  return sq / static_cast<double>(count);
}

}  // namespace storm
