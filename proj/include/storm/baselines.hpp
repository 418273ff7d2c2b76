#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "storm/data.hpp"

namespace storm {

class StormModel;

/// Observed measurements plus the locations to predict, from one patch.
struct EstimationTask {
  std::string source_id;
  std::span<const Measurement> observed;
  std::span<const Location> queries;
};

/// A training scene for hyperparameter search.
struct TuningScene {
  std::string source_id;
  std::vector<Measurement> observed;
  std::vector<Measurement> held_out;
};

/// Gridless estimator: fits to the observed measurements of a task and
/// predicts at arbitrary query coordinates. estimate() is safe to call
/// concurrently once tuning is done.
class Estimator {
 public:
  virtual ~Estimator() = default;
  virtual std::string name() const = 0;
  virtual std::vector<double> estimate(const EstimationTask& task) const = 0;
  /// Hyperparameter search on training scenes, per observed-set size.
  virtual void tune(std::span<const TuningScene> scenes) { (void)scenes; }
  /// Human-readable hyperparameters, one entry per tuned N.
  virtual std::map<std::string, std::string> describe() const { return {}; }
};

/// Draws `per_n` scenes for each N from the training sets, keeping at most
/// `max_held_out` held-out measurements per scene.
std::vector<TuningScene> make_tuning_scenes(std::span<const MeasurementSet> sets, std::span<const std::size_t> n_values,
                                            std::size_t per_n, double patch_side, std::size_t max_held_out,
                                            std::uint64_t seed);

// ---- K nearest neighbors

double knn_estimate(std::span<const Measurement> measurements, Location x, std::size_t k);

class KnnEstimator : public Estimator {
 public:
  explicit KnnEstimator(std::size_t k = 5, std::vector<std::size_t> grid = {1, 2, 3, 4, 5, 6, 8, 10, 12, 16, 20});
  std::string name() const override { return "knn"; }
  std::vector<double> estimate(const EstimationTask& task) const override;
  void tune(std::span<const TuningScene> scenes) override;
  std::map<std::string, std::string> describe() const override;
  std::size_t k_for(std::size_t n) const;

 private:
  std::size_t default_k_;
  std::vector<std::size_t> grid_;
  std::map<std::size_t, std::size_t> tuned_;
};

// ---- Kernel ridge regression

struct KrrParams {
  double width = 16.0;  // Gaussian kernel length (meters)
  double ridge = 0.1;
  /// Regress on powers minus their mean and add it back.
  bool center = true;

  void validate() const;
};

/// Fitted dual coefficients for one observed set.
class KrrModel {
 public:
  KrrModel(std::span<const Measurement> measurements, const KrrParams& params);
  double operator()(Location x) const;

 private:
  std::vector<Measurement> measurements_;
  KrrParams params_;
  double offset_ = 0.0;
  std::vector<double> alpha_;
};

double krr_estimate(std::span<const Measurement> measurements, Location x, const KrrParams& params);

class KrrEstimator : public Estimator {
 public:
  explicit KrrEstimator(KrrParams params = {}, std::vector<double> widths = {4, 8, 12, 16, 24, 32, 48, 64},
                        std::vector<double> ridges = {1e-3, 1e-2, 0.03, 0.1, 0.3, 1.0});
  std::string name() const override { return "krr"; }
  std::vector<double> estimate(const EstimationTask& task) const override;
  void tune(std::span<const TuningScene> scenes) override;
  std::map<std::string, std::string> describe() const override;
  const KrrParams& params_for(std::size_t n) const;

 private:
  KrrParams default_;
  std::vector<double> widths_, ridges_;
  std::map<std::size_t, KrrParams> tuned_;
};

// ---- Ordinary kriging

/// Exponential variogram gamma(h) = nugget + sill (1 - exp(-h / range)) for
/// h > 0; `sill` is the partial sill.
struct KrigingParams {
  double nugget = 1.0;
  double sill = 36.0;
  double range = 30.0;

  void validate() const;
  double variogram(double h) const;
  /// Covariance of the noise-free field at lag h.
  double covariance(double h) const;
};

struct KrigingPrediction {
  double value = 0.0;
  double variance = 0.0;
  std::vector<double> weights;
};

/// Factored ordinary-kriging system for one observed set.
class KrigingModel {
 public:
  KrigingModel(std::span<const Measurement> measurements, const KrigingParams& params);
  KrigingPrediction predict(Location x) const;
  std::vector<double> predict_values(std::span<const Location> xs) const;
  /// Diagonal loading that was needed to factor the system (0 if none).
  double regularization() const { return regularization_; }

 private:
  struct Impl;
  std::shared_ptr<const Impl> impl_;
  double regularization_ = 0.0;
};

KrigingPrediction kriging_estimate(std::span<const Measurement> measurements, Location x,
                                   const KrigingParams& params);

/// Binned semivariogram: gamma_b = mean of (y_i - y_j)^2 / 2 over pairs whose
/// distance falls into bin b.
struct EmpiricalVariogram {
  std::vector<double> lag;    // mean pair distance per bin
  std::vector<double> gamma;  // semivariance per bin
  std::vector<double> pairs;  // pair count per bin
};

/// Pairs are formed within each group only. `max_lag` <= 0 uses half the
/// largest pair distance.
EmpiricalVariogram empirical_variogram(std::span<const std::vector<Measurement>> groups, std::size_t bins,
                                       double max_lag = 0.0);
/// Least-squares exponential fit (pair-count weights): a log-spaced range
/// search with the nonnegative (nugget, sill) solved exactly for each range.
KrigingParams fit_variogram(const EmpiricalVariogram& empirical);
KrigingParams fit_variogram(std::span<const Measurement> measurements, std::size_t bins = 15);

class KrigingEstimator : public Estimator {
 public:
  explicit KrigingEstimator(KrigingParams params = {});
  std::string name() const override { return "kriging"; }
  std::vector<double> estimate(const EstimationTask& task) const override;
  /// Fits a pooled variogram, then refines range and nugget per N.
  void tune(std::span<const TuningScene> scenes) override;
  std::map<std::string, std::string> describe() const override;
  const KrigingParams& params_for(std::size_t n) const;

 private:
  KrigingParams default_;
  std::map<std::size_t, KrigingParams> tuned_;
};

// ---- Reference estimators

/// Returns the noise-free ground-truth map value at each query.
class OracleEstimator : public Estimator {
 public:
  using TruthFn = std::function<double(const std::string& source_id, Location x)>;
  explicit OracleEstimator(TruthFn truth) : truth_(std::move(truth)) {}
  std::string name() const override { return "oracle"; }
  std::vector<double> estimate(const EstimationTask& task) const override;

 private:
  TruthFn truth_;
};

class StormEstimator : public Estimator {
 public:
  explicit StormEstimator(const StormModel& model, std::string name = "storm") : model_(&model), name_(std::move(name)) {}
  std::string name() const override { return name_; }
  std::vector<double> estimate(const EstimationTask& task) const override;

 private:
  const StormModel* model_;
  std::string name_;
};

/// Mean squared error of an estimator on held-out measurements.
double validation_mse(const Estimator& estimator, std::span<const TuningScene> scenes);

}  // namespace storm
