#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "storm/baselines.hpp"
#include "storm/train.hpp"

namespace storm {

/// Root of the mean squared difference.
double rmse(std::span<const double> truth, std::span<const double> estimates);

struct EvalConfig {
  std::vector<std::string> estimators{"storm", "knn", "krr", "kriging"};
  std::vector<std::size_t> n_values{20, 50, 100};
  std::size_t iterations = 100;
  double patch_side = 64.0;
  bool aligned = true;
  std::uint64_t seed = 7;
  std::size_t workers = 1;
  /// Baseline tuning: scenes per N drawn from the training sets.
  std::size_t tuning_scenes = 40;
  std::size_t tuning_held_out = 60;

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static EvalConfig from_map(const std::map<std::string, std::string>& values);
};

struct EvalRow {
  std::string estimator;
  std::size_t n = 0;
  double rmse_db = 0.0;
  double stderr_db = 0.0;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  /// Mean squared error of every Monte-Carlo iteration, in draw order.
  std::vector<double> iteration_mse;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::map<std::string, std::string> metadata;

  const EvalRow& row(const std::string& estimator, std::size_t n) const;
};

/// RMSE over iterations, sqrt(mean of per-iteration MSE), and its delta-method
/// standard error.
void summarize(EvalRow& row);

/// One Monte-Carlo draw: a patch split into observed and unobserved parts.
struct SplitDraw {
  std::string source_id;
  std::vector<Measurement> patch;
  std::vector<std::size_t> observed;
  std::vector<std::size_t> unobserved;
};

SplitDraw draw_split(const SceneSampler& sampler, std::size_t n, double patch_side, bool aligned, Rng& rng);
/// Hash of everything an estimator sees in one task.
std::uint64_t task_hash(const EstimationTask& task, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// Every estimator receives the identical sequence of (patch, split) draws;
/// the sequence hash per estimator is checked and stored as
/// metadata["fairness_hash"].
EvalReport run_rmse_sweep(const EvalConfig& config, std::span<const MeasurementSet> test_sets,
                          std::span<const Estimator* const> estimators);

struct ActiveEvalConfig {
  std::vector<std::size_t> n_values{10, 20, 40};
  std::size_t iterations = 500;
  double patch_side = 64.0;
  bool aligned = true;
  std::uint64_t seed = 11;
  std::size_t workers = 1;

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static ActiveEvalConfig from_map(const std::map<std::string, std::string>& values);
};

struct ActiveComparison {
  std::size_t n = 0;
  double selected_rmse = 0.0;
  double random_rmse = 0.0;
  /// Mean and standard error of the paired difference of squared errors
  /// (random minus selected).
  double difference = 0.0;
  double difference_stderr = 0.0;
  std::size_t iterations = 0;
  double mean_candidates = 0.0;
};

struct ActiveReport {
  EvalReport rmse;  // rows "selected", "random", "unrefined"
  std::vector<ActiveComparison> comparisons;
};

/// Per scene: N observed, one evaluation location, and the rest of the patch
/// as candidates; the estimate is refined once with the selected and with a
/// uniformly drawn candidate.
ActiveReport run_active_comparison(const ActiveEvalConfig& config, const StormModel& model,
                                   std::span<const MeasurementSet> test_sets);

/// Table `estimator,n,rmse_db,stderr_db,iterations` preceded by `# key=value`
/// lines for `header`.
std::string report_csv(const EvalReport& report, const std::map<std::string, std::string>& header);
std::string active_csv(const ActiveReport& report, const std::map<std::string, std::string>& header);
std::string report_json(const EvalReport& report, const std::map<std::string, std::string>& header);

}  // namespace storm
