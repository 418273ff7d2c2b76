#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "storm/model.hpp"
#include "storm/train.hpp"

namespace storm {

/// Candidate locations and their geometric encoding C (no powers), built in
/// the rotation frame of the real measurements.
struct CandidateSet {
  std::vector<Location> locations;
  Tensor encoded;  // geometric_dim x Q

  std::size_t size() const { return locations.size(); }
};

CandidateSet make_candidate_set(std::span<const Location> locations, const RotationFrame& frame, Location target,
                                const FeatureConfig& config);

/// Estimates in dB (N per-prefix values, then Q candidate estimates) and the
/// quality scores of the candidates.
struct ActiveOutput {
  std::vector<double> estimates;
  std::vector<double> scores;
};

/// Training-time scene: N measurements plus Q measured candidates, all in the
/// frame of the N measurements.
struct ActiveExample {
  FeatureMatrix features;  // N + Q columns
  Tensor candidates;       // geometric_dim x Q
  std::size_t n = 0;
  double target_db = 0.0;
};

// Graph builders (normalized units). Features may hold more than N columns;
// every block runs under the modified-causal mask for N.
Var encode_measurements(Context& ctx, const StormModel& model, Var features, std::size_t n);
Var decode_estimates(Context& ctx, const StormModel& model, Var latent, std::size_t n);
/// Softmax quality scores as a Q x 1 column. Only the first N latent columns
/// are read, so candidate powers never reach the scores.
Var score_candidates(Context& ctx, const StormModel& model, Var latent, Var candidates, std::size_t n);

/// One example's share of the combined-estimate loss:
/// (1/T) [ (1/(2N)) sum_n (y - f_n)^2 + (1/2) (y - sum_l g_l f_{N+l})^2 ].
Var active_loss_term(Context& ctx, const StormModel& model, const ActiveExample& example, std::size_t batch_size);
Var loss_active_graph(Context& ctx, const StormModel& model, std::span<const ActiveExample> batch);
double loss_active(const StormModel& model, std::span<const ActiveExample> batch);

ActiveExample build_active_example(std::span<const Measurement> measurements,
                                   std::span<const Measurement> candidates, Location target, double target_db,
                                   const StormModel& model);
/// Full training-time forward with measured candidates.
ActiveOutput active_forward(const StormModel& model, const ActiveExample& example);

/// Quality scores for candidate locations given only the measurements.
std::vector<double> quality_scores(const StormModel& model, std::span<const Measurement> measurements,
                                   std::span<const Location> candidates, Location target);
/// Index of the highest score; the lowest index wins ties.
std::size_t argmax_first(std::span<const double> values);
std::size_t select_next(const StormModel& model, std::span<const Measurement> measurements,
                        std::span<const Location> candidates, Location target);
/// Estimate after adding one measurement, in the frame of the original
/// measurements (the candidate estimate for that measurement).
double refined_estimate(const StormModel& model, std::span<const Measurement> measurements,
                        const Measurement& added, Location target);

struct ActiveSamplingConfig {
  double patch_side = 64.0;
  bool aligned = true;
  std::size_t n_min = 10;
  std::size_t n_max = 40;
  /// Candidates per training scene (a random subset of the rest of the patch).
  std::size_t candidates = 32;

  void validate() const;
};

/// Minibatches for the combined-estimate loss; N is shared within a batch.
BatchFn make_active_batches(std::span<const MeasurementSet> sets, const ActiveSamplingConfig& sampling,
                            const StormModel& model, std::size_t batch_size);

}  // namespace storm
