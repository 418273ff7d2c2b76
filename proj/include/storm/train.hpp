#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "storm/model.hpp"

namespace storm {

struct TrainingConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  /// Global gradient-norm clip; 0 disables clipping.
  double gradient_clip = 1.0;
  std::size_t warmup_steps = 0;
  bool cosine_decay = true;
  std::uint64_t seed = 1;
  LossVariant loss = LossVariant::Causal;
  std::size_t workers = 1;

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  /// Keys not present keep the values of `base`.
  static TrainingConfig from_map(const std::map<std::string, std::string>& values);
  static TrainingConfig from_map(const std::map<std::string, std::string>& values, const std::string& section,
                              TrainingConfig base);
};

/// A minibatch as independent loss terms; their sum is the batch loss.
struct Batch {
  std::size_t size = 0;
  std::function<Var(Context&, std::size_t)> term;
};

using BatchFn = std::function<Batch(std::size_t step, Rng& rng)>;
using ProgressFn = std::function<void(std::size_t step, double loss)>;

struct TrainingResult {
  std::vector<double> loss_trace;
  std::vector<double> gradient_norms;
};

class AdamOptimizer {
 public:
  AdamOptimizer(const ParameterStore& store, double beta1, double beta2, double epsilon);
  void step(ParameterStore& store, const Gradients& grads, double learning_rate);
  std::size_t steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, epsilon_;
  std::size_t t_ = 0;
  Gradients m_, v_;
};

/// Scales gradients in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
double clip_gradients(Gradients& grads, double max_norm);
double learning_rate_at(const TrainingConfig& config, std::size_t step);

/// Adam on an arbitrary parameter store. Deterministic for a given seed and
/// independent of the worker count: per-term gradients are summed in term
/// order. Throws DivergenceError on a non-finite loss.
TrainingResult optimize(ParameterStore& store, const BatchFn& batches, const TrainingConfig& config,
                        double dropout = 0.0, const ProgressFn& progress = {});

TrainingResult train(StormModel& model, const BatchFn& batches, const TrainingConfig& config,
                     const ProgressFn& progress = {});

/// How training scenes are cut out of measurement sets.
struct SamplingConfig {
  double patch_side = 64.0;
  bool aligned = true;
  std::size_t n_min = 20;
  std::size_t n_max = 100;

  void validate() const;
};

/// Draws patches uniformly from uniformly chosen sets.
class SceneSampler {
 public:
  explicit SceneSampler(std::span<const MeasurementSet> sets);
  /// A patch holding at least `min_size` measurements (re-drawn up to a cap).
  MeasurementSet patch(double side, bool aligned, std::size_t min_size, Rng& rng) const;

 private:
  std::vector<const MeasurementSet*> sets_;
  std::vector<PatchSampler> samplers_;
};

/// Minibatches for the causal or mean-reduction loss. Causal batches share
/// one N drawn uniformly from [n_min, n_max]; mean-reduction examples draw N
/// independently. The sets must outlive the returned function.
BatchFn make_example_batches(std::span<const MeasurementSet> sets, const SamplingConfig& sampling,
                             const StormModel& model, LossVariant variant, std::size_t batch_size);

}  // namespace storm
