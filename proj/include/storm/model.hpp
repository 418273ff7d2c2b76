#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "storm/attention.hpp"
#include "storm/data.hpp"
#include "storm/features.hpp"

namespace storm {

struct ModelConfig {
  std::size_t embed_dim = 48;
  std::size_t heads = 2;
  std::size_t blocks = 5;
  std::size_t mlp_multiplier = 2;
  /// Causal trains every prefix at once; None is the mean-reduction variant.
  MaskType mask = MaskType::Causal;
  FeatureConfig features;
  double dropout = 0.0;
  Activation activation = Activation::Gelu;
  /// Adds the candidate encoder/decoder used for active sensing.
  bool active = false;
  /// Blocks in the encoder part; 0 means blocks - 1.
  std::size_t encoder_blocks = 0;
  std::uint64_t init_seed = 1;

  void validate() const;
  std::size_t split() const { return encoder_blocks == 0 ? blocks - 1 : encoder_blocks; }
  std::map<std::string, std::string> to_map() const;
  /// Keys not present keep the values of `base`.
  static ModelConfig from_map(const std::map<std::string, std::string>& values);
  static ModelConfig from_map(const std::map<std::string, std::string>& values, const std::string& section,
                              ModelConfig base);
};

/// Candidate branch: scores how useful a measurement at each candidate
/// location would be, from candidate geometry and measurement latents only.
struct CandidateHeadParams {
  LinearParams embed;
  LayerNormParams ln_embed;
  MlpParams embed_mlp;
  LayerNormParams ln_query;
  LayerNormParams ln_memory;
  MultiHeadParams cross;  // single head
  LayerNormParams ln_out;
  MlpParams mlp;
  LinearParams score;
};

class StormModel {
 public:
  explicit StormModel(ModelConfig config, PowerNormalization normalization = {});

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

  PowerNormalization normalization;
  LinearParams embed;
  std::vector<AttentionBlockParams> blocks;
  LinearParams head;
  std::optional<CandidateHeadParams> candidate;

 private:
  ModelConfig config_;
  ParameterStore store_;
};

MaskKind model_mask(const StormModel& model, std::size_t measurements);

// Graph builders (normalized units).
Var embed_features(Context& ctx, const StormModel& model, Var features);
/// Embedding followed by blocks [first, last).
Var run_blocks(Context& ctx, const StormModel& model, Var hidden, std::size_t first, std::size_t last,
               const MaskKind& mask);
/// Linear head, D x N -> 1 x N.
Var output_head(Context& ctx, const StormModel& model, Var hidden);
Var forward_graph(Context& ctx, const StormModel& model, Var features, const MaskKind& mask);

/// Per-column estimates in dB; entry n uses measurements 1..n under the
/// causal mask.
std::vector<double> forward(const StormModel& model, const FeatureMatrix& features);
/// Map estimate at `target`: last column for the causal model, the column
/// mean for the mean-reduction model.
double estimate(const StormModel& model, std::span<const Measurement> measurements, Location target);

enum class LossVariant { MeanReduce, Causal, Active };

/// One example's share of the causal loss, (1/(T N)) sum_n (y - f_n)^2.
Var causal_loss_term(Context& ctx, const StormModel& model, const Example& example, std::size_t batch_size);
/// One example's share of the mean-reduction loss, (1/T) (y - mean f)^2.
Var mean_reduce_loss_term(Context& ctx, const StormModel& model, const Example& example, std::size_t batch_size);
Var loss_causal_graph(Context& ctx, const StormModel& model, std::span<const Example> batch);
Var loss_mean_reduce_graph(Context& ctx, const StormModel& model, std::span<const Example> batch);
double loss_causal(const StormModel& model, std::span<const Example> batch);
double loss_mean_reduce(const StormModel& model, std::span<const Example> batch);

std::size_t count_parameters(const StormModel& model);
/// Parameters inside attention blocks only.
std::size_t count_block_parameters(const StormModel& model);

/// Binary checkpoint; layout documented in docs/checkpoint.md.
void save_checkpoint(const StormModel& model, const std::string& path);
StormModel load_checkpoint(const std::string& path);

}  // namespace storm
