#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "storm/active.hpp"
#include "storm/config.hpp"
#include "storm/eval.hpp"
#include "storm/model.hpp"
#include "storm/train.hpp"

namespace storm {

struct DataConfig {
  std::size_t train_maps = 20;
  std::size_t test_maps = 5;
  /// Empty: `<out>/data`.
  std::string dir;
};

/// Every configurable setting of a run, one struct per config section.
struct RunConfig {
  DataConfig data;
  SyntheticMapConfig synthetic;
  ModelConfig model;
  TrainingConfig train;
  SamplingConfig sampling;
  EvalConfig eval;
  ModelConfig active_model;
  TrainingConfig active_train;
  ActiveSamplingConfig active_sampling;
  ActiveEvalConfig active_eval;

  RunConfig();
  /// Unknown sections and keys are errors.
  static RunConfig from_file(const ConfigFile& file);
  /// Effective settings, defaults included.
  ConfigFile to_file() const;
  std::uint64_t hash() const { return to_file().hash(); }
};

struct RunOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  bool quiet = false;
};

/// Config file, then --seed, then --set overrides.
RunConfig resolve_config(const RunOptions& options);
/// Map i of a split ("train" or "test"), regenerated deterministically.
SyntheticScene synthetic_map(const RunConfig& config, const std::string& split, std::size_t index);

void cmd_generate(const RunOptions& options);
void cmd_train(const RunOptions& options);
void cmd_eval(const RunOptions& options);
void cmd_active(const RunOptions& options);
/// Returns true when every check passes.
bool cmd_gradcheck(const RunOptions& options);

/// Entry point of the `storm` binary.
int run_cli(int argc, char** argv);

}  // namespace storm
