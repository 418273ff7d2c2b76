#include "storm/commands.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "storm/errors.hpp"
#include "storm/gradcheck.hpp"
#include "storm/random.hpp"

namespace storm {

namespace fs = std::filesystem;

namespace {

std::map<std::string, std::string> data_to_map(const DataConfig& d) {
  return {{"train_maps", std::to_string(d.train_maps)}, {"test_maps", std::to_string(d.test_maps)}, {"dir", d.dir}};
}

DataConfig data_from_map(const KeyValues& values) {
  DataConfig d;
  SectionReader r("data", values);
  d.train_maps = r.get_size("train_maps", d.train_maps);
  d.test_maps = r.get_size("test_maps", d.test_maps);
  d.dir = r.get_string("dir", d.dir);
  r.finish();
  if (d.train_maps == 0 || d.test_maps == 0) throw ConfigError("data.train_maps and data.test_maps must be positive");
  return d;
}

std::map<std::string, std::string> sampling_to_map(const SamplingConfig& s) {
  return {{"patch_side", format_double(s.patch_side)},
          {"aligned", s.aligned ? "true" : "false"},
          {"n_min", std::to_string(s.n_min)},
          {"n_max", std::to_string(s.n_max)}};
}

SamplingConfig sampling_from_map(const KeyValues& values) {
  SamplingConfig s;
  SectionReader r("sampling", values);
  s.patch_side = r.get_double("patch_side", s.patch_side);
  s.aligned = r.get_bool("aligned", s.aligned);
  s.n_min = r.get_size("n_min", s.n_min);
  s.n_max = r.get_size("n_max", s.n_max);
  r.finish();
  s.validate();
  return s;
}

std::map<std::string, std::string> active_sampling_to_map(const ActiveSamplingConfig& s) {
  return {{"patch_side", format_double(s.patch_side)},
          {"aligned", s.aligned ? "true" : "false"},
          {"n_min", std::to_string(s.n_min)},
          {"n_max", std::to_string(s.n_max)},
          {"candidates", std::to_string(s.candidates)}};
}

ActiveSamplingConfig active_sampling_from_map(const KeyValues& values) {
  ActiveSamplingConfig s;
  SectionReader r("active_sampling", values);
  s.patch_side = r.get_double("patch_side", s.patch_side);
  s.aligned = r.get_bool("aligned", s.aligned);
  s.n_min = r.get_size("n_min", s.n_min);
  s.n_max = r.get_size("n_max", s.n_max);
  s.candidates = r.get_size("candidates", s.candidates);
  r.finish();
  s.validate();
  return s;
}

class Log {
 public:
  explicit Log(bool quiet) : quiet_(quiet) {}
  template <typename... Args>
  void operator()(const Args&... args) const {
    if (quiet_) return;
    std::ostringstream os;
    (os << ... << args);
    std::cerr << "[storm] " << os.str() << '\n';
  }

 private:
  bool quiet_;
};

fs::path data_dir(const RunConfig& config, const RunOptions& options) {
  return config.data.dir.empty() ? fs::path(options.out_dir) / "data" : fs::path(config.data.dir);
}

std::string map_id(const std::string& split, std::size_t i) {
  std::string n = std::to_string(i);
  return split + "_" + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n;
}

fs::path map_path(const fs::path& dir, const std::string& split, std::size_t i) {
  return dir / (map_id(split, i) + ".csv");
}

std::vector<MeasurementSet> load_split(const RunConfig& config, const RunOptions& options, const std::string& split) {
  const std::size_t count = split == "train" ? config.data.train_maps : config.data.test_maps;
  std::vector<MeasurementSet> sets;
  for (std::size_t i = 0; i < count; ++i) sets.push_back(read_ms_file(map_path(data_dir(config, options), split, i)));
  return sets;
}

void require_file(const fs::path& p, const std::string& hint) {
  if (!fs::is_regular_file(p)) throw std::runtime_error("missing input file " + p.string() + " (" + hint + ")");
}

void require_split(const RunConfig& config, const RunOptions& options, const std::string& split) {
  const std::size_t count = split == "train" ? config.data.train_maps : config.data.test_maps;
  for (std::size_t i = 0; i < count; ++i) require_file(map_path(data_dir(config, options), split, i), "run generate first");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

/// Header embedded in every output file.
std::map<std::string, std::string> run_header(const RunConfig& config, const std::string& command, std::uint64_t seed) {
  return {{"command", command}, {"config_hash", hex64(config.hash())}, {"seed", std::to_string(seed)}};
}

std::string loss_trace_csv(const TrainingResult& r, const std::map<std::string, std::string>& header) {
  std::ostringstream os;
  for (const auto& [k, v] : header) os << "# " << k << '=' << v << '\n';
  os << "step,loss,gradient_norm\n";
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
    os << i << ',' << format_double(r.loss_trace[i]) << ',' << format_double(r.gradient_norms[i]) << '\n';
  }
  return os.str();
}

ProgressFn progress_logger(const Log& log, std::size_t steps) {
  const std::size_t every = std::max<std::size_t>(1, steps / 20);
  auto smoothed = std::make_shared<double>(0.0);
  auto count = std::make_shared<std::size_t>(0);
  return [log, every, steps, smoothed, count](std::size_t step, double loss) {
    *smoothed += loss;
    ++*count;
    if ((step + 1) % every == 0 || step + 1 == steps) {
      log("step ", step + 1, "/", steps, " loss ", *smoothed / static_cast<double>(*count));
      *smoothed = 0.0;
      *count = 0;
    }
  };
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

RunConfig::RunConfig() {
  active_model.embed_dim = 20;
  active_model.active = true;
  active_train.loss = LossVariant::Active;
}

RunConfig RunConfig::from_file(const ConfigFile& file) {
  static const std::set<std::string> known{"data",  "synthetic",    "model",        "train",           "sampling",
                                           "eval",  "active_model", "active_train", "active_sampling", "active_eval"};
  for (const auto& [name, _] : file.sections()) {
    if (!known.count(name)) throw ConfigError("unknown config section [" + name + "]");
  }
  RunConfig c;
  c.data = data_from_map(file.section("data"));
  c.synthetic = SyntheticMapConfig::from_map(file.section("synthetic"));
  c.model = ModelConfig::from_map(file.section("model"), "model", c.model);
  c.train = TrainingConfig::from_map(file.section("train"), "train", c.train);
  c.sampling = sampling_from_map(file.section("sampling"));
  c.eval = EvalConfig::from_map(file.section("eval"));
  c.active_model = ModelConfig::from_map(file.section("active_model"), "active_model", c.active_model);
  c.active_train = TrainingConfig::from_map(file.section("active_train"), "active_train", c.active_train);
  c.active_sampling = active_sampling_from_map(file.section("active_sampling"));
  c.active_eval = ActiveEvalConfig::from_map(file.section("active_eval"));
  if (c.model.active) throw ConfigError("model.active must be false; the active model lives in [active_model]");
  if (!c.active_model.active) throw ConfigError("active_model.active must be true");
  if (c.train.loss == LossVariant::Active) throw ConfigError("train.loss cannot be active; use the active command");
  if (c.active_train.loss != LossVariant::Active) throw ConfigError("active_train.loss must be active");
  return c;
}

ConfigFile RunConfig::to_file() const {
  ConfigFile f;
  auto put = [&f](const std::string& section, const std::map<std::string, std::string>& values) {
    for (const auto& [k, v] : values) f.set(section, k, v);
  };
  put("data", data_to_map(data));
  put("synthetic", synthetic.to_map());
  put("model", model.to_map());
  put("train", train.to_map());
  put("sampling", sampling_to_map(sampling));
  put("eval", eval.to_map());
  put("active_model", active_model.to_map());
  put("active_train", active_train.to_map());
  put("active_sampling", active_sampling_to_map(active_sampling));
  put("active_eval", active_eval.to_map());
  return f;
}

RunConfig resolve_config(const RunOptions& options) {
  ConfigFile file;
  if (!options.config_path.empty()) file = ConfigFile::load(options.config_path);
  if (options.seed) {
    const std::string s = std::to_string(*options.seed);
    for (const char* key : {"synthetic.seed", "model.init_seed", "train.seed", "eval.seed", "active_model.init_seed",
                            "active_train.seed", "active_eval.seed"}) {
      file.set_override(std::string(key) + "=" + s);
    }
  }
  for (const auto& o : options.overrides) file.set_override(o);
  RunConfig c = RunConfig::from_file(file);
  c.train.workers = options.workers;
  c.active_train.workers = options.workers;
  c.eval.workers = options.workers;
  c.active_eval.workers = options.workers;
  return c;
}

SyntheticScene synthetic_map(const RunConfig& config, const std::string& split, std::size_t index) {
  SyntheticMapConfig sc = config.synthetic;
  sc.seed = derive_seed(config.synthetic.seed, split == "train" ? 0x7a : 0x7e, index);
  return generate_synthetic_ms(sc, map_id(split, index));
}

void cmd_generate(const RunOptions& options) {
  const RunConfig config = resolve_config(options);
  const Log log(options.quiet);
  const fs::path dir = data_dir(config, options);
  fs::create_directories(dir);
  log("config hash ", hex64(config.hash()), ", seed ", config.synthetic.seed);
  for (const std::string split : {"train", "test"}) {
    const std::size_t count = split == "train" ? config.data.train_maps : config.data.test_maps;
    for (std::size_t i = 0; i < count; ++i) {
      const SyntheticScene scene = synthetic_map(config, split, i);
      write_ms_file(scene.ms, map_path(dir, split, i).string(), run_header(config, "generate", config.synthetic.seed));
    }
    log("wrote ", count, " ", split, " measurement sets to ", dir.string());
  }
  write_text(dir / "generate.ini", "# config_hash=" + hex64(config.hash()) + "\n# seed=" +
                                       std::to_string(config.synthetic.seed) + "\n" + config.to_file().serialize());
}

void cmd_train(const RunOptions& options) {
  const RunConfig config = resolve_config(options);
  const Log log(options.quiet);
  require_split(config, options, "train");
  const std::vector<MeasurementSet> train_sets = load_split(config, options, "train");
  StormModel model(config.model, estimate_normalization(train_sets));
  log("config hash ", hex64(config.hash()), ", seed ", config.train.seed, ", ", count_parameters(model),
      " parameters");
  const auto t0 = std::chrono::steady_clock::now();
  const BatchFn batches = make_example_batches(train_sets, config.sampling, model,
                                               config.model.mask == MaskType::Causal ? LossVariant::Causal
                                                                                     : LossVariant::MeanReduce,
                                               config.train.batch_size);
  const TrainingResult result = train(model, batches, config.train, progress_logger(log, config.train.steps));
  log("trained in ", seconds_since(t0), " s");
  const fs::path out(options.out_dir);
  fs::create_directories(out);
  save_checkpoint(model, (out / "model.ckpt").string());
  write_text(out / "train_loss.csv", loss_trace_csv(result, run_header(config, "train", config.train.seed)));
}

void cmd_eval(const RunOptions& options) {
  const RunConfig config = resolve_config(options);
  const Log log(options.quiet);
  const fs::path out(options.out_dir);
  const bool needs_storm =
      std::find(config.eval.estimators.begin(), config.eval.estimators.end(), "storm") != config.eval.estimators.end();
  require_split(config, options, "train");
  require_split(config, options, "test");
  if (needs_storm) require_file(out / "model.ckpt", "run train first");

  const std::vector<MeasurementSet> train_sets = load_split(config, options, "train");
  const std::vector<MeasurementSet> test_sets = load_split(config, options, "test");
  std::optional<StormModel> model;
  if (needs_storm) model.emplace(load_checkpoint((out / "model.ckpt").string()));

  std::map<std::string, GroundTruthMap> truths;
  std::vector<std::unique_ptr<Estimator>> owned;
  for (const auto& name : config.eval.estimators) {
    if (name == "storm") {
      owned.push_back(std::make_unique<StormEstimator>(*model));
    } else if (name == "knn") {
      owned.push_back(std::make_unique<KnnEstimator>());
    } else if (name == "krr") {
      owned.push_back(std::make_unique<KrrEstimator>());
    } else if (name == "kriging") {
      owned.push_back(std::make_unique<KrigingEstimator>());
    } else if (name == "oracle") {
      for (std::size_t i = 0; i < config.data.test_maps; ++i) {
        truths.emplace(map_id("test", i), synthetic_map(config, "test", i).truth);
      }
      owned.push_back(std::make_unique<OracleEstimator>([&truths](const std::string& id, Location x) {
        return truths.at(id)(x);
      }));
    } else {
      throw ConfigError("eval.estimators: unknown estimator '" + name + "'");
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<TuningScene> scenes = make_tuning_scenes(
      train_sets, config.eval.n_values, config.eval.tuning_scenes, config.eval.patch_side,
      config.eval.tuning_held_out, derive_seed(config.eval.seed, 0x70e));
  std::map<std::string, std::string> tuned;
  for (auto& e : owned) {
    e->tune(scenes);
    for (const auto& [k, v] : e->describe()) tuned[k] = v;
  }
  log("tuned baselines in ", seconds_since(t0), " s");

  std::vector<const Estimator*> estimators;
  for (const auto& e : owned) estimators.push_back(e.get());
  const auto t1 = std::chrono::steady_clock::now();
  EvalReport report = run_rmse_sweep(config.eval, test_sets, estimators);
  log("evaluated in ", seconds_since(t1), " s");
  for (const auto& [k, v] : tuned) report.metadata["tuned." + k] = v;
  if (model) {
    report.metadata["storm.trained_n_max"] = std::to_string(config.sampling.n_max);
    std::string beyond;
    for (std::size_t n : config.eval.n_values)
      if (n > config.sampling.n_max) beyond += (beyond.empty() ? "" : ",") + std::to_string(n);
    if (!beyond.empty()) report.metadata["storm.extrapolated_n"] = beyond;
  }
  for (const auto& r : report.rows) log(r.estimator, " N=", r.n, " rmse ", r.rmse_db, " +- ", r.stderr_db, " dB");
  const auto header = run_header(config, "eval", config.eval.seed);
  write_text(out / "eval_report.csv", report_csv(report, header));
  write_text(out / "eval_report.json", report_json(report, header));
}

void cmd_active(const RunOptions& options) {
  const RunConfig config = resolve_config(options);
  const Log log(options.quiet);
  const fs::path out(options.out_dir);
  require_split(config, options, "train");
  require_split(config, options, "test");
  const std::vector<MeasurementSet> train_sets = load_split(config, options, "train");
  const std::vector<MeasurementSet> test_sets = load_split(config, options, "test");

  StormModel model(config.active_model, estimate_normalization(train_sets));
  log("config hash ", hex64(config.hash()), ", seed ", config.active_train.seed, ", ", count_parameters(model),
      " parameters");
  const auto t0 = std::chrono::steady_clock::now();
  const BatchFn batches = make_active_batches(train_sets, config.active_sampling, model, config.active_train.batch_size);
  const TrainingResult result =
      train(model, batches, config.active_train, progress_logger(log, config.active_train.steps));
  log("trained in ", seconds_since(t0), " s");
  fs::create_directories(out);
  save_checkpoint(model, (out / "active_model.ckpt").string());
  const auto train_header = run_header(config, "active", config.active_train.seed);
  write_text(out / "active_train_loss.csv", loss_trace_csv(result, train_header));

  const auto t1 = std::chrono::steady_clock::now();
  const ActiveReport report = run_active_comparison(config.active_eval, model, test_sets);
  log("evaluated in ", seconds_since(t1), " s");
  for (const auto& c : report.comparisons) {
    log("N=", c.n, " selected ", c.selected_rmse, " dB, random ", c.random_rmse, " dB, gain ", c.difference, " +- ",
        c.difference_stderr, " dB^2");
  }
  const auto header = run_header(config, "active", config.active_eval.seed);
  write_text(out / "active_report.csv", active_csv(report, header));
  write_text(out / "active_rmse.csv", report_csv(report.rmse, header));
  write_text(out / "active_report.json", report_json(report.rmse, header));
}

bool cmd_gradcheck(const RunOptions& options) {
  const std::uint64_t seed = options.seed.value_or(1);
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(seed)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " coordinates=" << r.coordinates
              << " max_relative_error=" << format_double(r.max_relative_error) << '\n';
    ok = ok && r.passed;
  }
  return ok;
}

namespace {

void print_error(const std::string& kind, const std::string& message) {
  nlohmann::json j{{"error", kind}, {"message", message}};
  std::cerr << j.dump() << '\n';
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Gridless radio map estimation with attention"};
  app.require_subcommand(1);
  RunOptions options;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", options.config_path, "INI config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "Seed applied to every seeded section");
    cmd->add_option("--workers", options.workers, "Worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--set", options.overrides, "Override, section.key=value (repeatable)");
    cmd->add_option("--out", options.out_dir, "Output directory");
    cmd->add_flag("--quiet", options.quiet, "No progress log");
  };
  CLI::App* generate = app.add_subcommand("generate", "Write synthetic measurement sets");
  CLI::App* train_cmd = app.add_subcommand("train", "Train the estimator");
  CLI::App* eval = app.add_subcommand("eval", "RMSE-vs-N sweep against baselines");
  CLI::App* active = app.add_subcommand("active", "Train the active-sensing model and compare with random selection");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  for (CLI::App* c : {generate, train_cmd, eval, active, gradcheck}) add_common(c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  }
  for (CLI::App* c : {generate, train_cmd, eval, active, gradcheck}) {
    if (c->parsed() && c->count("--seed")) options.seed = seed;
  }

  try {
    if (generate->parsed()) cmd_generate(options);
    if (train_cmd->parsed()) cmd_train(options);
    if (eval->parsed()) cmd_eval(options);
    if (active->parsed()) cmd_active(options);
    if (gradcheck->parsed() && !cmd_gradcheck(options)) {
      print_error("gradcheck", "finite-difference check failed");
      return 1;
    }
  } catch (const ConfigError& e) {
    print_error("config", e.what());
    return 2;
  } catch (const FormatError& e) {
    print_error("format", e.what());
    return 3;
  } catch (const DivergenceError& e) {
    print_error("divergence", e.what());
    return 4;
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
    return 1;
  }
  return 0;
}

}  // namespace storm
