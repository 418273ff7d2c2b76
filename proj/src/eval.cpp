#include "storm/eval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <exception>
#include "json.hpp"
#include <numeric>
#include <sstream>
#include <thread>

#include "storm/active.hpp"
#include "storm/config.hpp"
#include "storm/errors.hpp"
#include "storm/model.hpp"
#include "storm/random.hpp"
#include "storm/train.hpp"

namespace storm {

namespace {

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string join_strings(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

std::uint64_t hash_double(double v, std::uint64_t h) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(&bits), sizeof bits), h);
}

/// Runs body(i) for i in [0, count) on up to `workers` threads.
template <typename Body>
void parallel_for(std::size_t count, std::size_t workers, Body&& body) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  std::vector<std::exception_ptr> errors(count);
  auto run = [&](std::size_t i) {
    try {
      body(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < count; i += workers) run(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

}  // namespace

double rmse(std::span<const double> truth, std::span<const double> estimates) {
  if (truth.size() != estimates.size()) {
    throw DimensionError("rmse needs equal lengths, got " + std::to_string(truth.size()) + " and " +
                         std::to_string(estimates.size()));
  }
  if (truth.empty()) throw ContractError("rmse of an empty list");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += (truth[i] - estimates[i]) * (truth[i] - estimates[i]);
  return std::sqrt(s / static_cast<double>(truth.size()));
}

void EvalConfig::validate() const {
  if (estimators.empty()) throw ConfigError("eval.estimators is empty");
  for (const auto& e : estimators) {
    if (e != "storm" && e != "knn" && e != "krr" && e != "kriging" && e != "oracle") {
      throw ConfigError("unknown estimator '" + e + "' in eval.estimators");
    }
  }
  if (n_values.empty()) throw ConfigError("eval.n_values is empty");
  for (std::size_t n : n_values)
    if (n == 0) throw ConfigError("eval.n_values must be positive");
  if (iterations == 0) throw ConfigError("eval.iterations must be positive");
  if (!(patch_side > 0.0)) throw ConfigError("eval.patch_side must be positive");
  if (workers == 0) throw ConfigError("workers must be at least 1");
}

std::map<std::string, std::string> EvalConfig::to_map() const {
  return {{"estimators", join_strings(estimators)},
          {"n_values", join_sizes(n_values)},
          {"iterations", std::to_string(iterations)},
          {"patch_side", format_double(patch_side)},
          {"aligned", aligned ? "true" : "false"},
          {"seed", std::to_string(seed)},
          {"tuning_scenes", std::to_string(tuning_scenes)},
          {"tuning_held_out", std::to_string(tuning_held_out)}};
}

EvalConfig EvalConfig::from_map(const std::map<std::string, std::string>& values) {
  EvalConfig c;
  SectionReader r("eval", values);
  c.estimators = r.get_string_list("estimators", c.estimators);
  c.n_values = r.get_size_list("n_values", c.n_values);
  c.iterations = r.get_size("iterations", c.iterations);
  c.patch_side = r.get_double("patch_side", c.patch_side);
  c.aligned = r.get_bool("aligned", c.aligned);
  c.seed = r.get_u64("seed", c.seed);
  c.tuning_scenes = r.get_size("tuning_scenes", c.tuning_scenes);
  c.tuning_held_out = r.get_size("tuning_held_out", c.tuning_held_out);
  r.finish();
  c.validate();
  return c;
}

const EvalRow& EvalReport::row(const std::string& estimator, std::size_t n) const {
  for (const auto& r : rows)
    if (r.estimator == estimator && r.n == n) return r;
  throw std::out_of_range("no report row for " + estimator + " at N=" + std::to_string(n));
}

void summarize(EvalRow& row) {
  if (row.iteration_mse.empty()) throw ContractError("no iterations to summarize");
  row.iterations = row.iteration_mse.size();
  const double m = mean_of(row.iteration_mse);
  row.rmse_db = std::sqrt(m);
  const double se_mse = stderr_of(row.iteration_mse);
  row.stderr_db = row.rmse_db > 0.0 ? se_mse / (2.0 * row.rmse_db) : 0.0;
}

SplitDraw draw_split(const SceneSampler& sampler, std::size_t n, double patch_side, bool aligned, Rng& rng) {
  MeasurementSet patch = sampler.patch(patch_side, aligned, n + 1, rng);
  SplitDraw d;
  d.source_id = patch.id;
  d.patch = std::move(patch.measurements);
  std::vector<std::size_t> order(d.patch.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  d.observed.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  d.unobserved.assign(order.begin() + static_cast<std::ptrdiff_t>(n), order.end());
  return d;
}

std::uint64_t task_hash(const EstimationTask& task, std::uint64_t h) {
  h = fnv1a64(task.source_id, h);
  for (const auto& m : task.observed) {
    h = hash_double(m.location.x, h);
    h = hash_double(m.location.y, h);
    h = hash_double(m.power_db, h);
  }
  for (const auto& q : task.queries) {
    h = hash_double(q.x, h);
    h = hash_double(q.y, h);
  }
  return h;
}

EvalReport run_rmse_sweep(const EvalConfig& config, std::span<const MeasurementSet> test_sets,
                          std::span<const Estimator* const> estimators) {
  config.validate();
  if (estimators.empty()) throw ConfigError("no estimators to evaluate");
  SceneSampler sampler(test_sets);
  const std::size_t e_count = estimators.size();
  EvalReport report;
  std::vector<std::uint64_t> fairness(e_count, 0xcbf29ce484222325ULL);
  for (std::size_t n : config.n_values) {
    // [iteration][estimator]
    std::vector<std::vector<double>> mse(config.iterations, std::vector<double>(e_count));
    std::vector<std::vector<std::uint64_t>> hashes(config.iterations, std::vector<std::uint64_t>(e_count));
    std::vector<std::size_t> evaluations(config.iterations);
    parallel_for(config.iterations, config.workers, [&](std::size_t it) {
      Rng rng(derive_seed(config.seed, 0xe7a1, n, it));
      const SplitDraw d = draw_split(sampler, n, config.patch_side, config.aligned, rng);
      std::vector<Measurement> observed;
      for (std::size_t i : d.observed) observed.push_back(d.patch[i]);
      std::vector<Location> queries;
      std::vector<double> truth;
      for (std::size_t i : d.unobserved) {
        queries.push_back(d.patch[i].location);
        truth.push_back(d.patch[i].power_db);
      }
      evaluations[it] = truth.size();
      for (std::size_t e = 0; e < e_count; ++e) {
        const EstimationTask task{d.source_id, observed, queries};
        hashes[it][e] = task_hash(task);
        const std::vector<double> est = estimators[e]->estimate(task);
        const double r = rmse(truth, est);
        mse[it][e] = r * r;
      }
    });
    for (std::size_t e = 0; e < e_count; ++e) {
      EvalRow row;
      row.estimator = estimators[e]->name();
      row.n = n;
      for (std::size_t it = 0; it < config.iterations; ++it) {
        row.iteration_mse.push_back(mse[it][e]);
        row.evaluations += evaluations[it];
        fairness[e] = hash_double(static_cast<double>(hashes[it][e]), fairness[e]);
      }
      summarize(row);
      report.rows.push_back(std::move(row));
    }
  }
  for (std::size_t e = 1; e < e_count; ++e) {
    if (fairness[e] != fairness[0]) throw ContractError("estimators were evaluated on different draws");
  }
  report.metadata["fairness_hash"] = hex64(fairness[0]);
  for (const auto& [k, v] : config.to_map()) report.metadata["eval." + k] = v;
  return report;
}

void ActiveEvalConfig::validate() const {
  if (n_values.empty()) throw ConfigError("active.n_values is empty");
  for (std::size_t n : n_values)
    if (n == 0) throw ConfigError("active.n_values must be positive");
  if (iterations == 0) throw ConfigError("active.iterations must be positive");
  if (!(patch_side > 0.0)) throw ConfigError("active.patch_side must be positive");
  if (workers == 0) throw ConfigError("workers must be at least 1");
}

std::map<std::string, std::string> ActiveEvalConfig::to_map() const {
  return {{"n_values", join_sizes(n_values)},
          {"iterations", std::to_string(iterations)},
          {"patch_side", format_double(patch_side)},
          {"aligned", aligned ? "true" : "false"},
          {"seed", std::to_string(seed)}};
}

ActiveEvalConfig ActiveEvalConfig::from_map(const std::map<std::string, std::string>& values) {
  ActiveEvalConfig c;
  SectionReader r("active_eval", values);
  c.n_values = r.get_size_list("n_values", c.n_values);
  c.iterations = r.get_size("iterations", c.iterations);
  c.patch_side = r.get_double("patch_side", c.patch_side);
  c.aligned = r.get_bool("aligned", c.aligned);
  c.seed = r.get_u64("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

ActiveReport run_active_comparison(const ActiveEvalConfig& config, const StormModel& model,
                                   std::span<const MeasurementSet> test_sets) {
  config.validate();
  if (!model.candidate) throw ContractError("active comparison needs a model with the active-sensing branch");
  SceneSampler sampler(test_sets);
  ActiveReport report;
  for (std::size_t n : config.n_values) {
    struct Outcome {
      double selected = 0, random = 0, unrefined = 0;
      std::size_t candidates = 0;
    };
    std::vector<Outcome> out(config.iterations);
    parallel_for(config.iterations, config.workers, [&](std::size_t it) {
      Rng rng(derive_seed(config.seed, 0xac71, n, it));
      MeasurementSet patch = sampler.patch(config.patch_side, config.aligned, n + 2, rng);
      SceneDraw draw = draw_scene(patch, n, rng);
      if (draw.rest.empty()) throw ContractError("active comparison needs at least one candidate");
      std::vector<Location> candidates;
      for (const auto& m : draw.rest) candidates.push_back(m.location);
      const Location target = draw.target.location;
      const double y = draw.target.power_db;
      const std::size_t chosen = select_next(model, draw.inputs, candidates, target);
      const std::size_t random = rng.index(candidates.size());
      const double e_sel = refined_estimate(model, draw.inputs, draw.rest[chosen], target) - y;
      const double e_rnd = refined_estimate(model, draw.inputs, draw.rest[random], target) - y;
      const double e_un = estimate(model, draw.inputs, target) - y;
      out[it] = {e_sel * e_sel, e_rnd * e_rnd, e_un * e_un, candidates.size()};
    });
    EvalRow sel{"selected", n}, rnd{"random", n}, un{"unrefined", n};
    std::vector<double> diff;
    double cand = 0.0;
    for (const auto& o : out) {
      sel.iteration_mse.push_back(o.selected);
      rnd.iteration_mse.push_back(o.random);
      un.iteration_mse.push_back(o.unrefined);
      diff.push_back(o.random - o.selected);
      cand += static_cast<double>(o.candidates);
    }
    for (EvalRow* r : {&sel, &rnd, &un}) {
      r->evaluations = config.iterations;
      summarize(*r);
    }
    ActiveComparison c;
    c.n = n;
    c.selected_rmse = sel.rmse_db;
    c.random_rmse = rnd.rmse_db;
    c.difference = mean_of(diff);
    c.difference_stderr = stderr_of(diff);
    c.iterations = config.iterations;
    c.mean_candidates = cand / static_cast<double>(config.iterations);
    report.comparisons.push_back(c);
    report.rmse.rows.push_back(std::move(sel));
    report.rmse.rows.push_back(std::move(rnd));
    report.rmse.rows.push_back(std::move(un));
  }
  for (const auto& [k, v] : config.to_map()) report.rmse.metadata["active_eval." + k] = v;
  return report;
}

namespace {

void write_header(std::ostringstream& os, const std::map<std::string, std::string>& header) {
  for (const auto& [k, v] : header) os << "# " << k << '=' << v << '\n';
}

}  // namespace

std::string report_csv(const EvalReport& report, const std::map<std::string, std::string>& header) {
  std::ostringstream os;
  write_header(os, header);
  os << "estimator,n,rmse_db,stderr_db,iterations\n";
  for (const auto& r : report.rows) {
    os << r.estimator << ',' << r.n << ',' << format_double(r.rmse_db) << ',' << format_double(r.stderr_db) << ','
       << r.iterations << '\n';
  }
  return os.str();
}

std::string active_csv(const ActiveReport& report, const std::map<std::string, std::string>& header) {
  std::ostringstream os;
  write_header(os, header);
  os << "n,selected_rmse_db,random_rmse_db,sq_error_gain,sq_error_gain_stderr,iterations,mean_candidates\n";
  for (const auto& c : report.comparisons) {
    os << c.n << ',' << format_double(c.selected_rmse) << ',' << format_double(c.random_rmse) << ','
       << format_double(c.difference) << ',' << format_double(c.difference_stderr) << ',' << c.iterations << ','
       << format_double(c.mean_candidates) << '\n';
  }
  return os.str();
}

std::string report_json(const EvalReport& report, const std::map<std::string, std::string>& header) {
  nlohmann::ordered_json j;
  for (const auto& [k, v] : header) j["run"][k] = v;
  for (const auto& [k, v] : report.metadata) j["metadata"][k] = v;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"estimator", r.estimator},
                    {"n", r.n},
                    {"rmse_db", format_double(r.rmse_db)},
                    {"stderr_db", format_double(r.stderr_db)},
                    {"iterations", r.iterations},
                    {"evaluations", r.evaluations}});
  }
  j["rows"] = rows;
  return j.dump(2) + "\n";
}

}  // namespace storm
