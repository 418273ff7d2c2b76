#include "storm/train.hpp"

#include <cmath>
#include <numbers>
#include <thread>

#include "storm/config.hpp"
#include "storm/random.hpp"

namespace storm {

namespace {

const char* loss_name(LossVariant v) {
  switch (v) {
    case LossVariant::MeanReduce:
      return "mean_reduce";
    case LossVariant::Causal:
      return "causal";
    case LossVariant::Active:
      return "active";
  }
  return "?";
}

LossVariant parse_loss(const std::string& s) {
  if (s == "mean_reduce") return LossVariant::MeanReduce;
  if (s == "causal") return LossVariant::Causal;
  if (s == "active") return LossVariant::Active;
  throw ConfigError("train.loss must be mean_reduce, causal or active, got '" + s + "'");
}

}  // namespace

void TrainingConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
  if (gradient_clip < 0.0) throw ConfigError("gradient clip must be non-negative");
  if (workers == 0) throw ConfigError("workers must be at least 1");
}

std::map<std::string, std::string> TrainingConfig::to_map() const {
  return {{"learning_rate", format_double(learning_rate)},
          {"batch_size", std::to_string(batch_size)},
          {"steps", std::to_string(steps)},
          {"beta1", format_double(beta1)},
          {"beta2", format_double(beta2)},
          {"adam_epsilon", format_double(adam_epsilon)},
          {"gradient_clip", format_double(gradient_clip)},
          {"warmup_steps", std::to_string(warmup_steps)},
          {"cosine_decay", cosine_decay ? "true" : "false"},
          {"seed", std::to_string(seed)},
          {"loss", loss_name(loss)}};
}

TrainingConfig TrainingConfig::from_map(const std::map<std::string, std::string>& values) {
  return from_map(values, "train", TrainingConfig{});
}

TrainingConfig TrainingConfig::from_map(const std::map<std::string, std::string>& values, const std::string& section,
                                    TrainingConfig c) {
  SectionReader r(section, values);
  c.learning_rate = r.get_double("learning_rate", c.learning_rate);
  c.batch_size = r.get_size("batch_size", c.batch_size);
  c.steps = r.get_size("steps", c.steps);
  c.beta1 = r.get_double("beta1", c.beta1);
  c.beta2 = r.get_double("beta2", c.beta2);
  c.adam_epsilon = r.get_double("adam_epsilon", c.adam_epsilon);
  c.gradient_clip = r.get_double("gradient_clip", c.gradient_clip);
  c.warmup_steps = r.get_size("warmup_steps", c.warmup_steps);
  c.cosine_decay = r.get_bool("cosine_decay", c.cosine_decay);
  c.seed = r.get_u64("seed", c.seed);
  c.loss = parse_loss(r.get_string("loss", loss_name(c.loss)));
  r.finish();
  c.validate();
  return c;
}

AdamOptimizer::AdamOptimizer(const ParameterStore& store, double beta1, double beta2, double epsilon)
    : beta1_(beta1), beta2_(beta2), epsilon_(epsilon), m_(store.zero_gradients()), v_(store.zero_gradients()) {}

void AdamOptimizer::step(ParameterStore& store, const Gradients& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < store.size(); ++p) {
    Tensor& w = store[p].value;
    const Tensor& g = grads[p];
    Tensor& m = m_[p];
    Tensor& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon_);
    }
  }
}

double clip_gradients(Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g.data()) v *= s;
  }
  return norm;
}

double learning_rate_at(const TrainingConfig& config, std::size_t step) {
  double lr = config.learning_rate;
  if (config.warmup_steps > 0 && step < config.warmup_steps) {
    lr *= static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  }
  if (config.cosine_decay && config.steps > 0) {
    lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(config.steps)));
  }
  return lr;
}

TrainingResult optimize(ParameterStore& store, const BatchFn& batches, const TrainingConfig& config, double dropout,
                        const ProgressFn& progress) {
  config.validate();
  AdamOptimizer adam(store, config.beta1, config.beta2, config.adam_epsilon);
  TrainingResult result;
  result.loss_trace.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    Rng batch_rng(derive_seed(config.seed, 0xba7c4, step));
    Batch batch = batches(step, batch_rng);
    if (batch.size == 0) throw std::invalid_argument("training batch is empty");

    std::vector<Gradients> term_grads(batch.size);
    std::vector<double> term_loss(batch.size, 0.0);
    std::vector<std::exception_ptr> errors(batch.size);
    auto run_term = [&](std::size_t i) {
      try {
        Tape tape;
        Rng drop_rng(derive_seed(config.seed, 0xd209, step, i));
        Context ctx{tape, store, dropout, dropout > 0.0 ? &drop_rng : nullptr};
        Var loss = batch.term(ctx, i);
        term_loss[i] = loss.value().item();
        tape.backward(loss);
        term_grads[i] = store.zero_gradients();
        tape.accumulate_into(term_grads[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    };
    const std::size_t workers = std::min(config.workers, batch.size);
    if (workers <= 1) {
      for (std::size_t i = 0; i < batch.size; ++i) run_term(i);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          for (std::size_t i = w; i < batch.size; i += workers) run_term(i);
        });
      }
      for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);

    Gradients grads = std::move(term_grads[0]);
    double loss = term_loss[0];
    for (std::size_t i = 1; i < batch.size; ++i) {
      for (std::size_t p = 0; p < grads.size(); ++p) grads[p] += term_grads[i][p];
      loss += term_loss[i];
    }
    if (!std::isfinite(loss)) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": loss is " + format_double(loss));
    }
    const double norm = clip_gradients(grads, config.gradient_clip);
    if (!std::isfinite(norm)) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": gradient norm is not finite");
    }
    adam.step(store, grads, learning_rate_at(config, step));
    result.loss_trace.push_back(loss);
    result.gradient_norms.push_back(norm);
    if (progress) progress(step, loss);
  }
  return result;
}

TrainingResult train(StormModel& model, const BatchFn& batches, const TrainingConfig& config,
                     const ProgressFn& progress) {
  return optimize(model.parameters(), batches, config, model.config().dropout, progress);
}

void SamplingConfig::validate() const {
  if (!(patch_side > 0.0)) throw ConfigError("patch side must be positive");
  if (n_min == 0 || n_min > n_max) throw ConfigError("need 1 <= n_min <= n_max");
}

SceneSampler::SceneSampler(std::span<const MeasurementSet> sets) {
  if (sets.empty()) throw std::invalid_argument("no measurement sets to sample from");
  for (const auto& s : sets) {
    sets_.push_back(&s);
    samplers_.emplace_back(s);
  }
}

MeasurementSet SceneSampler::patch(double side, bool aligned, std::size_t min_size, Rng& rng) const {
  constexpr int kAttempts = 100;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    const std::size_t s = rng.index(samplers_.size());
    Patch p = samplers_[s].sample(side, rng, aligned);
    if (p.ms.size() >= min_size) return std::move(p.ms);
  }
  throw std::runtime_error("could not find a patch with " + std::to_string(min_size) + " measurements after " +
                           std::to_string(kAttempts) + " draws");
}

BatchFn make_example_batches(std::span<const MeasurementSet> sets, const SamplingConfig& sampling,
                             const StormModel& model, LossVariant variant, std::size_t batch_size) {
  sampling.validate();
  if (variant == LossVariant::Active) throw ConfigError("use make_active_batches for the active loss");
  auto sampler = std::make_shared<SceneSampler>(sets);
  const FeatureConfig features = model.config().features;
  const StormModel* m = &model;
  return [sampler, sampling, features, m, variant, batch_size](std::size_t, Rng& rng) {
    auto examples = std::make_shared<std::vector<Example>>();
    const std::size_t shared_n = sampling.n_min + rng.index(sampling.n_max - sampling.n_min + 1);
    for (std::size_t i = 0; i < batch_size; ++i) {
      const std::size_t n = variant == LossVariant::Causal
                                ? shared_n
                                : sampling.n_min + rng.index(sampling.n_max - sampling.n_min + 1);
      MeasurementSet patch = sampler->patch(sampling.patch_side, sampling.aligned, n + 1, rng);
      examples->push_back(build_example(patch, n, rng, features, m->normalization));
    }
    Batch batch;
    batch.size = batch_size;
    batch.term = [examples, m, variant, batch_size](Context& ctx, std::size_t i) {
      return variant == LossVariant::Causal ? causal_loss_term(ctx, *m, (*examples)[i], batch_size)
                                            : mean_reduce_loss_term(ctx, *m, (*examples)[i], batch_size);
    };
    return batch;
  };
}

}  // namespace storm
