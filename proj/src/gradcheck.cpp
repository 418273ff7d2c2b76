#include "storm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "storm/active.hpp"
#include "storm/model.hpp"
#include "storm/random.hpp"

namespace storm {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckResult check_parameter_gradients(const std::string& name, ParameterStore& store, const LossBuilder& loss,
                                          double tolerance, double step) {
  Gradients analytic = store.zero_gradients();
  {
    Tape tape;
    Context ctx{tape, store};
    Var l = loss(ctx);
    tape.backward(l);
    tape.accumulate_into(analytic);
  }
  auto evaluate = [&] {
    Tape tape(false);
    Context ctx{tape, store};
    return loss(ctx).value().item();
  };
  GradCheckResult r;
  r.name = name;
  for (std::size_t p = 0; p < store.size(); ++p) {
    Tensor& w = store[p].value;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      auto at = [&](double offset) {
        w[i] = saved + offset;
        return evaluate();
      };
      // Five-point central stencil: truncation O(h^4).
      const double numeric = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
      w[i] = saved;
      r.max_relative_error = std::max(r.max_relative_error, relative_error(analytic[p][i], numeric));
      ++r.coordinates;
    }
  }
  r.passed = r.max_relative_error < tolerance;
  return r;
}

namespace {

ModelConfig tiny_config(MaskType mask, bool active, std::uint64_t seed) {
  ModelConfig c;
  c.embed_dim = 8;
  c.heads = 2;
  c.blocks = 2;
  c.mask = mask;
  c.active = active;
  c.init_seed = seed;
  return c;
}

std::vector<Measurement> random_measurements(std::size_t count, Rng& rng) {
  std::vector<Measurement> m(count);
  for (auto& v : m) v = {{rng.uniform(0.0, 64.0), rng.uniform(0.0, 64.0)}, rng.normal(-70.0, 8.0)};
  return m;
}

// Parameters at initialization have tiny residual branches; perturbing them
// exercises every path with gradients of comparable size.
void perturb(ParameterStore& store, Rng& rng) {
  for (auto& p : store.all())
    for (double& v : p.value.data()) v += 0.2 * rng.normal();
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed) {
  std::vector<GradCheckResult> results;
  const PowerNormalization norm{-70.0, 8.0};
  constexpr std::size_t kN = 5, kQ = 3;

  for (MaskType mask : {MaskType::None, MaskType::Causal}) {
    Rng rng(derive_seed(seed, 0x9c, static_cast<std::uint64_t>(mask)));
    StormModel model(tiny_config(mask, false, seed), norm);
    perturb(model.parameters(), rng);
    std::vector<Example> batch;
    for (int t = 0; t < 2; ++t) {
      const auto m = random_measurements(kN + 1, rng);
      Example ex;
      ex.features = build_features(std::span(m).first(kN), m[kN].location, model.config().features, norm);
      ex.target_db = m[kN].power_db;
      ex.n = kN;
      batch.push_back(std::move(ex));
    }
    if (mask == MaskType::None) {
      results.push_back(check_parameter_gradients("loss_mean_reduce", model.parameters(), [&](Context& ctx) {
        return loss_mean_reduce_graph(ctx, model, batch);
      }));
    } else {
      results.push_back(check_parameter_gradients("loss_causal", model.parameters(), [&](Context& ctx) {
        return loss_causal_graph(ctx, model, batch);
      }));
    }
  }

  {
    Rng rng(derive_seed(seed, 0xac));
    StormModel model(tiny_config(MaskType::Causal, true, seed), norm);
    perturb(model.parameters(), rng);
    std::vector<ActiveExample> batch;
    for (int t = 0; t < 2; ++t) {
      const auto m = random_measurements(kN + kQ + 1, rng);
      batch.push_back(build_active_example(std::span(m).first(kN), std::span(m).subspan(kN, kQ),
                                           m.back().location, m.back().power_db, model));
    }
    results.push_back(check_parameter_gradients("loss_active", model.parameters(), [&](Context& ctx) {
      return loss_active_graph(ctx, model, batch);
    }));
  }
  return results;
}

}  // namespace storm
