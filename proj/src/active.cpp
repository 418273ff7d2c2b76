#include "storm/active.hpp"

#include <algorithm>
#include <memory>

#include "storm/errors.hpp"
#include "storm/random.hpp"

namespace storm {

namespace {

const CandidateHeadParams& candidate_head(const StormModel& model) {
  if (!model.candidate) throw ContractError("model was built without the active-sensing branch");
  return *model.candidate;
}

}  // namespace

CandidateSet make_candidate_set(std::span<const Location> locations, const RotationFrame& frame, Location target,
                                const FeatureConfig& config) {
  CandidateSet set;
  set.locations.assign(locations.begin(), locations.end());
  set.encoded = build_candidate_features(locations, frame, target, config);
  return set;
}

Var encode_measurements(Context& ctx, const StormModel& model, Var features, std::size_t n) {
  if (n == 0) throw ContractError("encoding needs at least one measurement");
  const MaskKind mask = MaskKind::modified_causal(n);
  mask.validate(features.cols());
  Var h = embed_features(ctx, model, features);
  return run_blocks(ctx, model, h, 0, model.config().split(), mask);
}

Var decode_estimates(Context& ctx, const StormModel& model, Var latent, std::size_t n) {
  const MaskKind mask = MaskKind::modified_causal(n);
  mask.validate(latent.cols());
  Var h = run_blocks(ctx, model, latent, model.config().split(), model.blocks.size(), mask);
  return output_head(ctx, model, h);
}

Var score_candidates(Context& ctx, const StormModel& model, Var latent, Var candidates, std::size_t n) {
  const CandidateHeadParams& p = candidate_head(model);
  if (candidates.cols() == 0) throw ContractError("no candidate locations to score");
  if (n == 0 || n > latent.cols()) throw ContractError("score_candidates needs 1 <= N <= latent columns");
  Var memory = layer_norm(ctx, p.ln_memory, latent.cols() == n ? latent : slice_cols(latent, 0, n));
  Var e = linear(ctx, p.embed, candidates);
  e = add(e, mlp(ctx, p.embed_mlp, layer_norm(ctx, p.ln_embed, e)));
  e = add(e, multi_head(ctx, p.cross, memory, layer_norm(ctx, p.ln_query, e)));
  e = add(e, mlp(ctx, p.mlp, layer_norm(ctx, p.ln_out, e)));
  Var logits = linear(ctx, p.score, e);  // 1 x Q
  return softmax_columns(transpose(logits));
}

Var active_loss_term(Context& ctx, const StormModel& model, const ActiveExample& example, std::size_t batch_size) {
  const std::size_t n = example.n;
  const std::size_t total = example.features.columns();
  if (n == 0 || total <= n) throw ContractError("active example needs N >= 1 measurements and Q >= 1 candidates");
  if (example.candidates.cols() != total - n) throw DimensionError("candidate matrix does not match Q");
  const double y = model.normalization.normalize(example.target_db);
  Var latent = encode_measurements(ctx, model, ctx.tape.constant(example.features.values), n);
  Var f = decode_estimates(ctx, model, latent, n);
  Var g = score_candidates(ctx, model, latent, ctx.tape.constant(example.candidates), n);
  Var prefix = add_scalar(slice_cols(f, 0, n), -y);
  Var combined = matmul(slice_cols(f, n, total - n), g);  // 1 x 1
  Var term = add(scale(sum(square(prefix)), 0.5 / static_cast<double>(n)),
                 scale(square(add_scalar(combined, -y)), 0.5));
  return scale(term, 1.0 / static_cast<double>(batch_size));
}

Var loss_active_graph(Context& ctx, const StormModel& model, std::span<const ActiveExample> batch) {
  if (batch.empty()) throw std::invalid_argument("loss over an empty batch");
  Var total;
  for (const auto& ex : batch) {
    Var term = active_loss_term(ctx, model, ex, batch.size());
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

double loss_active(const StormModel& model, std::span<const ActiveExample> batch) {
  Tape tape(false);
  Context ctx{tape, model.parameters()};
  return loss_active_graph(ctx, model, batch).value().item();
}

ActiveExample build_active_example(std::span<const Measurement> measurements,
                                   std::span<const Measurement> candidates, Location target, double target_db,
                                   const StormModel& model) {
  if (measurements.empty()) throw ContractError("active example needs at least one measurement");
  const FeatureConfig& fc = model.config().features;
  const RotationFrame frame = rotation_frame(measurements, target);
  std::vector<Measurement> all(measurements.begin(), measurements.end());
  all.insert(all.end(), candidates.begin(), candidates.end());
  std::vector<Location> locations;
  locations.reserve(candidates.size());
  for (const auto& c : candidates) locations.push_back(c.location);
  ActiveExample ex;
  ex.features = build_features(all, target, frame, fc, model.normalization);
  ex.candidates = locations.empty() ? Tensor(fc.geometric_dim(), 0)
                                   : build_candidate_features(locations, frame, target, fc);
  ex.n = measurements.size();
  ex.target_db = target_db;
  return ex;
}

ActiveOutput active_forward(const StormModel& model, const ActiveExample& example) {
  Tape tape(false);
  Context ctx{tape, model.parameters()};
  Var latent = encode_measurements(ctx, model, tape.constant(example.features.values), example.n);
  Var f = decode_estimates(ctx, model, latent, example.n);
  ActiveOutput out;
  for (double v : f.value().data()) out.estimates.push_back(model.normalization.denormalize(v));
  if (example.candidates.cols() > 0) {
    Var g = score_candidates(ctx, model, latent, tape.constant(example.candidates), example.n);
    out.scores.assign(g.value().data().begin(), g.value().data().end());
  }
  return out;
}

std::vector<double> quality_scores(const StormModel& model, std::span<const Measurement> measurements,
                                   std::span<const Location> candidates, Location target) {
  if (measurements.empty()) throw ContractError("quality scores need at least one measurement");
  const FeatureConfig& fc = model.config().features;
  FeatureMatrix fm = build_features(measurements, target, fc, model.normalization);
  Tensor c = build_candidate_features(candidates, fm.frame, target, fc);
  Tape tape(false);
  Context ctx{tape, model.parameters()};
  Var latent = encode_measurements(ctx, model, tape.constant(fm.values), measurements.size());
  Var g = score_candidates(ctx, model, latent, tape.constant(std::move(c)), measurements.size());
  return {g.value().data().begin(), g.value().data().end()};
}

std::size_t argmax_first(std::span<const double> values) {
  if (values.empty()) throw ContractError("argmax of an empty list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

std::size_t select_next(const StormModel& model, std::span<const Measurement> measurements,
                        std::span<const Location> candidates, Location target) {
  const std::vector<double> g = quality_scores(model, measurements, candidates, target);
  return argmax_first(g);
}

double refined_estimate(const StormModel& model, std::span<const Measurement> measurements,
                        const Measurement& added, Location target) {
  if (measurements.empty()) throw ContractError("refinement needs at least one measurement");
  const RotationFrame frame = rotation_frame(measurements, target);
  std::vector<Measurement> all(measurements.begin(), measurements.end());
  all.push_back(added);
  FeatureMatrix fm = build_features(all, target, frame, model.config().features, model.normalization);
  Tape tape(false);
  Context ctx{tape, model.parameters()};
  Var f = forward_graph(ctx, model, tape.constant(fm.values), MaskKind::modified_causal(measurements.size()));
  return model.normalization.denormalize(f.value().data().back());
}

void ActiveSamplingConfig::validate() const {
  if (!(patch_side > 0.0)) throw ConfigError("patch side must be positive");
  if (n_min == 0 || n_min > n_max) throw ConfigError("need 1 <= n_min <= n_max");
  if (candidates == 0) throw ConfigError("active training needs at least one candidate");
}

BatchFn make_active_batches(std::span<const MeasurementSet> sets, const ActiveSamplingConfig& sampling,
                            const StormModel& model, std::size_t batch_size) {
  sampling.validate();
  candidate_head(model);
  auto sampler = std::make_shared<SceneSampler>(sets);
  const StormModel* m = &model;
  return [sampler, sampling, m, batch_size](std::size_t, Rng& rng) {
    auto examples = std::make_shared<std::vector<ActiveExample>>();
    const std::size_t n = sampling.n_min + rng.index(sampling.n_max - sampling.n_min + 1);
    for (std::size_t i = 0; i < batch_size; ++i) {
      MeasurementSet patch = sampler->patch(sampling.patch_side, sampling.aligned, n + 2, rng);
      SceneDraw draw = draw_scene(patch, n, rng);
      std::span<Measurement> rest(draw.rest);
      rng.shuffle(rest);
      const std::size_t q = std::min(sampling.candidates, draw.rest.size());
      examples->push_back(build_active_example(draw.inputs, rest.first(q), draw.target.location,
                                               draw.target.power_db, *m));
    }
    Batch batch;
    batch.size = batch_size;
    batch.term = [examples, m, batch_size](Context& ctx, std::size_t i) {
      return active_loss_term(ctx, *m, (*examples)[i], batch_size);
    };
    return batch;
  };
}

}  // namespace storm
