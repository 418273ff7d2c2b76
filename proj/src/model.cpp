#include "storm/model.hpp"

#include <cmath>

#include "storm/config.hpp"
#include "storm/random.hpp"

namespace storm {

namespace {

const char* mask_name(MaskType m) {
  switch (m) {
    case MaskType::None:
      return "none";
    case MaskType::Causal:
      return "causal";
    case MaskType::ModifiedCausal:
      return "modified_causal";
  }
  return "?";
}

MaskType parse_mask(const std::string& s) {
  if (s == "none" || s == "mean_reduce") return MaskType::None;
  if (s == "causal") return MaskType::Causal;
  throw ConfigError("model.mask must be 'causal' or 'none', got '" + s + "'");
}

}  // namespace

void ModelConfig::validate() const {
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
    throw ConfigError("embedding dimension " + std::to_string(embed_dim) + " must be divisible by head count " +
                      std::to_string(heads));
  }
  if (blocks == 0) throw ConfigError("a model needs at least one attention block");
  if (mlp_multiplier == 0) throw ConfigError("mlp_multiplier must be positive");
  if (mask == MaskType::ModifiedCausal) throw ConfigError("modified-causal masking is chosen per call, not per model");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  if (encoder_blocks > blocks) throw ConfigError("encoder_blocks exceeds the block count");
  if (active && split() == 0) throw ConfigError("active sensing needs at least one encoder block");
  features.validate();
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {
      {"embed_dim", std::to_string(embed_dim)},
      {"heads", std::to_string(heads)},
      {"blocks", std::to_string(blocks)},
      {"mlp_multiplier", std::to_string(mlp_multiplier)},
      {"mask", mask_name(mask)},
      {"polar_features", features.polar ? "true" : "false"},
      {"length_scale", format_double(features.length_scale)},
      {"dropout", format_double(dropout)},
      {"activation", activation == Activation::Gelu ? "gelu" : "relu"},
      {"active", active ? "true" : "false"},
      {"encoder_blocks", std::to_string(encoder_blocks)},
      {"init_seed", std::to_string(init_seed)},
  };
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& values) {
  return from_map(values, "model", ModelConfig{});
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& values, const std::string& section,
                                    ModelConfig c) {
  SectionReader r(section, values);
  c.embed_dim = r.get_size("embed_dim", c.embed_dim);
  c.heads = r.get_size("heads", c.heads);
  c.blocks = r.get_size("blocks", c.blocks);
  c.mlp_multiplier = r.get_size("mlp_multiplier", c.mlp_multiplier);
  c.mask = parse_mask(r.get_string("mask", mask_name(c.mask)));
  c.features.polar = r.get_bool("polar_features", c.features.polar);
  c.features.length_scale = r.get_double("length_scale", c.features.length_scale);
  c.dropout = r.get_double("dropout", c.dropout);
  const std::string act = r.get_string("activation", "gelu");
  if (act == "gelu") {
    c.activation = Activation::Gelu;
  } else if (act == "relu") {
    c.activation = Activation::Relu;
  } else {
    throw ConfigError("model.activation must be gelu or relu, got '" + act + "'");
  }
  c.active = r.get_bool("active", c.active);
  c.encoder_blocks = r.get_size("encoder_blocks", c.encoder_blocks);
  c.init_seed = r.get_u64("init_seed", c.init_seed);
  r.finish();
  c.validate();
  return c;
}

StormModel::StormModel(ModelConfig config, PowerNormalization norm) : normalization(norm), config_(config) {
  config_.validate();
  Rng rng(derive_seed(config_.init_seed, 0x5707));
  const std::size_t d = config_.embed_dim;
  const std::size_t hidden = config_.mlp_multiplier * d;
  // Residual branches start small so the stack begins near the identity.
  const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.blocks));
  embed = make_linear(store_, "embed", config_.features.dim(), d, true, rng);
  for (std::size_t b = 0; b < config_.blocks; ++b) {
    blocks.push_back(make_attention_block(store_, "block" + std::to_string(b), d, config_.heads, hidden,
                                          config_.activation, rng, residual_gain));
  }
  head = make_linear(store_, "head", d, 1, true, rng);
  if (config_.active) {
    CandidateHeadParams c;
    c.embed = make_linear(store_, "cand.embed", config_.features.geometric_dim(), d, true, rng);
    c.ln_embed = make_layer_norm(store_, "cand.ln_embed", d);
    c.embed_mlp.hidden = make_linear(store_, "cand.embed_mlp.hidden", d, hidden, true, rng);
    c.embed_mlp.output = make_linear(store_, "cand.embed_mlp.out", hidden, d, true, rng, residual_gain);
    c.embed_mlp.activation = config_.activation;
    c.ln_query = make_layer_norm(store_, "cand.ln_query", d);
    c.ln_memory = make_layer_norm(store_, "cand.ln_memory", d);
    c.cross = make_multi_head(store_, "cand.cross", d, 1, rng, residual_gain);
    c.ln_out = make_layer_norm(store_, "cand.ln_out", d);
    c.mlp.hidden = make_linear(store_, "cand.mlp.hidden", d, hidden, true, rng);
    c.mlp.output = make_linear(store_, "cand.mlp.out", hidden, d, true, rng, residual_gain);
    c.mlp.activation = config_.activation;
    c.score = make_linear(store_, "cand.score", d, 1, true, rng);
    candidate = std::move(c);
  }
}

MaskKind model_mask(const StormModel& model, std::size_t) {
  return model.config().mask == MaskType::Causal ? MaskKind::causal() : MaskKind::none();
}

Var embed_features(Context& ctx, const StormModel& model, Var features) {
  if (features.rows() != model.config().features.dim()) {
    throw DimensionError("model expects " + std::to_string(model.config().features.dim()) +
                         " feature rows, got " + features.value().shape_string());
  }
  if (features.cols() == 0) throw ContractError("forward needs at least one measurement");
  return linear(ctx, model.embed, features);
}

Var run_blocks(Context& ctx, const StormModel& model, Var hidden, std::size_t first, std::size_t last,
               const MaskKind& mask) {
  for (std::size_t b = first; b < last; ++b) hidden = attention_block(ctx, model.blocks.at(b), hidden, mask);
  return hidden;
}

Var output_head(Context& ctx, const StormModel& model, Var hidden) { return linear(ctx, model.head, hidden); }

Var forward_graph(Context& ctx, const StormModel& model, Var features, const MaskKind& mask) {
  Var h = embed_features(ctx, model, features);
  h = run_blocks(ctx, model, h, 0, model.blocks.size(), mask);
  return output_head(ctx, model, h);
}

std::vector<double> forward(const StormModel& model, const FeatureMatrix& features) {
  Tape tape(false);
  Context ctx{tape, model.parameters()};
  Var out = forward_graph(ctx, model, tape.constant(features.values), model_mask(model, features.columns()));
  std::vector<double> f(out.value().data().begin(), out.value().data().end());
  for (double& v : f) v = model.normalization.denormalize(v);
  return f;
}

double estimate(const StormModel& model, std::span<const Measurement> measurements, Location target) {
  FeatureMatrix fm = build_features(measurements, target, model.config().features, model.normalization);
  const std::vector<double> f = forward(model, fm);
  if (model.config().mask == MaskType::Causal) return f.back();
  double s = 0.0;
  for (double v : f) s += v;
  return s / static_cast<double>(f.size());
}

Var causal_loss_term(Context& ctx, const StormModel& model, const Example& example, std::size_t batch_size) {
  const std::size_t n = example.features.columns();
  Var f = forward_graph(ctx, model, ctx.tape.constant(example.features.values), MaskKind::causal());
  const double y = model.normalization.normalize(example.target_db);
  return scale(sum(square(add_scalar(f, -y))), 1.0 / static_cast<double>(batch_size * n));
}

Var mean_reduce_loss_term(Context& ctx, const StormModel& model, const Example& example, std::size_t batch_size) {
  Var f = forward_graph(ctx, model, ctx.tape.constant(example.features.values), MaskKind::none());
  const double y = model.normalization.normalize(example.target_db);
  return scale(square(add_scalar(mean(f), -y)), 1.0 / static_cast<double>(batch_size));
}

Var loss_causal_graph(Context& ctx, const StormModel& model, std::span<const Example> batch) {
  if (batch.empty()) throw std::invalid_argument("loss over an empty batch");
  const std::size_t n = batch.front().features.columns();
  Var total;
  for (const auto& ex : batch) {
    if (ex.features.columns() != n) throw ContractError("causal loss needs every example to share N");
    Var term = causal_loss_term(ctx, model, ex, batch.size());
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

Var loss_mean_reduce_graph(Context& ctx, const StormModel& model, std::span<const Example> batch) {
  if (batch.empty()) throw std::invalid_argument("loss over an empty batch");
  Var total;
  for (const auto& ex : batch) {
    Var term = mean_reduce_loss_term(ctx, model, ex, batch.size());
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

double loss_causal(const StormModel& model, std::span<const Example> batch) {
  Tape tape(false);
  Context ctx{tape, model.parameters()};
  return loss_causal_graph(ctx, model, batch).value().item();
}

double loss_mean_reduce(const StormModel& model, std::span<const Example> batch) {
  Tape tape(false);
  Context ctx{tape, model.parameters()};
  return loss_mean_reduce_graph(ctx, model, batch).value().item();
}

std::size_t count_parameters(const StormModel& model) { return model.parameters().scalar_count(); }

std::size_t count_block_parameters(const StormModel& model) {
  std::size_t n = 0;
  for (const auto& p : model.parameters().all())
    if (p.name.rfind("block", 0) == 0) n += p.value.size();
  return n;
}

}  // namespace storm
