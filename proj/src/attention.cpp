#include "storm/attention.hpp"

#include <cmath>

#include "storm/random.hpp"

namespace storm {

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

Var maybe_dropout(Context& ctx, Var x) {
  if (ctx.dropout_rate <= 0.0 || ctx.dropout_rng == nullptr) return x;
  return dropout(x, ctx.dropout_rate, *ctx.dropout_rng);
}

}  // namespace

LinearParams make_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                         bool bias, Rng& rng, double init_gain) {
  LinearParams p;
  p.in = in;
  p.out = out;
  p.weight = store.add(name + ".weight", gaussian(out, in, init_gain / std::sqrt(static_cast<double>(in)), rng));
  if (bias) p.bias = store.add(name + ".bias", Tensor(out, 1));
  return p;
}

LayerNormParams make_layer_norm(ParameterStore& store, const std::string& name, std::size_t dim, double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("layer norm epsilon must be positive");
  LayerNormParams p;
  p.gain = store.add(name + ".gain", Tensor(dim, 1, 1.0));
  p.shift = store.add(name + ".shift", Tensor(dim, 1));
  p.epsilon = epsilon;
  return p;
}

AttentionHeadParams make_attention_head(ParameterStore& store, const std::string& name, std::size_t in,
                                        std::size_t query_in, std::size_t key_dim, std::size_t value_dim,
                                        Rng& rng) {
  AttentionHeadParams h;
  h.key_dim = key_dim;
  h.value_dim = value_dim;
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(in));
  const double q_scale = 1.0 / std::sqrt(static_cast<double>(query_in));
  h.value = store.add(name + ".value", gaussian(value_dim, in, in_scale, rng));
  h.key = store.add(name + ".key", gaussian(key_dim, in, in_scale, rng));
  h.query = store.add(name + ".query",
                      gaussian(key_dim, query_in, q_scale / std::sqrt(static_cast<double>(key_dim)), rng));
  return h;
}

MultiHeadParams make_multi_head(ParameterStore& store, const std::string& name, std::size_t dim,
                                std::size_t heads, Rng& rng, double output_gain) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("embedding dimension " + std::to_string(dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t head_dim = dim / heads;
  MultiHeadParams p;
  for (std::size_t h = 0; h < heads; ++h) {
    p.heads.push_back(
        make_attention_head(store, name + ".head" + std::to_string(h), dim, dim, head_dim, head_dim, rng));
  }
  p.output = make_linear(store, name + ".out", dim, dim, true, rng, output_gain);
  return p;
}

AttentionBlockParams make_attention_block(ParameterStore& store, const std::string& name, std::size_t dim,
                                          std::size_t heads, std::size_t mlp_hidden, Activation activation,
                                          Rng& rng, double residual_gain) {
  AttentionBlockParams b;
  b.dim = dim;
  b.ln1 = make_layer_norm(store, name + ".ln1", dim);
  b.attention = make_multi_head(store, name + ".attn", dim, heads, rng, residual_gain);
  b.ln2 = make_layer_norm(store, name + ".ln2", dim);
  b.mlp.hidden = make_linear(store, name + ".mlp.hidden", dim, mlp_hidden, true, rng);
  b.mlp.output = make_linear(store, name + ".mlp.out", mlp_hidden, dim, true, rng, residual_gain);
  b.mlp.activation = activation;
  return b;
}

Var param(Context& ctx, ParamId id) { return ctx.tape.parameter(ctx.store, id); }

Var linear(Context& ctx, const LinearParams& p, Var x) {
  if (x.rows() != p.in) {
    throw DimensionError("linear layer expects " + std::to_string(p.in) + " rows, got " +
                         x.value().shape_string());
  }
  Var y = matmul(param(ctx, p.weight), x);
  if (p.bias != kNoNode) y = add_column_bias(y, param(ctx, p.bias));
  return y;
}

Var layer_norm(Context& ctx, const LayerNormParams& p, Var x) {
  return layer_norm_columns(x, param(ctx, p.gain), param(ctx, p.shift), p.epsilon);
}

Var mlp(Context& ctx, const MlpParams& p, Var x) {
  return linear(ctx, p.output, activate(linear(ctx, p.hidden, x), p.activation));
}

Var attend(Context& ctx, const AttentionHeadParams& head, Var refs, Var queries, const MaskKind& mask) {
  if (refs.cols() == 0) throw ContractError("attention over an empty reference set");
  if (mask.type != MaskType::None && refs.cols() != queries.cols()) {
    throw ContractError("masked attention requires self-attention");
  }
  mask.validate(queries.cols());
  Var values = matmul(param(ctx, head.value), refs);
  Var keys = matmul(param(ctx, head.key), refs);
  Var q = matmul(param(ctx, head.query), queries);
  Var weights = softmax_columns(matmul_tn(keys, q), mask);
  return matmul(values, weights);
}

Var cross_attention(Context& ctx, const AttentionHeadParams& head, Var refs, Var query) {
  if (query.cols() != 1) throw DimensionError("cross_attention takes a single query column");
  return attend(ctx, head, refs, query);
}

Var self_attention(Context& ctx, const AttentionHeadParams& head, Var x, const MaskKind& mask) {
  return attend(ctx, head, x, x, mask);
}

Var multi_head(Context& ctx, const MultiHeadParams& p, Var refs, Var queries, const MaskKind& mask) {
  std::vector<Var> outputs;
  outputs.reserve(p.heads.size());
  for (const auto& head : p.heads) outputs.push_back(attend(ctx, head, refs, queries, mask));
  Var stacked = outputs.size() == 1 ? outputs.front() : concat_rows(outputs);
  return linear(ctx, p.output, stacked);
}

Var attention_block(Context& ctx, const AttentionBlockParams& p, Var x, const MaskKind& mask) {
  if (x.rows() != p.dim) {
    throw DimensionError("attention block of width " + std::to_string(p.dim) + " got input " +
                         x.value().shape_string());
  }
  Var normed = layer_norm(ctx, p.ln1, x);
  Var x1 = add(x, maybe_dropout(ctx, multi_head(ctx, p.attention, normed, normed, mask)));
  return add(x1, maybe_dropout(ctx, mlp(ctx, p.mlp, layer_norm(ctx, p.ln2, x1))));
}

}  // namespace storm
