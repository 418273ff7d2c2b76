#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "storm/autodiff.hpp"

namespace storm {

class Rng;

struct LinearParams {
  ParamId weight = kNoNode;  // out x in
  ParamId bias = kNoNode;    // out x 1, optional
  std::size_t in = 0;
  std::size_t out = 0;
};

struct LayerNormParams {
  ParamId gain = kNoNode;   // D x 1
  ParamId shift = kNoNode;  // D x 1
  double epsilon = 1e-5;
};

/// Linear value/key/query maps of one head. The 1/sqrt(key_dim) logit scale
/// lives inside the query weights (it is applied at initialization only).
struct AttentionHeadParams {
  ParamId value = kNoNode;  // value_dim x in
  ParamId key = kNoNode;    // key_dim x in
  ParamId query = kNoNode;  // key_dim x query_in
  std::size_t key_dim = 0;
  std::size_t value_dim = 0;
};

struct MultiHeadParams {
  std::vector<AttentionHeadParams> heads;
  LinearParams output;  // (H * value_dim) -> D, with bias
};

struct MlpParams {
  LinearParams hidden;
  LinearParams output;
  Activation activation = Activation::Gelu;
};

struct AttentionBlockParams {
  std::size_t dim = 0;
  LayerNormParams ln1;
  MultiHeadParams attention;
  LayerNormParams ln2;
  MlpParams mlp;
};

/// Everything a forward pass needs besides its inputs.
struct Context {
  Tape& tape;
  const ParameterStore& store;
  double dropout_rate = 0.0;
  Rng* dropout_rng = nullptr;
};

// Construction. Names are prefixes for the stored parameter arrays.
LinearParams make_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                         bool bias, Rng& rng, double init_gain = 1.0);
LayerNormParams make_layer_norm(ParameterStore& store, const std::string& name, std::size_t dim,
                                double epsilon = 1e-5);
AttentionHeadParams make_attention_head(ParameterStore& store, const std::string& name, std::size_t in,
                                        std::size_t query_in, std::size_t key_dim, std::size_t value_dim,
                                        Rng& rng);
/// H heads over a D-dimensional stream; each head uses D/H key and value
/// dimensions. Throws ConfigError if D is not divisible by H.
MultiHeadParams make_multi_head(ParameterStore& store, const std::string& name, std::size_t dim,
                                std::size_t heads, Rng& rng, double output_gain = 1.0);
AttentionBlockParams make_attention_block(ParameterStore& store, const std::string& name, std::size_t dim,
                                          std::size_t heads, std::size_t mlp_hidden, Activation activation,
                                          Rng& rng, double residual_gain = 1.0);

Var param(Context& ctx, ParamId id);
Var linear(Context& ctx, const LinearParams& p, Var x);
Var layer_norm(Context& ctx, const LayerNormParams& p, Var x);
Var mlp(Context& ctx, const MlpParams& p, Var x);

/// Columns of `queries` attend over columns of `refs`:
/// V * softmax(K^T Q), with V = W_v refs, K = W_k refs, Q = W_q queries.
Var attend(Context& ctx, const AttentionHeadParams& head, Var refs, Var queries, const MaskKind& mask = {});
/// Single query vector against a reference matrix.
Var cross_attention(Context& ctx, const AttentionHeadParams& head, Var refs, Var query);
Var self_attention(Context& ctx, const AttentionHeadParams& head, Var x, const MaskKind& mask);
/// Heads run on the same inputs, outputs stacked by rows and projected.
Var multi_head(Context& ctx, const MultiHeadParams& p, Var refs, Var queries, const MaskKind& mask = {});
/// X' = X + A(LN1(X)); out = X' + MLP(LN2(X')).
Var attention_block(Context& ctx, const AttentionBlockParams& p, Var x, const MaskKind& mask);

}  // namespace storm
