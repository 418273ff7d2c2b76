#pragma once

// Straight-line reference implementations used as test oracles. They share
// no code with the library beyond reading parameter values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "storm/active.hpp"
#include "storm/model.hpp"
#include "storm/random.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;  // [row][col]

inline Mat from(const storm::Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t(r, c);
  return m;
}

inline std::vector<double> column(const Mat& m, std::size_t c) {
  std::vector<double> v(m.size());
  for (std::size_t r = 0; r < m.size(); ++r) v[r] = m[r][c];
  return v;
}

inline std::vector<double> matvec(const Mat& w, const std::vector<double>& x) {
  std::vector<double> y(w.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) y[i] += w[i][j] * x[j];
  return y;
}

/// Attention output for one query: sum_m softmax_m(k(s_m) . q(x)) v(s_m),
/// over the reference columns listed in `keys`.
inline std::vector<double> attention_sum(const Mat& wv, const Mat& wk, const Mat& wq, const Mat& refs,
                                         const std::vector<double>& query, const std::vector<std::size_t>& keys) {
  const std::vector<double> q = matvec(wq, query);
  std::vector<double> logits;
  for (std::size_t m : keys) {
    const std::vector<double> k = matvec(wk, column(refs, m));
    double dot = 0.0;
    for (std::size_t i = 0; i < k.size(); ++i) dot += k[i] * q[i];
    logits.push_back(dot);
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) z += (l = std::exp(l - top));
  std::vector<double> out(wv.size(), 0.0);
  for (std::size_t j = 0; j < keys.size(); ++j) {
    const std::vector<double> v = matvec(wv, column(refs, keys[j]));
    for (std::size_t i = 0; i < v.size(); ++i) out[i] += logits[j] / z * v[i];
  }
  return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline std::vector<double> layer_norm(const std::vector<double>& x, const std::vector<double>& a,
                                      const std::vector<double>& b, double eps) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = a[i] * (x[i] - mean) / std::sqrt(var + eps) + b[i];
  return y;
}

struct Store {
  const storm::ParameterStore& s;
  Mat mat(storm::ParamId id) const { return from(s[id].value); }
  std::vector<double> vec(storm::ParamId id) const {
    const auto d = s[id].value.data();
    return {d.begin(), d.end()};
  }
};

inline std::vector<double> linear(const Store& st, const storm::LinearParams& p, const std::vector<double>& x) {
  std::vector<double> y = matvec(st.mat(p.weight), x);
  if (p.bias != storm::kNoNode) {
    const auto b = st.vec(p.bias);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  }
  return y;
}

inline std::vector<double> mlp(const Store& st, const storm::MlpParams& p, const std::vector<double>& x) {
  std::vector<double> h = linear(st, p.hidden, x);
  for (double& v : h) v = p.activation == storm::Activation::Gelu ? gelu(v) : std::max(0.0, v);
  return linear(st, p.output, h);
}

inline std::vector<double> ln(const Store& st, const storm::LayerNormParams& p, const std::vector<double>& x) {
  return layer_norm(x, st.vec(p.gain), st.vec(p.shift), p.epsilon);
}

inline std::vector<std::size_t> visible_keys(const storm::MaskKind& mask, std::size_t query, std::size_t columns) {
  std::vector<std::size_t> keys;
  for (std::size_t k = 0; k < columns; ++k)
    if (mask.allows(k, query)) keys.push_back(k);
  return keys;
}

/// Columns of a D x M matrix as vectors.
using Cols = std::vector<std::vector<double>>;

inline Mat to_mat(const Cols& cols) {
  Mat m(cols.front().size(), std::vector<double>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c)
    for (std::size_t r = 0; r < cols[c].size(); ++r) m[r][c] = cols[c][r];
  return m;
}

inline Cols multi_head(const Store& st, const storm::MultiHeadParams& p, const Cols& refs, const Cols& queries,
                       const storm::MaskKind& mask) {
  const Mat r = to_mat(refs);
  Cols out;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    std::vector<std::size_t> keys;
    if (mask.type == storm::MaskType::None) {
      for (std::size_t k = 0; k < refs.size(); ++k) keys.push_back(k);
    } else {
      keys = visible_keys(mask, q, refs.size());
    }
    std::vector<double> stacked;
    for (const auto& h : p.heads) {
      const auto part = attention_sum(st.mat(h.value), st.mat(h.key), st.mat(h.query), r, queries[q], keys);
      stacked.insert(stacked.end(), part.begin(), part.end());
    }
    out.push_back(linear(st, p.output, stacked));
  }
  return out;
}

inline Cols block(const Store& st, const storm::AttentionBlockParams& p, const Cols& x, const storm::MaskKind& mask) {
  Cols normed;
  for (const auto& c : x) normed.push_back(ln(st, p.ln1, c));
  const Cols att = multi_head(st, p.attention, normed, normed, mask);
  Cols out;
  for (std::size_t c = 0; c < x.size(); ++c) {
    std::vector<double> x1 = x[c];
    for (std::size_t i = 0; i < x1.size(); ++i) x1[i] += att[c][i];
    const std::vector<double> m = mlp(st, p.mlp, ln(st, p.ln2, x1));
    for (std::size_t i = 0; i < x1.size(); ++i) x1[i] += m[i];
    out.push_back(x1);
  }
  return out;
}

inline Cols columns_of(const storm::Tensor& t) {
  Cols c(t.cols(), std::vector<double>(t.rows()));
  for (std::size_t j = 0; j < t.cols(); ++j)
    for (std::size_t i = 0; i < t.rows(); ++i) c[j][i] = t(i, j);
  return c;
}

/// Normalized-unit outputs f_1..f_M of a model.
inline std::vector<double> forward(const storm::StormModel& model, const storm::Tensor& features,
                                   const storm::MaskKind& mask) {
  const Store st{model.parameters()};
  Cols h;
  for (const auto& c : columns_of(features)) h.push_back(linear(st, model.embed, c));
  for (const auto& b : model.blocks) h = block(st, b, h, mask);
  std::vector<double> f;
  for (const auto& c : h) f.push_back(linear(st, model.head, c)[0]);
  return f;
}

inline Cols encode(const storm::StormModel& model, const storm::Tensor& features, std::size_t n) {
  const Store st{model.parameters()};
  const auto mask = storm::MaskKind::modified_causal(n);
  Cols h;
  for (const auto& c : columns_of(features)) h.push_back(linear(st, model.embed, c));
  for (std::size_t b = 0; b < model.config().split(); ++b) h = block(st, model.blocks[b], h, mask);
  return h;
}

inline std::vector<double> scores(const storm::StormModel& model, const Cols& latent, const storm::Tensor& cands,
                                  std::size_t n) {
  const Store st{model.parameters()};
  const auto& p = *model.candidate;
  Cols memory;
  for (std::size_t i = 0; i < n; ++i) memory.push_back(ln(st, p.ln_memory, latent[i]));
  std::vector<double> logits;
  Cols es;
  for (const auto& c : columns_of(cands)) {
    std::vector<double> e = linear(st, p.embed, c);
    const auto m = mlp(st, p.embed_mlp, ln(st, p.ln_embed, e));
    for (std::size_t i = 0; i < e.size(); ++i) e[i] += m[i];
    es.push_back(e);
  }
  Cols queries;
  for (const auto& e : es) queries.push_back(ln(st, p.ln_query, e));
  const Cols att = multi_head(st, p.cross, memory, queries, storm::MaskKind::none());
  for (std::size_t q = 0; q < es.size(); ++q) {
    std::vector<double> e = es[q];
    for (std::size_t i = 0; i < e.size(); ++i) e[i] += att[q][i];
    const auto m = mlp(st, p.mlp, ln(st, p.ln_out, e));
    for (std::size_t i = 0; i < e.size(); ++i) e[i] += m[i];
    logits.push_back(linear(st, p.score, e)[0]);
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) z += (l = std::exp(l - top));
  for (double& l : logits) l /= z;
  return logits;
}

inline storm::Tensor hcat(const std::vector<storm::Tensor>& parts) {
  std::size_t cols = 0;
  for (const auto& p : parts) cols += p.cols();
  storm::Tensor out(parts.front().rows(), cols);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < p.rows(); ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out(r, c0 + c) = p(r, c);
    c0 += p.cols();
  }
  return out;
}

inline storm::Tensor vcat(const std::vector<storm::Tensor>& parts) {
  std::size_t rows = 0;
  for (const auto& p : parts) rows += p.rows();
  storm::Tensor out(rows, parts.front().cols());
  std::size_t r0 = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < p.rows(); ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out(r0 + r, c) = p(r, c);
    r0 += p.rows();
  }
  return out;
}

inline storm::Tensor random_tensor(std::size_t r, std::size_t c, storm::Rng& rng, double scale = 1.0) {
  storm::Tensor t(r, c);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

inline std::vector<storm::Measurement> random_measurements(std::size_t n, storm::Rng& rng, double side = 64.0) {
  std::vector<storm::Measurement> m(n);
  for (auto& v : m) v = {{rng.uniform(0.0, side), rng.uniform(0.0, side)}, rng.normal(-70.0, 8.0)};
  return m;
}

/// Adds noise to every parameter so residual branches are not near zero.
inline void perturb(storm::ParameterStore& store, storm::Rng& rng, double scale = 0.2) {
  for (auto& p : store.all())
    for (double& v : p.value.data()) v += scale * rng.normal();
}

}  // namespace oracle
