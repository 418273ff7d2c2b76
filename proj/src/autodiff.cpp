#include "storm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "storm/random.hpp"

namespace storm {

void MaskKind::validate(std::size_t columns) const {
  if (type == MaskType::ModifiedCausal && measurements > columns) {
    throw ContractError("modified-causal mask splits at " + std::to_string(measurements) +
                        " but only " + std::to_string(columns) + " columns are present");
  }
}

std::string MaskKind::describe() const {
  switch (type) {
    case MaskType::None:
      return "none";
    case MaskType::Causal:
      return "causal";
    case MaskType::ModifiedCausal:
      return "modified_causal(" + std::to_string(measurements) + ")";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// ParameterStore

ParamId ParameterStore::add(std::string name, Tensor value) {
  if (find(name) != kNoNode) throw ContractError("duplicate parameter name " + name);
  params_.push_back({std::move(name), std::move(value)});
  return params_.size() - 1;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Gradients ParameterStore::zero_gradients() const {
  Gradients g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.emplace_back(p.value.rows(), p.value.cols());
  return g;
}

ParamId ParameterStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  return kNoNode;
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(*this);
}

void Tape::check_owner(Var v) const {
  if (v.tape() != this || v.id() >= nodes_.size()) throw ContractError("Var belongs to another tape");
}

const Tape::Node& Tape::node(Var v) const {
  check_owner(v);
  return nodes_[v.id()];
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = recording_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const ParameterStore& store, ParamId id) {
  if (id >= store.size()) throw ContractError("unknown parameter id " + std::to_string(id));
  if (param_nodes_.size() < store.size()) param_nodes_.resize(store.size(), kNoNode);
  if (param_nodes_[id] != kNoNode) return Var(this, param_nodes_[id]);
  Node n;
  n.external = &store[id].value;
  n.needs_grad = recording_;
  n.param = id;
  nodes_.push_back(std::move(n));
  param_nodes_[id] = nodes_.size() - 1;
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  if (swept_) throw ContractError("tape already swept; start a new tape");
  Node n;
  n.value = std::move(value);
  bool any = false;
  for (const Var& in : inputs) {
    check_owner(in);
    any = any || nodes_[in.id()].needs_grad;
  }
  if (recording_ && any) {
    n.needs_grad = true;
    n.backward = std::move(backward);
    n.inputs.reserve(inputs.size());
    for (const Var& in : inputs) n.inputs.push_back(in.id());
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::add_gradient(Var v, const Tensor& grad) {
  check_owner(v);
  if (!nodes_[v.id()].needs_grad) return;
  Tensor& g = grads_[v.id()];
  if (g.size() == 0 && value(v).size() != 0) {
    g = grad;
    if (!g.same_shape(value(v))) throw DimensionError("gradient shape mismatch " + grad.shape_string());
  } else {
    g += grad;
  }
}

void Tape::backward(Var loss) {
  check_owner(loss);
  if (value(loss).size() != 1) {
    throw ContractError("backward() needs a scalar loss, got " + value(loss).shape_string());
  }
  if (swept_) throw ContractError("tape already swept");
  if (!recording_) throw ContractError("tape was not recording");
  swept_ = true;
  grads_.assign(nodes_.size(), Tensor());
  if (!nodes_[loss.id()].needs_grad) return;
  grads_[loss.id()] = Tensor::scalar(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || grads_[i].size() == 0) continue;
    n.backward(*this, grads_[i]);
  }
}

Tensor Tape::gradient(Var v) const {
  check_owner(v);
  if (v.id() < grads_.size() && grads_[v.id()].size() != 0) return grads_[v.id()];
  const Tensor& x = value(v);
  return Tensor(x.rows(), x.cols());
}

void Tape::accumulate_into(Gradients& grads) const {
  for (std::size_t id = 0; id < param_nodes_.size(); ++id) {
    const std::size_t node_id = param_nodes_[id];
    if (node_id == kNoNode || node_id >= grads_.size() || grads_[node_id].size() == 0) continue;
    if (id >= grads.size()) throw ContractError("gradient buffer smaller than parameter store");
    grads[id] += grads_[node_id];
  }
}

// ---------------------------------------------------------------------------
// Kernels

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape_string() + " * " + b.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c(m, n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + a.shape_string() + "^T * " + b.shape_string());
  }
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor c(m, n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  // Row i of c accumulates over p in increasing order, entry by entry, so
  // each output entry is independent of every other column of b.
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = pa[p * m + i];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor t(n, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

Tensor softmax_columns(const Tensor& a, const MaskKind& mask) {
  const std::size_t m = a.rows(), n = a.cols();
  if (mask.type != MaskType::None && m != n) {
    throw DimensionError("masked softmax needs a square logit matrix, got " + a.shape_string());
  }
  mask.validate(n);
  Tensor y(m, n);
  std::vector<double> col_max(n, -std::numeric_limits<double>::infinity());
  std::vector<double> col_sum(n, 0.0);
  if (mask.type == MaskType::None) {
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) col_max[c] = std::max(col_max[c], a(r, c));
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        const double e = std::exp(a(r, c) - col_max[c]);
        y(r, c) = e;
        col_sum[c] += e;
      }
  } else {
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c)
        if (mask.allows(r, c)) col_max[c] = std::max(col_max[c], a(r, c));
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        if (!mask.allows(r, c)) continue;
        const double e = std::exp(a(r, c) - col_max[c]);
        y(r, c) = e;
        col_sum[c] += e;
      }
  }
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) y(r, c) /= col_sum[c];
  return y;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Primitives

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("use of an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) throw ContractError("operands live on different tapes");
  return tape_of(a);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": " + a.shape_string() + " vs " + b.shape_string());
  }
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor y(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(a[i]);
  return y;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x * (1.0 / std::numbers::sqrt2)); }
double normal_pdf(double x) { return std::exp(-0.5 * x * x) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2; }

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(kernels::matmul(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.needs_grad(a)) tp.add_gradient(a, kernels::matmul_nt(g, b.value()));
    if (tp.needs_grad(b)) tp.add_gradient(b, kernels::matmul_tn(a.value(), g));
  });
}

Var matmul_tn(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(kernels::matmul_tn(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.needs_grad(a)) tp.add_gradient(a, kernels::matmul_nt(b.value(), g));
    if (tp.needs_grad(b)) tp.add_gradient(b, kernels::matmul(a.value(), g));
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  return t.record(kernels::transpose(a.value()), {a},
                  [a](Tape& tp, const Tensor& g) { tp.add_gradient(a, kernels::transpose(g)); });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor y = a.value();
  y += b.value();
  return t.record(std::move(y), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.add_gradient(a, g);
    tp.add_gradient(b, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("sub", a.value(), b.value());
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] - z[i];
  return t.record(std::move(y), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.add_gradient(a, g);
    if (tp.needs_grad(b)) tp.add_gradient(b, map(g, [](double v) { return -v; }));
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("mul", a.value(), b.value());
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
  return t.record(std::move(y), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    const Tensor& x = a.value();
    const Tensor& z = b.value();
    if (tp.needs_grad(a)) {
      Tensor d(g.rows(), g.cols());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * z[i];
      tp.add_gradient(a, d);
    }
    if (tp.needs_grad(b)) {
      Tensor d(g.rows(), g.cols());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * x[i];
      tp.add_gradient(b, d);
    }
  });
}

Var square(Var a) { return mul(a, a); }

Var scale(Var a, double factor) {
  Tape& t = tape_of(a);
  return t.record(map(a.value(), [factor](double v) { return v * factor; }), {a},
                  [a, factor](Tape& tp, const Tensor& g) {
                    tp.add_gradient(a, map(g, [factor](double v) { return v * factor; }));
                  });
}

Var add_scalar(Var a, double offset) {
  Tape& t = tape_of(a);
  return t.record(map(a.value(), [offset](double v) { return v + offset; }), {a},
                  [a](Tape& tp, const Tensor& g) { tp.add_gradient(a, g); });
}

Var add_column_bias(Var x, Var bias) {
  Tape& t = tape_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rows() != xv.rows() || bv.cols() != 1) {
    throw DimensionError("add_column_bias: " + xv.shape_string() + " + " + bv.shape_string());
  }
  Tensor y = xv;
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += bv[r];
  return t.record(std::move(y), {x, bias}, [x, bias](Tape& tp, const Tensor& g) {
    tp.add_gradient(x, g);
    if (tp.needs_grad(bias)) {
      Tensor d(g.rows(), 1);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) d[r] += g(r, c);
      tp.add_gradient(bias, d);
    }
  });
}

Var exp(Var a) {
  Tape& t = tape_of(a);
  Tensor y = map(a.value(), [](double v) { return std::exp(v); });
  Tensor saved = y;
  return t.record(std::move(y), {a}, [a, saved = std::move(saved)](Tape& tp, const Tensor& g) {
    Tensor d(g.rows(), g.cols());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * saved[i];
    tp.add_gradient(a, d);
  });
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  return t.record(map(a.value(), [](double v) { return v * normal_cdf(v); }), {a},
                  [a](Tape& tp, const Tensor& g) {
                    const Tensor& x = a.value();
                    Tensor d(g.rows(), g.cols());
                    for (std::size_t i = 0; i < d.size(); ++i)
                      d[i] = g[i] * (normal_cdf(x[i]) + x[i] * normal_pdf(x[i]));
                    tp.add_gradient(a, d);
                  });
}

Var relu(Var a) {
  Tape& t = tape_of(a);
  return t.record(map(a.value(), [](double v) { return v > 0.0 ? v : 0.0; }), {a},
                  [a](Tape& tp, const Tensor& g) {
                    const Tensor& x = a.value();
                    Tensor d(g.rows(), g.cols());
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] > 0.0 ? g[i] : 0.0;
                    tp.add_gradient(a, d);
                  });
}

Var activate(Var a, Activation kind) { return kind == Activation::Gelu ? gelu(a) : relu(a); }

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.record(Tensor::scalar(s), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& x = a.value();
    tp.add_gradient(a, Tensor(x.rows(), x.cols(), g.item()));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var column_mean(Var a) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  Tensor y(1, n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) y[c] += x(r, c);
  for (std::size_t c = 0; c < n; ++c) y[c] /= static_cast<double>(m);
  return t.record(std::move(y), {a}, [a](Tape& tp, const Tensor& g) {
    const std::size_t m = a.rows(), n = a.cols();
    Tensor d(m, n);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) d(r, c) = g[c] / static_cast<double>(m);
    tp.add_gradient(a, d);
  });
}

Var column_variance(Var a) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> mu(n, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) mu[c] += x(r, c);
  for (double& v : mu) v /= static_cast<double>(m);
  Tensor y(1, n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) y[c] += (x(r, c) - mu[c]) * (x(r, c) - mu[c]);
  for (std::size_t c = 0; c < n; ++c) y[c] /= static_cast<double>(m);
  return t.record(std::move(y), {a}, [a, mu = std::move(mu)](Tape& tp, const Tensor& g) {
    const Tensor& x = a.value();
    const std::size_t m = x.rows(), n = x.cols();
    Tensor d(m, n);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) d(r, c) = g[c] * 2.0 * (x(r, c) - mu[c]) / static_cast<double>(m);
    tp.add_gradient(a, d);
  });
}

Var layer_norm_columns(Var x, Var gain, Var shift, double epsilon) {
  Tape& t = tape_of(x, gain);
  if (shift.tape() != &t) throw ContractError("operands live on different tapes");
  if (!(epsilon > 0.0)) throw ContractError("layer norm epsilon must be positive");
  const Tensor& xv = x.value();
  const std::size_t d = xv.rows(), n = xv.cols();
  if (d < 2) throw DimensionError("layer norm needs at least two rows");
  const Tensor& gv = gain.value();
  const Tensor& bv = shift.value();
  if (gv.rows() != d || gv.cols() != 1 || !bv.same_shape(gv)) {
    throw DimensionError("layer norm parameters " + gv.shape_string() + " for input " + xv.shape_string());
  }
  std::vector<double> mu(n, 0.0), inv_std(n, 0.0);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < n; ++c) mu[c] += xv(r, c);
  for (double& v : mu) v /= static_cast<double>(d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < n; ++c) inv_std[c] += (xv(r, c) - mu[c]) * (xv(r, c) - mu[c]);
  for (double& v : inv_std) v = 1.0 / std::sqrt(v / static_cast<double>(d) + epsilon);
  Tensor xhat(d, n), y(d, n);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (xv(r, c) - mu[c]) * inv_std[c];
      y(r, c) = gv[r] * xhat(r, c) + bv[r];
    }
  return t.record(std::move(y), {x, gain, shift},
                  [x, gain, shift, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, const Tensor& g) {
                    const std::size_t d = xhat.rows(), n = xhat.cols();
                    const Tensor& gv = gain.value();
                    if (tp.needs_grad(gain) || tp.needs_grad(shift)) {
                      Tensor dg(d, 1), db(d, 1);
                      for (std::size_t r = 0; r < d; ++r)
                        for (std::size_t c = 0; c < n; ++c) {
                          dg[r] += g(r, c) * xhat(r, c);
                          db[r] += g(r, c);
                        }
                      tp.add_gradient(gain, dg);
                      tp.add_gradient(shift, db);
                    }
                    if (!tp.needs_grad(x)) return;
                    std::vector<double> mean_dh(n, 0.0), mean_dh_xhat(n, 0.0);
                    for (std::size_t r = 0; r < d; ++r)
                      for (std::size_t c = 0; c < n; ++c) {
                        const double dh = g(r, c) * gv[r];
                        mean_dh[c] += dh;
                        mean_dh_xhat[c] += dh * xhat(r, c);
                      }
                    for (std::size_t c = 0; c < n; ++c) {
                      mean_dh[c] /= static_cast<double>(d);
                      mean_dh_xhat[c] /= static_cast<double>(d);
                    }
                    Tensor dx(d, n);
                    for (std::size_t r = 0; r < d; ++r)
                      for (std::size_t c = 0; c < n; ++c) {
                        const double dh = g(r, c) * gv[r];
                        dx(r, c) = inv_std[c] * (dh - mean_dh[c] - xhat(r, c) * mean_dh_xhat[c]);
                      }
                    tp.add_gradient(x, dx);
                  });
}

Var softmax_columns(Var a, const MaskKind& mask) {
  Tape& t = tape_of(a);
  Tensor y = kernels::softmax_columns(a.value(), mask);
  Tensor saved = y;
  return t.record(std::move(y), {a}, [a, saved = std::move(saved)](Tape& tp, const Tensor& g) {
    const std::size_t m = saved.rows(), n = saved.cols();
    std::vector<double> dot(n, 0.0);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) dot[c] += g(r, c) * saved(r, c);
    Tensor d(m, n);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) d(r, c) = saved(r, c) * (g(r, c) - dot[c]);
    tp.add_gradient(a, d);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  Tape& t = tape_of(parts[0]);
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw ContractError("operands live on different tapes");
    if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
    total += p.rows();
  }
  Tensor y(total, n);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    std::copy(v.data().begin(), v.data().end(), y.data().begin() + static_cast<std::ptrdiff_t>(offset * n));
    offset += v.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(y), parts, [inputs](Tape& tp, const Tensor& g) {
    const std::size_t n = g.cols();
    std::size_t offset = 0;
    for (const Var& p : inputs) {
      const std::size_t rows = p.rows();
      if (tp.needs_grad(p)) {
        auto first = g.data().begin() + static_cast<std::ptrdiff_t>(offset * n);
        Tensor d({rows, n}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(rows * n)));
        tp.add_gradient(p, d);
      }
      offset += rows;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  Tape& t = tape_of(parts[0]);
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw ContractError("operands live on different tapes");
    if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
    total += p.cols();
  }
  Tensor y(m, total);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) y(r, offset + c) = v(r, c);
    offset += v.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(y), parts, [inputs](Tape& tp, const Tensor& g) {
    std::size_t offset = 0;
    for (const Var& p : inputs) {
      const std::size_t cols = p.cols();
      if (tp.needs_grad(p)) {
        Tensor d(g.rows(), cols);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < cols; ++c) d(r, c) = g(r, offset + c);
        tp.add_gradient(p, d);
      }
      offset += cols;
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  if (begin + count > x.rows()) throw DimensionError("slice_rows out of range for " + x.shape_string());
  const std::size_t n = x.cols();
  auto first = x.data().begin() + static_cast<std::ptrdiff_t>(begin * n);
  Tensor y({count, n}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * n)));
  return t.record(std::move(y), {a}, [a, begin, count](Tape& tp, const Tensor& g) {
    const Tensor& x = a.value();
    Tensor d(x.rows(), x.cols());
    std::copy(g.data().begin(), g.data().end(), d.data().begin() + static_cast<std::ptrdiff_t>(begin * x.cols()));
    (void)count;
    tp.add_gradient(a, d);
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  if (begin + count > x.cols()) throw DimensionError("slice_cols out of range for " + x.shape_string());
  Tensor y(x.rows(), count);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) y(r, c) = x(r, begin + c);
  return t.record(std::move(y), {a}, [a, begin, count](Tape& tp, const Tensor& g) {
    const Tensor& x = a.value();
    Tensor d(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < count; ++c) d(r, begin + c) = g(r, c);
    tp.add_gradient(a, d);
  });
}

Var dropout(Var a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return a;
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  Tensor keep(x.rows(), x.cols());
  const double inv_keep = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = rng.uniform() >= rate ? inv_keep : 0.0;
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * keep[i];
  return t.record(std::move(y), {a}, [a, keep = std::move(keep)](Tape& tp, const Tensor& g) {
    Tensor d(g.rows(), g.cols());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * keep[i];
    tp.add_gradient(a, d);
  });
}

}  // namespace storm
