#pragma once

// Tape-based reverse-mode differentiation over dense rank-2 tensors.
//
// A Tape records every primitive applied to its Vars in creation order, so the
// record is topologically sorted by construction and the reverse sweep is a
// single backward pass over node indices. A Tape with recording disabled
// evaluates the same kernels but keeps no backward closures.

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "storm/tensor.hpp"

namespace storm {

class Rng;

enum class MaskType { None, Causal, ModifiedCausal };

/// Which keys may contribute to each output column of a square attention map.
struct MaskKind {
  MaskType type = MaskType::None;
  /// For ModifiedCausal: columns [0, measurements) are causal, every later
  /// column sees the measurements and itself.
  std::size_t measurements = 0;

  static MaskKind none() { return {}; }
  static MaskKind causal() { return {MaskType::Causal, 0}; }
  static MaskKind modified_causal(std::size_t n) { return {MaskType::ModifiedCausal, n}; }

  bool allows(std::size_t key, std::size_t query) const {
    switch (type) {
      case MaskType::None:
        return true;
      case MaskType::Causal:
        return key <= query;
      case MaskType::ModifiedCausal:
        return query < measurements ? key <= query : (key < measurements || key == query);
    }
    return true;
  }

  void validate(std::size_t columns) const;
  std::string describe() const;
};

enum class Activation { Gelu, Relu };

using ParamId = std::size_t;
inline constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

struct Parameter {
  std::string name;
  Tensor value;
};

/// One gradient tensor per parameter, index-aligned with a ParameterStore.
using Gradients = std::vector<Tensor>;

/// Owns all learnable arrays of a model; layers refer to them by ParamId.
class ParameterStore {
 public:
  ParamId add(std::string name, Tensor value);
  Parameter& operator[](ParamId id) { return params_.at(id); }
  const Parameter& operator[](ParamId id) const { return params_.at(id); }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  Gradients zero_gradients() const;
  ParamId find(const std::string& name) const;

 private:
  std::vector<Parameter> params_;
};

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Tensor value);
  /// Leaf that receives a gradient (used for inputs under test).
  Var variable(Tensor value);
  /// Leaf that views a stored parameter without copying it. Repeated calls
  /// with the same id return the same node.
  Var parameter(const ParameterStore& store, ParamId id);

  const Tensor& value(Var v) const { return node(v).value_ref(); }
  bool needs_grad(Var v) const { return node(v).needs_grad; }

  /// Appends a node computed from `inputs`. The closure receives the output
  /// gradient and pushes contributions into the inputs via add_gradient().
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);
  void add_gradient(Var v, const Tensor& grad);

  /// Reverse sweep from a scalar loss. A tape can be swept once.
  void backward(Var loss);
  /// Gradient of the last sweep with respect to `v` (zeros if unreached).
  Tensor gradient(Var v) const;
  /// Adds every parameter leaf gradient into `grads` (indexed by ParamId).
  void accumulate_into(Gradients& grads) const;

  std::size_t node_count() const { return nodes_.size(); }
  /// Input node ids of a node, in argument order.
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_.at(id).inputs; }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    bool needs_grad = false;
    ParamId param = kNoNode;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    const Tensor& value_ref() const { return external ? *external : value; }
  };

  const Node& node(Var v) const;
  void check_owner(Var v) const;

  bool recording_;
  bool swept_ = false;
  std::deque<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<std::size_t> param_nodes_;
};

// Dense kernels on plain tensors (no tape).
namespace kernels {
Tensor matmul(const Tensor& a, const Tensor& b);     // a * b
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T * b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor transpose(const Tensor& a);
Tensor softmax_columns(const Tensor& a, const MaskKind& mask = {});
}  // namespace kernels

// Differentiable primitives.
Var matmul(Var a, Var b);
/// a^T * b without materializing the transpose.
Var matmul_tn(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var square(Var a);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
/// x (D x M) plus a D x 1 bias on every column.
Var add_column_bias(Var x, Var bias);
Var exp(Var a);
Var gelu(Var a);
Var relu(Var a);
Var activate(Var a, Activation kind);
Var sum(Var a);
Var mean(Var a);
/// Per-column mean over rows, 1 x M.
Var column_mean(Var a);
/// Per-column population variance over rows, 1 x M.
Var column_variance(Var a);
/// Column-wise gain * (x - mean) / sqrt(var + epsilon) + shift.
Var layer_norm_columns(Var x, Var gain, Var shift, double epsilon);
/// Column-wise softmax; disallowed entries get exactly zero weight.
Var softmax_columns(Var a, const MaskKind& mask = {});
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
/// Inverted dropout; identity when rate == 0.
Var dropout(Var a, double rate, Rng& rng);

}  // namespace storm
