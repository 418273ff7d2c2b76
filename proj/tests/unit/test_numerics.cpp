#include <cmath>
#include <functional>
#include <numbers>

#include "doctest.h"
#include "oracles.hpp"
#include "storm/errors.hpp"
#include "storm/gradcheck.hpp"

using namespace storm;

namespace {

using OpFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Largest per-coordinate relative error between the tape gradient of
// sum(W .* op(inputs)) and central differences, W random.
double op_gradient_error(const OpFn& op, std::vector<Tensor> inputs, std::uint64_t seed, double step = 1e-6) {
  Rng rng(seed);
  Tensor weights;
  {
    Tape probe(false);
    std::vector<Var> vs;
    for (const auto& t : inputs) vs.push_back(probe.constant(t));
    const Tensor out = op(probe, vs).value();
    weights = oracle::random_tensor(out.rows(), out.cols(), rng);
  }
  auto value = [&](const std::vector<Tensor>& xs) {
    Tape t(false);
    std::vector<Var> vs;
    for (const auto& x : xs) vs.push_back(t.constant(x));
    return sum(mul(op(t, vs), t.constant(weights))).value().item();
  };
  Tape tape;
  std::vector<Var> vs;
  for (const auto& t : inputs) vs.push_back(tape.variable(t));
  tape.backward(sum(mul(op(tape, vs), tape.constant(weights))));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor g = tape.gradient(vs[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + step;
      const double up = value(inputs);
      inputs[k][i] = saved - step;
      const double down = value(inputs);
      inputs[k][i] = saved;
      worst = std::max(worst, relative_error(g[i], (up - down) / (2.0 * step)));
    }
  }
  return worst;
}

Tensor rnd(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return oracle::random_tensor(r, c, rng, scale);
}

// Entries bounded away from zero so the ReLU kink is never crossed.
Tensor away_from_zero(std::size_t r, std::size_t c, std::uint64_t seed) {
  Tensor t = rnd(r, c, seed);
  for (double& v : t.data()) v = v >= 0 ? v + 0.1 : v - 0.1;
  return t;
}

}  // namespace

TEST_SUITE("numerics") {
  TEST_CASE("tensor construction validates extents") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
    CHECK_THROWS_AS(Tensor({1, 1, 1}, std::vector<double>(1)), DimensionError);
    const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t(1, 2) == 6);
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(t.item(), DimensionError);
  }

  TEST_CASE("matmul examples") {
    const Tensor x = rnd(2, 5, 1);
    CHECK(kernels::matmul(Tensor::identity(2), x) == x);
    const Tensor r = kernels::matmul(Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 1, {1, 1}));
    CHECK(r == Tensor::matrix(2, 1, {3, 7}));
    CHECK_THROWS_AS(kernels::matmul(Tensor(2, 3), Tensor(2, 3)), DimensionError);
    CHECK(kernels::matmul_tn(x, x) == kernels::matmul(kernels::transpose(x), x));
    CHECK(kernels::matmul_nt(x, x) == kernels::matmul(x, kernels::transpose(x)));
  }

  TEST_CASE("matmul gradient matches central differences") {
    const double err = op_gradient_error([](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); },
                                         {rnd(4, 3, 2), rnd(3, 5, 3)}, 4);
    CHECK(err < 1e-6);
  }

  TEST_CASE("softmax examples") {
    const Tensor a = kernels::softmax_columns(Tensor::matrix(2, 3, {0, 1000, 0, 0, 1000, std::log(3.0)}));
    CHECK(a(0, 0) == doctest::Approx(0.5));
    CHECK(a(1, 0) == doctest::Approx(0.5));
    CHECK(a(0, 1) == doctest::Approx(0.5));
    CHECK(a(1, 1) == doctest::Approx(0.5));
    CHECK(std::isfinite(a(0, 1)));
    CHECK(a(0, 2) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(a(1, 2) == doctest::Approx(0.75).epsilon(1e-14));
  }

  TEST_CASE("softmax columns sum to one") {
    for (std::uint64_t s = 0; s < 50; ++s) {
      const Tensor a = kernels::softmax_columns(rnd(7, 6, s, 10.0));
      for (std::size_t c = 0; c < a.cols(); ++c) {
        double total = 0.0;
        for (std::size_t r = 0; r < a.rows(); ++r) {
          CHECK(a(r, c) > 0.0);
          CHECK(a(r, c) < 1.0);
          total += a(r, c);
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
      }
    }
  }

  TEST_CASE("masked softmax zeroes hidden keys") {
    const Tensor a = kernels::softmax_columns(rnd(4, 4, 9), MaskKind::causal());
    for (std::size_t q = 0; q < 4; ++q)
      for (std::size_t k = q + 1; k < 4; ++k) CHECK(a(k, q) == 0.0);
    CHECK(a(0, 0) == 1.0);
    CHECK_THROWS_AS(kernels::softmax_columns(Tensor(3, 4), MaskKind::causal()), DimensionError);
    CHECK_THROWS_AS(kernels::softmax_columns(Tensor(3, 3), MaskKind::modified_causal(4)), ContractError);
  }

  TEST_CASE("backward examples") {
    Tape tape;
    const Tensor x0 = rnd(3, 2, 5);
    Var x = tape.variable(x0);
    tape.backward(sum(x));
    const Tensor ones = tape.gradient(x);
    for (double g : ones.data()) CHECK(g == 1.0);

    Tape tape2;
    const Tensor c = rnd(4, 1, 6);
    Var y = tape2.variable(c);
    tape2.backward(matmul_tn(y, y));
    const Tensor g = tape2.gradient(y);
    for (std::size_t i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx(2.0 * c[i]));
  }

  TEST_CASE("backward error paths") {
    Tape tape;
    Var x = tape.variable(rnd(2, 2, 1));
    CHECK_THROWS_AS(tape.backward(x), ContractError);
    Var l = sum(x);
    tape.backward(l);
    CHECK_THROWS_AS(tape.backward(l), ContractError);
    Tape off(false);
    Var z = off.variable(rnd(2, 2, 1));
    CHECK_THROWS_AS(off.backward(sum(z)), ContractError);
    Tape other;
    Var w = other.variable(rnd(2, 2, 1));
    Tape third;
    CHECK_THROWS_AS(add(third.variable(rnd(2, 2, 2)), w), ContractError);
  }

  TEST_CASE("every differentiable primitive matches central differences") {
    struct Case {
      const char* name;
      OpFn op;
      std::vector<Tensor> inputs;
    };
    const std::vector<Case> cases{
        {"matmul_tn", [](Tape&, const std::vector<Var>& v) { return matmul_tn(v[0], v[1]); }, {rnd(3, 4, 1), rnd(3, 2, 2)}},
        {"transpose", [](Tape&, const std::vector<Var>& v) { return transpose(v[0]); }, {rnd(3, 4, 3)}},
        {"add", [](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); }, {rnd(3, 4, 4), rnd(3, 4, 5)}},
        {"sub", [](Tape&, const std::vector<Var>& v) { return sub(v[0], v[1]); }, {rnd(3, 4, 6), rnd(3, 4, 7)}},
        {"mul", [](Tape&, const std::vector<Var>& v) { return mul(v[0], v[1]); }, {rnd(3, 4, 8), rnd(3, 4, 9)}},
        {"square", [](Tape&, const std::vector<Var>& v) { return square(v[0]); }, {rnd(3, 4, 10)}},
        {"scale", [](Tape&, const std::vector<Var>& v) { return scale(v[0], -1.7); }, {rnd(3, 4, 11)}},
        {"add_scalar", [](Tape&, const std::vector<Var>& v) { return add_scalar(v[0], 2.5); }, {rnd(3, 4, 12)}},
        {"add_column_bias", [](Tape&, const std::vector<Var>& v) { return add_column_bias(v[0], v[1]); },
         {rnd(3, 4, 13), rnd(3, 1, 14)}},
        {"exp", [](Tape&, const std::vector<Var>& v) { return exp(v[0]); }, {rnd(3, 4, 15)}},
        {"gelu", [](Tape&, const std::vector<Var>& v) { return gelu(v[0]); }, {rnd(3, 4, 16, 2.0)}},
        {"relu", [](Tape&, const std::vector<Var>& v) { return relu(v[0]); }, {away_from_zero(3, 4, 17)}},
        {"sum", [](Tape&, const std::vector<Var>& v) { return sum(v[0]); }, {rnd(3, 4, 18)}},
        {"mean", [](Tape&, const std::vector<Var>& v) { return mean(v[0]); }, {rnd(3, 4, 19)}},
        {"column_mean", [](Tape&, const std::vector<Var>& v) { return column_mean(v[0]); }, {rnd(3, 4, 20)}},
        {"column_variance", [](Tape&, const std::vector<Var>& v) { return column_variance(v[0]); }, {rnd(3, 4, 21)}},
        {"layer_norm", [](Tape&, const std::vector<Var>& v) { return layer_norm_columns(v[0], v[1], v[2], 1e-5); },
         {rnd(5, 3, 22), rnd(5, 1, 23), rnd(5, 1, 24)}},
        {"softmax", [](Tape&, const std::vector<Var>& v) { return softmax_columns(v[0]); }, {rnd(4, 3, 25)}},
        {"softmax causal", [](Tape&, const std::vector<Var>& v) { return softmax_columns(v[0], MaskKind::causal()); },
         {rnd(4, 4, 26)}},
        {"softmax modified",
         [](Tape&, const std::vector<Var>& v) { return softmax_columns(v[0], MaskKind::modified_causal(2)); },
         {rnd(5, 5, 27)}},
        {"concat_rows", [](Tape&, const std::vector<Var>& v) { return concat_rows(v); }, {rnd(2, 3, 28), rnd(4, 3, 29)}},
        {"concat_cols", [](Tape&, const std::vector<Var>& v) { return concat_cols(v); }, {rnd(3, 2, 30), rnd(3, 1, 31)}},
        {"slice_rows", [](Tape&, const std::vector<Var>& v) { return slice_rows(v[0], 1, 2); }, {rnd(4, 3, 32)}},
        {"slice_cols", [](Tape&, const std::vector<Var>& v) { return slice_cols(v[0], 1, 3); }, {rnd(3, 5, 33)}},
        {"dropout",
         [](Tape&, const std::vector<Var>& v) {
           Rng r(5);
           return dropout(v[0], 0.3, r);
         },
         {rnd(3, 4, 34)}},
    };
    for (const auto& c : cases) {
      CAPTURE(c.name);
      CHECK(op_gradient_error(c.op, c.inputs, 99) < 1e-5);
    }
  }

  TEST_CASE("forward values do not depend on recording") {
    Rng rng(3);
    StormModel model(ModelConfig{}, {-70.0, 8.0});
    const auto m = oracle::random_measurements(30, rng);
    const FeatureMatrix fm = build_features(m, {32.0, 32.0}, model.config().features, model.normalization);
    Tape on(true), off(false);
    Context c1{on, model.parameters()}, c2{off, model.parameters()};
    const Tensor a = forward_graph(c1, model, on.constant(fm.values), MaskKind::causal()).value();
    const Tensor b = forward_graph(c2, model, off.constant(fm.values), MaskKind::causal()).value();
    CHECK(a == b);
  }

  TEST_CASE("tape is topologically ordered") {
    Rng rng(4);
    StormModel model(ModelConfig{}, {-70.0, 8.0});
    const auto m = oracle::random_measurements(10, rng);
    const FeatureMatrix fm = build_features(m, {32.0, 32.0}, model.config().features, model.normalization);
    Tape tape;
    Context ctx{tape, model.parameters()};
    forward_graph(ctx, model, tape.constant(fm.values), MaskKind::causal());
    for (std::size_t id = 0; id < tape.node_count(); ++id)
      for (std::size_t in : tape.inputs_of(id)) CHECK(in < id);
  }

  TEST_CASE("full model parameter gradients match central differences") {
    for (const auto& r : run_gradcheck_suite(5)) {
      CAPTURE(r.name);
      CHECK(r.coordinates > 1000);
      CHECK(r.max_relative_error < 1e-4);
    }
  }
}
