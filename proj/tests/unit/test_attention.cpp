#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "storm/errors.hpp"
#include "storm/gradcheck.hpp"

using namespace storm;

namespace {

struct HeadFixture {
  ParameterStore store;
  AttentionHeadParams head;
  HeadFixture(std::size_t dim, std::size_t key_dim, std::uint64_t seed) {
    Rng rng(seed);
    head = make_attention_head(store, "h", dim, dim, key_dim, dim, rng);
    oracle::perturb(store, rng, 0.5);
  }
};

struct BlockFixture {
  ParameterStore store;
  AttentionBlockParams block;
  BlockFixture(std::size_t dim, std::size_t heads, std::uint64_t seed, double noise = 0.3) {
    Rng rng(seed);
    block = make_attention_block(store, "b", dim, heads, 2 * dim, Activation::Gelu, rng, 1.0);
    oracle::perturb(store, rng, noise);
  }
  Tensor run(const Tensor& x, const MaskKind& mask) const {
    Tape t(false);
    Context ctx{t, store};
    return attention_block(ctx, block, t.constant(x), mask).value();
  }
};

Tensor attend_value(const ParameterStore& store, const AttentionHeadParams& h, const Tensor& refs,
                    const Tensor& queries, const MaskKind& mask = {}) {
  Tape t(false);
  Context ctx{t, store};
  return attend(ctx, h, t.constant(refs), t.constant(queries), mask).value();
}

Tensor column_of(const Tensor& x, std::size_t c) {
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) out(r, 0) = x(r, c);
  return out;
}

}  // namespace

TEST_SUITE("attention") {
  TEST_CASE("single reference returns its value vector") {
    HeadFixture f(4, 3, 1);
    Rng rng(2);
    const Tensor s = oracle::random_tensor(4, 1, rng);
    const Tensor q = oracle::random_tensor(4, 1, rng);
    const Tensor out = attend_value(f.store, f.head, s, q);
    CHECK(out == kernels::matmul(f.store[f.head.value].value, s));
  }

  TEST_CASE("identical references return the shared value vector") {
    HeadFixture f(4, 3, 3);
    Rng rng(4);
    const Tensor s = oracle::random_tensor(4, 1, rng);
    const Tensor refs = oracle::hcat(std::vector<Tensor>{s, s, s, s, s});
    const Tensor v = kernels::matmul(f.store[f.head.value].value, s);
    for (int k = 0; k < 10; ++k) {
      const Tensor out = attend_value(f.store, f.head, refs, oracle::random_tensor(4, 1, rng));
      for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(out[i] - v[i]) < 1e-14);
    }
  }

  TEST_CASE("matrix form equals the summation of the definition") {
    for (std::uint64_t s = 0; s < 200; ++s) {
      HeadFixture f(5, 3, s);
      Rng rng(1000 + s);
      const Tensor refs = oracle::random_tensor(5, 3, rng);
      const Tensor q = oracle::random_tensor(5, 1, rng);
      const Tensor out = attend_value(f.store, f.head, refs, q);
      const auto expect = oracle::attention_sum(oracle::from(f.store[f.head.value].value),
                                                oracle::from(f.store[f.head.key].value),
                                                oracle::from(f.store[f.head.query].value), oracle::from(refs),
                                                oracle::column(oracle::from(q), 0), {0, 1, 2});
      for (std::size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(out[i] - expect[i]) < 1e-12);
    }
  }

  TEST_CASE("empty references and bad masks are rejected") {
    HeadFixture f(4, 3, 5);
    CHECK_THROWS_AS(attend_value(f.store, f.head, Tensor(4, 0), Tensor(4, 1)), ContractError);
    CHECK_THROWS_AS(attend_value(f.store, f.head, Tensor(4, 3), Tensor(4, 3), MaskKind::modified_causal(4)),
                    ContractError);
    CHECK_THROWS_AS(attend_value(f.store, f.head, Tensor(4, 3), Tensor(4, 2), MaskKind::causal()), ContractError);
    Tape t(false);
    Context ctx{t, f.store};
    CHECK_THROWS_AS(cross_attention(ctx, f.head, t.constant(Tensor(4, 3)), t.constant(Tensor(4, 2))), DimensionError);
  }

  TEST_CASE("causal first column sees only itself") {
    HeadFixture f(4, 4, 6);
    Rng rng(7);
    const Tensor x = oracle::random_tensor(4, 5, rng);
    const Tensor out = attend_value(f.store, f.head, x, x, MaskKind::causal());
    const Tensor v1 = kernels::matmul(f.store[f.head.value].value, column_of(x, 0));
    for (std::size_t i = 0; i < 4; ++i) CHECK(out(i, 0) == v1[i]);
  }

  TEST_CASE("modified causal candidate column equals independent cross attention") {
    HeadFixture f(4, 3, 8);
    Rng rng(9);
    const Tensor x = oracle::random_tensor(4, 4, rng);
    const Tensor out = attend_value(f.store, f.head, x, x, MaskKind::modified_causal(2));
    const Tensor refs = oracle::hcat(std::vector<Tensor>{column_of(x, 0), column_of(x, 1), column_of(x, 3)});
    const Tensor direct = attend_value(f.store, f.head, refs, column_of(x, 3));
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(out(i, 3) - direct[i]) < 1e-12);
    // Measurement columns stay causal.
    const Tensor causal = attend_value(f.store, f.head, x, x, MaskKind::causal());
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(out(i, 0) == causal(i, 0));
      CHECK(out(i, 1) == causal(i, 1));
    }
  }

  TEST_CASE("attention outputs are convex combinations of value vectors") {
    for (std::uint64_t s = 0; s < 50; ++s) {
      HeadFixture f(4, 3, s + 20);
      Rng rng(s);
      const Tensor x = oracle::random_tensor(4, 6, rng, 3.0);
      const Tensor v = kernels::matmul(f.store[f.head.value].value, x);
      const Tensor out = attend_value(f.store, f.head, x, x);
      for (std::size_t i = 0; i < 4; ++i) {
        double lo = v(i, 0), hi = v(i, 0);
        for (std::size_t c = 0; c < 6; ++c) lo = std::min(lo, v(i, c)), hi = std::max(hi, v(i, c));
        for (std::size_t c = 0; c < 6; ++c) {
          CHECK(out(i, c) >= lo - 1e-12);
          CHECK(out(i, c) <= hi + 1e-12);
        }
      }
    }
  }

  TEST_CASE("layer norm examples") {
    ParameterStore store;
    const LayerNormParams p = make_layer_norm(store, "ln", 4);
    Tape t(false);
    Context ctx{t, store};
    const Tensor flat = layer_norm(ctx, p, t.constant(Tensor(4, 1, 3.5))).value();
    for (double v : flat.data()) CHECK(std::abs(v) < 1e-12);

    ParameterStore s2;
    const LayerNormParams p2 = make_layer_norm(s2, "ln", 2, 1e-300);
    Tape t2(false);
    Context c2{t2, s2};
    const Tensor pm = layer_norm(c2, p2, t2.constant(Tensor::column({1.0, -1.0}))).value();
    CHECK(pm[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(pm[1] == doctest::Approx(-1.0).epsilon(1e-15));

    ParameterStore s3;
    const LayerNormParams p3 = make_layer_norm(s3, "ln", 8);
    Rng rng(3);
    Tape t3(false);
    Context c3{t3, s3};
    const Tensor y = layer_norm(c3, p3, t3.constant(oracle::random_tensor(8, 1, rng, 5.0))).value();
    double mean = 0.0, var = 0.0;
    for (double v : y.data()) mean += v / 8.0;
    for (double v : y.data()) var += (v - mean) * (v - mean) / 8.0;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
  }

  TEST_CASE("block with zero residual outputs is the identity") {
    BlockFixture f(8, 2, 1);
    for (ParamId id : {f.block.attention.output.weight, f.block.attention.output.bias, f.block.mlp.output.weight,
                       f.block.mlp.output.bias}) {
      f.store[id].value.fill(0.0);
    }
    Rng rng(2);
    const Tensor x = oracle::random_tensor(8, 5, rng);
    CHECK(f.run(x, MaskKind::none()) == x);
    CHECK(f.run(x, MaskKind::causal()) == x);
  }

  TEST_CASE("unmasked block is permutation equivariant") {
    BlockFixture f(8, 2, 3);
    Rng rng(4);
    const Tensor x = oracle::random_tensor(8, 6, rng);
    const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    Tensor xp(8, 6);
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t r = 0; r < 8; ++r) xp(r, c) = x(r, perm[c]);
    const Tensor y = f.run(x, MaskKind::none());
    const Tensor yp = f.run(xp, MaskKind::none());
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t r = 0; r < 8; ++r) CHECK(std::abs(yp(r, c) - y(r, perm[c])) < 1e-12);
  }

  TEST_CASE("block matches the straight-line oracle") {
    for (MaskKind mask : {MaskKind::none(), MaskKind::causal(), MaskKind::modified_causal(2)}) {
      BlockFixture f(4, 1, 5);
      Rng rng(6);
      const Tensor x = oracle::random_tensor(4, 3, rng);
      const Tensor y = f.run(x, mask);
      const auto expect = oracle::block(oracle::Store{f.store}, f.block, oracle::columns_of(x), mask);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t r = 0; r < 4; ++r) CHECK(std::abs(y(r, c) - expect[c][r]) < 1e-12);
    }
  }

  TEST_CASE("block rejects mismatched width") {
    BlockFixture f(4, 1, 7);
    CHECK_THROWS_AS(f.run(Tensor(5, 3), MaskKind::none()), DimensionError);
  }

  TEST_CASE("causal prefix property is bit exact") {
    BlockFixture f(8, 2, 8);
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = oracle::random_tensor(8, 7, rng);
      const Tensor y = f.run(x, MaskKind::causal());
      const std::size_t j = 1 + rng.index(6);
      for (std::size_t c = j; c < 7; ++c)
        for (std::size_t r = 0; r < 8; ++r) x(r, c) = 10.0 * rng.normal();
      const Tensor y2 = f.run(x, MaskKind::causal());
      for (std::size_t c = 0; c < j; ++c)
        for (std::size_t r = 0; r < 8; ++r) CHECK(y(r, c) == y2(r, c));
    }
  }

  TEST_CASE("candidate columns are isolated from each other") {
    BlockFixture f(8, 2, 10);
    Rng rng(11);
    Tensor x = oracle::random_tensor(8, 7, rng);
    const MaskKind mask = MaskKind::modified_causal(3);
    const Tensor y = f.run(x, mask);
    for (std::size_t r = 0; r < 8; ++r) x(r, 5) = 10.0 * rng.normal();
    const Tensor y2 = f.run(x, mask);
    for (std::size_t c : {0, 1, 2, 3, 4, 6})
      for (std::size_t r = 0; r < 8; ++r) CHECK(y(r, c) == y2(r, c));
  }

  TEST_CASE("multi head with one head is a single head plus projection") {
    ParameterStore store;
    Rng rng(12);
    const MultiHeadParams p = make_multi_head(store, "mh", 4, 1, rng);
    oracle::perturb(store, rng);
    const Tensor x = oracle::random_tensor(4, 3, rng);
    Tape t(false);
    Context ctx{t, store};
    const Tensor y = multi_head(ctx, p, t.constant(x), t.constant(x)).value();
    const Tensor single = attend_value(store, p.heads[0], x, x);
    Tape t2(false);
    Context c2{t2, store};
    const Tensor expect = linear(c2, p.output, t2.constant(single)).value();
    CHECK(y == expect);
  }

  TEST_CASE("two heads equal concatenated independent heads") {
    ParameterStore store;
    Rng rng(13);
    const MultiHeadParams p = make_multi_head(store, "mh", 4, 2, rng);
    oracle::perturb(store, rng);
    const Tensor x = oracle::random_tensor(4, 5, rng);
    Tape t(false);
    Context ctx{t, store};
    const Tensor y = multi_head(ctx, p, t.constant(x), t.constant(x), MaskKind::causal()).value();
    const Tensor h0 = attend_value(store, p.heads[0], x, x, MaskKind::causal());
    const Tensor h1 = attend_value(store, p.heads[1], x, x, MaskKind::causal());
    CHECK(h0.rows() == 2);
    const Tensor stacked = oracle::vcat(std::vector<Tensor>{h0, h1});
    const Tensor expect = kernels::matmul(store[p.output.weight].value, stacked);
    for (std::size_t c = 0; c < 5; ++c)
      for (std::size_t r = 0; r < 4; ++r)
        CHECK(std::abs(y(r, c) - expect(r, c) - store[p.output.bias].value[r]) < 1e-12);
  }

  TEST_CASE("head count must divide the embedding") {
    ParameterStore store;
    Rng rng(1);
    CHECK_NOTHROW(make_multi_head(store, "a", 48, 2, rng));
    CHECK_THROWS_AS(make_multi_head(store, "b", 5, 2, rng), ConfigError);
  }

  TEST_CASE("block gradients match central differences") {
    for (MaskKind mask : {MaskKind::none(), MaskKind::causal(), MaskKind::modified_causal(2)}) {
      CAPTURE(mask.describe());
      BlockFixture f(4, 2, 14);
      Rng rng(15);
      const Tensor x = oracle::random_tensor(4, 4, rng);
      const Tensor w = oracle::random_tensor(4, 4, rng);
      const auto r = check_parameter_gradients("block", f.store, [&](Context& ctx) {
        return sum(mul(attention_block(ctx, f.block, ctx.tape.constant(x), mask), ctx.tape.constant(w)));
      });
      CHECK(r.max_relative_error < 1e-4);
    }
  }
}
