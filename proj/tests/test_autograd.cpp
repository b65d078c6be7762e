#include <doctest.h>

#include <cmath>
#include <random>

#include "hmid/autograd.hpp"
#include "test_util.hpp"

using namespace hmid;
using namespace hmid::ad;
using hmid::test::random_tensor;

namespace {

// Reduces an op's output to a scalar with fixed random weights so every output
// coordinate contributes a distinct amount to the gradient.
Var<double> weighted_sum(Tape<double>& t, Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, t.constant(random_tensor(rng, y.shape()))));
}

double fd_unary(const std::function<Var<double>(Var<double>)>& op, const TensorD& x) {
  return finite_diff_check([&](Tape<double>& t, Var<double> v) { return weighted_sum(t, op(v), 7); }, x).max_rel_err;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Tape<double> t;
  auto y = softmax_rows(t.constant(TensorD({1, 2}, {0.0, 0.0})));
  CHECK(y.value()[0] == doctest::Approx(0.5));
  CHECK(y.value()[1] == doctest::Approx(0.5));
}

TEST_CASE("acosh(1) is zero") {
  Tape<double> t;
  CHECK(acosh(t.constant(TensorD::scalar(1.0))).value().item() == 0.0);
}

TEST_CASE("gradient of sum is all ones") {
  Tape<double> t;
  auto w = t.parameter(TensorD({2, 3}, {1, 2, 3, 4, 5, 6}), 42);
  auto grads = t.backward(sum(w));
  REQUIRE(grads.count(42) == 1);
  for (double g : grads.at(42).values()) CHECK(g == 1.0);
}

TEST_CASE("Lorentz self-inner product composed from primitive ops") {
  // <x,x>_L = -x0^2 + |x~|^2 has gradient (-2 x0, 2 x~).
  Tape<double> t;
  auto time = t.variable(TensorD::scalar(1.7));
  auto space = t.variable(TensorD({1, 3}, {0.3, -0.8, 1.1}));
  auto inner = add(neg(mul(time, time)), sum(mul(space, space)));
  t.backward(inner);
  CHECK(t.grad(time)[0] == doctest::Approx(-2 * 1.7));
  CHECK(t.grad(space)[0] == doctest::Approx(0.6));
  CHECK(t.grad(space)[1] == doctest::Approx(-1.6));
  CHECK(t.grad(space)[2] == doctest::Approx(2.2));
}

TEST_CASE("backward contract violations") {
  Tape<double> t;
  auto w = t.variable(TensorD({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(t.backward(w), ContractViolation);  // not scalar
  auto loss = sum(w);
  t.backward(loss);
  CHECK_THROWS_AS(t.backward(loss), ContractViolation);  // second pass without reset
  t.reset();
  auto w2 = t.variable(TensorD({2}, {1.0, 2.0}));
  CHECK_NOTHROW(t.backward(sum(w2)));
}

TEST_CASE("shape mismatches are contract violations") {
  Tape<double> t;
  auto a = t.constant(TensorD({2, 3}));
  auto b = t.constant(TensorD({2, 3}));
  CHECK_THROWS_AS(matmul(a, b), ContractViolation);
  CHECK_THROWS_AS(add(a, t.constant(TensorD({3, 2}))), ContractViolation);
  CHECK_THROWS_AS(gather_rows(a, {5}), ContractViolation);
  Tape<double> other;
  CHECK_THROWS_AS(add(a, other.constant(TensorD({2, 3}))), ContractViolation);
}

TEST_CASE("hard clamp passes gradient only inside the interval") {
  Tape<double> t;
  auto x = t.variable(TensorD({1, 3}, {-2.0, 0.5, 3.0}));
  t.backward(sum(clamp(x, -1.0, 1.0)));
  CHECK(t.grad(x)[0] == 0.0);
  CHECK(t.grad(x)[1] == 1.0);
  CHECK(t.grad(x)[2] == 0.0);
}

TEST_CASE("finite differences of |x|^2 and a constant") {
  std::mt19937_64 rng(1);
  const TensorD x = random_tensor(rng, {3, 4});
  auto sq = finite_diff_check([](Tape<double>&, Var<double> v) { return sum(mul(v, v)); }, x);
  CHECK(sq.max_rel_err <= 1e-8);
  auto cst = finite_diff_check([](Tape<double>& t, Var<double>) { return t.constant(TensorD::scalar(3.0)); }, x);
  CHECK(cst.max_abs_err == 0.0);
}

TEST_CASE("matmul gradient matches finite differences") {
  std::mt19937_64 rng(2);
  const TensorD b = random_tensor(rng, {4, 5});
  const TensorD a = random_tensor(rng, {3, 4});
  CHECK(fd_unary([&](Var<double> v) { return matmul(v, v.tape->constant(b)); }, a) <= 1e-4);
  CHECK(fd_unary([&](Var<double> v) { return matmul(v.tape->constant(a), v); }, b) <= 1e-4);
  CHECK(fd_unary([&](Var<double> v) { return matmul_nt(v, v); }, a) <= 1e-4);
}

TEST_CASE("every registered op matches finite differences on random shapes") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    std::uniform_int_distribution<std::int64_t> dim(1, 5);
    const std::int64_t R = dim(rng), C = dim(rng);
    const TensorD x = random_tensor(rng, {R, C});
    const TensorD pos = random_tensor(rng, {R, C}, 0.5, 2.0);
    const TensorD gt1 = random_tensor(rng, {R, C}, 1.2, 3.0);
    const TensorD unit = random_tensor(rng, {R, C}, -0.9, 0.9);
    const TensorD other = random_tensor(rng, {R, C}, 0.5, 1.5);
    const TensorD rowv = random_tensor(rng, {C}, 0.5, 1.5);
    const TensorD colv = random_tensor(rng, {R, 1}, 0.5, 1.5);
    CAPTURE(R);
    CAPTURE(C);

    auto k = [](Var<double> v, const TensorD& c) { return v.tape->constant(c); };
    CHECK(fd_unary([&](Var<double> v) { return add(v, k(v, other)); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return sub(k(v, other), v); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return mul(v, v); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return div(k(v, other), v); }, pos) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return div(v, k(v, other)); }, x) <= 1e-4);
    // broadcasts: gradient w.r.t. the broadcast operand
    CHECK(fd_unary([&](Var<double> v) { return mul(k(v, x), v); }, rowv) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return div(k(v, x), v); }, colv) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return sub(v, k(v, x)); }, TensorD::scalar(0.7)) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return neg(v); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return scale(v, 2.5); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return add_scalar(v, 2.5); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return exp(v); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return log(v); }, pos) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return sqrt(v); }, pos) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return cosh(v); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return sinh(v); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return acosh(v); }, gt1) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return asin(v); }, unit) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return acos(v); }, unit) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return gelu(v); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return clamp(v, -0.95, 0.95); }, unit) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return mean(v); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return max(v); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return row_sum(v); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return transpose(v); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return reshape(v, {C, R}); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return softmax_rows(v); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return log_softmax_rows(v); }, x) <= 1e-4);
    std::vector<std::int64_t> cols(static_cast<std::size_t>(R));
    for (std::int64_t r = 0; r < R; ++r) cols[r] = r % C;
    CHECK(fd_unary([&](Var<double> v) { return pick(v, cols); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return gather_rows(v, {R - 1, 0, R - 1}); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return embedding_lookup(v, {0, 0}); }, x) <= 1e-4);
    CHECK(fd_unary([&](Var<double> v) { return concat_rows<double>({v, k(v, x), v}); }, x) <= 1e-4);
    if (C > 1) {
      const TensorD gain = random_tensor(rng, {C}, 0.5, 1.5);
      const TensorD bias = random_tensor(rng, {C});
      CHECK(fd_unary([&](Var<double> v) { return layer_norm(v, k(v, gain), k(v, bias)); }, x) <= 1e-4);
      CHECK(fd_unary([&](Var<double> v) { return layer_norm(k(v, x), v, k(v, bias)); }, gain) <= 1e-4);
      CHECK(fd_unary([&](Var<double> v) { return layer_norm(k(v, x), k(v, gain), v); }, bias) <= 1e-4);
    }
  }
}

TEST_CASE("attention gradient matches finite differences") {
  std::mt19937_64 rng(4);
  for (bool causal : {false, true}) {
    const std::int64_t batch = 2, seq = 3, heads = 2, width = 4;
    const TensorD qkv = random_tensor(rng, {batch * seq, 3 * width});
    CHECK(fd_unary([&](Var<double> v) { return attention(v, batch, seq, heads, causal); }, qkv) <= 1e-4);
  }
}

TEST_CASE("causal attention ignores later positions") {
  std::mt19937_64 rng(5);
  TensorD qkv = random_tensor(rng, {4, 6});
  Tape<double> t1;
  auto a = attention(t1.constant(qkv), 1, 4, 1, true).value();
  for (std::int64_t c = 0; c < 6; ++c) qkv(3, c) += 1.0;  // perturb the last token
  Tape<double> t2;
  auto b = attention(t2.constant(qkv), 1, 4, 1, true).value();
  for (std::int64_t r = 0; r < 3; ++r)
    for (std::int64_t c = 0; c < 2; ++c) CHECK(a(r, c) == b(r, c));
}

TEST_CASE("forward and backward are bit-reproducible") {
  auto run = [] {
    std::mt19937_64 rng(9);
    Tape<float> t;
    auto w = t.parameter(random_tensor(rng, {8, 8}).cast<float>(), 0);
    auto x = t.constant(random_tensor(rng, {4, 8}).cast<float>());
    auto y = mean(gelu(matmul(x, w)));
    auto g = t.backward(y);
    return std::make_pair(y.value(), g.at(0));
  };
  auto [y1, g1] = run();
  auto [y2, g2] = run();
  CHECK(y1 == y2);
  CHECK(g1 == g2);
}
