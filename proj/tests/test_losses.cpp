#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "hmid/grad_check.hpp"
#include "hmid/lorentz.hpp"
#include "hmid/losses.hpp"
#include "test_util.hpp"

using namespace hmid;
using namespace hmid::losses;
using hmid::ad::Tape;
using V = hmid::ad::Var<double>;
using Batch = EmbeddingBatch<double>;

namespace {

V scalar(Tape<double>& t, double v) { return t.constant(TensorD::scalar(v)); }

TensorD rows(const std::vector<std::vector<double>>& r) {
  TensorD t({static_cast<std::int64_t>(r.size()), static_cast<std::int64_t>(r[0].size())});
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = 0; j < r[i].size(); ++j) t(i, j) = r[i][j];
  return t;
}

// Brute-force symmetric cross-entropy over the logit matrix -d(a_i, b_j)/tau,
// computed from the scalar point API.
double brute_force_ce(const TensorD& a, const TensorD& b, double tau, double c, bool transpose) {
  const auto B = a.rows();
  lorentz::Curvature curv(c);
  double total = 0;
  for (std::int64_t i = 0; i < B; ++i) {
    std::vector<double> logits;
    for (std::int64_t j = 0; j < B; ++j) {
      auto ra = a.row(transpose ? j : i), rb = b.row(transpose ? i : j);
      auto pa = lorentz::lift_to_hyperboloid(std::vector<double>(ra.begin(), ra.end()), curv);
      auto pb = lorentz::lift_to_hyperboloid(std::vector<double>(rb.begin(), rb.end()), curv);
      logits.push_back(-lorentz::lorentz_distance(pa, pb, curv) / tau);
    }
    double z = 0;
    for (double l : logits) z += std::exp(l);
    total += -(logits[i] - std::log(z));
  }
  return total / B;
}

}  // namespace

TEST_CASE("single pair gives zero loss") {
  Tape<double> t;
  auto img = t.constant(rows({{0.3, -0.2}}));
  auto txt = t.constant(rows({{0.1, 0.5}}));
  Batch b{img, txt};
  CHECK(hyperbolic_contrastive_loss(b, scalar(t, 0.5), scalar(t, 1.0)).value().item() == 0.0);
  CHECK(interaction_distillation_loss(b, b, scalar(t, 0.5), scalar(t, 1.0)).value().item() == 0.0);
  CHECK(euclidean_clip_loss(img, txt, scalar(t, 0.5)).value().item() == 0.0);
}

TEST_CASE("B=2 contrastive loss matches the hand-computed softmax") {
  // d(i,i) = 0, d(1,2) = 10 with c = 1: origin and a point at distance 10 on an axis.
  Tape<double> t;
  const double s = std::sinh(10.0);
  auto pts = t.constant(rows({{0.0, 0.0}, {s, 0.0}}));
  auto terms = hyperbolic_contrastive_terms(Batch{pts, pts}, scalar(t, 1.0), scalar(t, 1.0));
  const double expected = std::log1p(std::exp(-10.0));  // -log(1 / (1 + e^-10))
  CHECK(expected == doctest::Approx(4.54e-5).epsilon(1e-3));
  CHECK(std::abs(terms.i2t.value().item() - expected) <= 1e-10);
  CHECK(std::abs(terms.t2i.value().item() - expected) <= 1e-10);
  CHECK(std::abs(terms.loss.value().item() - expected) <= 1e-10);
}

TEST_CASE("B=2 distillation matches brute-force enumeration") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> t;
    const double tau = 0.2 + 0.8 * (trial % 5) / 4.0, c = 0.5 + 0.1 * trial;
    auto si = test::random_tensor(rng, {2, 3}), st = test::random_tensor(rng, {2, 3});
    auto ti = test::random_tensor(rng, {2, 3}), tt = test::random_tensor(rng, {2, 3});
    Batch s{t.constant(si), t.constant(st)}, te{t.constant(ti), t.constant(tt), Source::Teacher};
    auto terms = interaction_distillation_terms(s, te, scalar(t, tau), scalar(t, c));
    const double i2t = brute_force_ce(si, tt, tau, c, false);
    const double t2i = brute_force_ce(st, ti, tau, c, false);
    CHECK(std::abs(terms.i2t.value().item() - i2t) <= 1e-10);
    CHECK(std::abs(terms.t2i.value().item() - t2i) <= 1e-10);
    CHECK(std::abs(terms.loss.value().item() - 0.5 * (i2t + t2i)) <= 1e-10);

    auto con = hyperbolic_contrastive_terms(s, scalar(t, tau), scalar(t, c));
    CHECK(std::abs(con.i2t.value().item() - brute_force_ce(si, st, tau, c, false)) <= 1e-10);
    CHECK(std::abs(con.t2i.value().item() - brute_force_ce(si, st, tau, c, true)) <= 1e-10);
  }
}

TEST_CASE("distillation with teacher == student equals the contrastive loss") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> t;
    Batch b{t.constant(test::random_tensor(rng, {8, 5}, -2, 2)), t.constant(test::random_tensor(rng, {8, 5}, -2, 2))};
    auto tau = scalar(t, 0.07), c = scalar(t, 1.7);
    const double con = hyperbolic_contrastive_loss(b, tau, c).value().item();
    const double dist = interaction_distillation_loss(b, b, tau, c).value().item();
    CHECK(std::abs(con - dist) <= 1e-12);
  }
}

TEST_CASE("losses are invariant to a consistent permutation of pairs") {
  std::mt19937_64 rng(3);
  auto a = test::random_tensor(rng, {5, 4}), b = test::random_tensor(rng, {5, 4});
  std::vector<std::int64_t> perm{3, 0, 4, 1, 2};
  Tape<double> t;
  auto tau = scalar(t, 0.3), c = scalar(t, 1.0);
  Batch x{t.constant(a), t.constant(b)};
  Batch y{ad::gather_rows(x.image, perm), ad::gather_rows(x.text, perm)};
  CHECK(hyperbolic_contrastive_loss(x, tau, c).value().item() ==
        doctest::Approx(hyperbolic_contrastive_loss(y, tau, c).value().item()).epsilon(1e-12));
  CHECK(entailment_loss(x, c, 0.1).value().item() ==
        doctest::Approx(entailment_loss(y, c, 0.1).value().item()).epsilon(1e-12));
  CHECK(euclidean_clip_loss(x.image, x.text, tau).value().item() ==
        doctest::Approx(euclidean_clip_loss(y.image, y.text, tau).value().item()).epsilon(1e-12));
}

TEST_CASE("contract violations") {
  Tape<double> t;
  std::mt19937_64 rng(4);
  Batch b{t.constant(test::random_tensor(rng, {3, 2})), t.constant(test::random_tensor(rng, {3, 2}))};
  Batch small{t.constant(test::random_tensor(rng, {2, 2})), t.constant(test::random_tensor(rng, {2, 2}))};
  CHECK_THROWS_AS(hyperbolic_contrastive_loss(b, scalar(t, 0.009), scalar(t, 1.0)), ContractViolation);
  CHECK_NOTHROW(hyperbolic_contrastive_loss(b, scalar(t, 0.01), scalar(t, 1.0)));
  CHECK_THROWS_AS(interaction_distillation_loss(b, small, scalar(t, 0.5), scalar(t, 1.0)), ContractViolation);
  auto zero = t.constant(rows({{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}}));
  CHECK_THROWS_AS(euclidean_clip_loss(zero, b.text, scalar(t, 0.5)), ContractViolation);
  LossWeights w;
  w.entailment = -1;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}

TEST_CASE("entailment: radial pairs are inside the cone") {
  std::mt19937_64 rng(5);
  Tape<double> t;
  auto dir = test::random_tensor(rng, {6, 4});
  TensorD txt({6, 4}), img({6, 4});
  for (std::int64_t i = 0; i < 6; ++i) {
    double norm = 0;
    for (double v : dir.row(i)) norm += v * v;
    norm = std::sqrt(norm);
    for (std::int64_t k = 0; k < 4; ++k) {
      txt(i, k) = (0.5 + 0.2 * i) * dir(i, k) / norm;
      img(i, k) = (1.5 + 0.5 * i) * dir(i, k) / norm;
    }
  }
  Batch b{t.constant(img), t.constant(txt)};
  CHECK(entailment_loss(b, scalar(t, 1.0), 0.1).value().item() == 0.0);
}

TEST_CASE("entailment: orthogonal pair equals exterior angle minus pi/6") {
  Tape<double> t;
  Batch b{t.constant(rows({{0.0, 0.4}})), t.constant(rows({{0.4, 0.0}}))};
  lorentz::Curvature c(1.0);
  const auto x = lorentz::lift_to_hyperboloid(std::vector<double>{0.4, 0.0}, c);
  const auto y = lorentz::lift_to_hyperboloid(std::vector<double>{0.0, 0.4}, c);
  const double expected = lorentz::exterior_angle(x, y, c) - std::asin(0.5);
  CHECK(expected > 0.0);
  CHECK(std::abs(entailment_loss(b, scalar(t, 1.0), 0.1).value().item() - expected) <= 1e-9);
}

TEST_CASE("entailment decreases as the image rotates toward the cone axis") {
  Tape<double> t;
  const double r_txt = 0.8, r_img = 2.0;
  double prev = std::numeric_limits<double>::infinity();
  int strict = 0;
  for (int step = 0; step <= 90; ++step) {
    const double theta = std::numbers::pi / 2 * (1.0 - step / 90.0);
    Batch b{t.constant(rows({{r_img * std::cos(theta), r_img * std::sin(theta), 0.0}})),
            t.constant(rows({{r_txt, 0.0, 0.0}}))};
    const double l = entailment_loss(b, scalar(t, 1.0), 0.1).value().item();
    CHECK(l >= 0.0);
    CHECK(l <= prev);
    strict += l < prev;
    prev = l;
  }
  CHECK(prev == 0.0);
  CHECK(strict > 10);
}

TEST_CASE("root text rows use the clamped aperture and are counted") {
  Tape<double> t;
  Batch b{t.constant(rows({{1.0, 0.0}, {0.0, 1.0}})), t.constant(rows({{0.0, 0.0}, {0.5, 0.0}}))};
  std::atomic<std::int64_t> hits{0};
  auto tau = scalar(t, 0.5), c = scalar(t, 1.0);
  CHECK_NOTHROW(entailment_loss(b, c, 0.1, &hits));
  CHECK(hits.load() == 1);
  auto total = total_loss<double>(b, nullptr, tau, c, 0.1, LossWeights{});
  CHECK(total.report.root_hits == 1);
}

TEST_CASE("total loss composition") {
  std::mt19937_64 rng(6);
  Tape<double> t;
  Batch s{t.constant(test::random_tensor(rng, {4, 3})), t.constant(test::random_tensor(rng, {4, 3}))};
  Batch te{t.constant(test::random_tensor(rng, {4, 3})), t.constant(test::random_tensor(rng, {4, 3})), Source::Teacher};
  auto tau = scalar(t, 0.4), c = scalar(t, 1.2);

  auto none = total_loss(s, &te, tau, c, 0.1, LossWeights{0.0, 0.0});
  CHECK(none.report.total == none.report.contrastive);

  auto def = total_loss(s, &te, tau, c, 0.1, LossWeights{});
  CHECK(LossWeights{}.distillation == 1.0);
  CHECK(LossWeights{}.entailment == 0.2);
  const auto& r = def.report;
  CHECK(r.total == (r.contrastive + 1.0 * r.distillation) + 0.2 * r.entailment);
  CHECK(r.contrastive == doctest::Approx(0.5 * (r.contrastive_i2t + r.contrastive_t2i)));
  CHECK(r.distillation == doctest::Approx(0.5 * (r.distill_i2t + r.distill_t2i)));
  CHECK(r.entailment >= 0.0);

  auto meru = total_loss<double>(s, nullptr, tau, c, 0.1, LossWeights{});
  CHECK(meru.report.distillation == 0.0);
  CHECK(meru.report.total == meru.report.contrastive + 0.2 * meru.report.entailment);
}

TEST_CASE("CLIP baseline values") {
  Tape<double> t;
  auto img = t.constant(rows({{1.0, 0.0}, {0.0, 1.0}}));
  auto txt = t.constant(rows({{1.0, 0.0}, {0.0, 1.0}}));
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(expected == doctest::Approx(0.3133).epsilon(1e-3));
  CHECK(std::abs(euclidean_clip_loss(img, txt, scalar(t, 1.0)).value().item() - expected) <= 1e-12);

  std::mt19937_64 rng(7);
  auto a = test::random_tensor(rng, {4, 3}), b = test::random_tensor(rng, {4, 3});
  const double base = euclidean_clip_loss(t.constant(a), t.constant(b), scalar(t, 0.2)).value().item();
  for (std::int64_t k = 0; k < 3; ++k) a(2, k) *= 7.5;
  const double scaled = euclidean_clip_loss(t.constant(a), t.constant(b), scalar(t, 0.2)).value().item();
  CHECK(std::abs(base - scaled) <= 1e-12);
}

TEST_CASE("gradients of every loss match finite differences") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const auto& r : gradcheck::loss_suite(seed)) {
      INFO(r.name << " seed " << seed << " rel " << r.fd.max_rel_err);
      CHECK(r.pass);
    }
  }
}

TEST_CASE("op suite passes") {
  for (const auto& r : gradcheck::op_suite(11)) {
    INFO(r.name << " rel " << r.fd.max_rel_err);
    CHECK(r.pass);
  }
}
