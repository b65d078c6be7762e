#include "hmid/grad_check.hpp"

#include <functional>
#include <numeric>
#include <random>

#include "hmid/encoders.hpp"
#include "hmid/lorentz_ops.hpp"
#include "hmid/losses.hpp"

namespace hmid::gradcheck {

namespace {

using V = ad::Var<double>;
using Tp = ad::Tape<double>;
using Fn = std::function<V(Tp&, V)>;

TensorD uniform(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  TensorD t(std::move(shape));
  for (auto& v : t.buffer()) v = u(rng);
  return t;
}

TensorD normal(std::mt19937_64& rng, Shape shape, double sd) {
  std::normal_distribution<double> g(0.0, sd);
  TensorD t(std::move(shape));
  for (auto& v : t.buffer()) v = g(rng);
  return t;
}

std::vector<std::int64_t> range(std::int64_t lo, std::int64_t hi) {
  std::vector<std::int64_t> v(static_cast<std::size_t>(hi - lo));
  std::iota(v.begin(), v.end(), lo);
  return v;
}

// Reduces an arbitrary op output to a scalar with fixed random weights so every
// output coordinate contributes.
V weighted_sum(Tp& tape, V out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(out, tape.constant(uniform(rng, out.shape(), -1.0, 1.0))));
}

CheckResult check(const std::string& name, const Fn& f, const TensorD& x) {
  CheckResult r;
  r.name = name;
  r.fd = ad::finite_diff_check(f, x);
  r.pass = r.fd.max_rel_err <= kGradTolerance;
  return r;
}

}  // namespace

std::vector<CheckResult> op_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<CheckResult> out;
  auto unary = [&](const std::string& name, std::function<V(V)> op, TensorD x) {
    const auto s = rng();
    out.push_back(check(name, [=](Tp& t, V v) { return weighted_sum(t, op(v), s); }, x));
  };
  const TensorD other = uniform(rng, {3, 4}, 0.5, 1.5);
  const TensorD row = uniform(rng, {4}, 0.5, 1.5);
  const TensorD rhs = uniform(rng, {4, 5}, -1, 1);

  unary("matmul", [&](V a) { return ad::matmul(a, a.tape->constant(rhs)); }, uniform(rng, {3, 4}, -1, 1));
  unary("matmul_nt", [&](V a) { return ad::matmul_nt(a, a); }, uniform(rng, {3, 4}, -1, 1));
  unary("transpose", [](V a) { return ad::transpose(a); }, uniform(rng, {3, 4}, -1, 1));
  unary("add", [&](V a) { return ad::add(a, a.tape->constant(other)); }, uniform(rng, {3, 4}, -1, 1));
  unary("add_row_broadcast", [&](V a) { return ad::add(a.tape->constant(other), a); }, uniform(rng, {4}, -1, 1));
  unary("sub", [&](V a) { return ad::sub(a.tape->constant(other), a); }, uniform(rng, {3, 4}, -1, 1));
  unary("mul", [&](V a) { return ad::mul(a, a); }, uniform(rng, {3, 4}, -1, 1));
  unary("div", [&](V a) { return ad::div(a.tape->constant(other), a); }, uniform(rng, {3, 4}, 0.5, 1.5));
  unary("div_row_broadcast", [&](V a) { return ad::div(a, a.tape->constant(row)); }, uniform(rng, {3, 4}, -1, 1));
  unary("exp", [](V a) { return ad::exp(a); }, uniform(rng, {3, 4}, -1, 1));
  unary("log", [](V a) { return ad::log(a); }, uniform(rng, {3, 4}, 0.5, 2));
  unary("sqrt", [](V a) { return ad::sqrt(a); }, uniform(rng, {3, 4}, 0.5, 2));
  unary("cosh", [](V a) { return ad::cosh(a); }, uniform(rng, {3, 4}, -1, 1));
  unary("sinh", [](V a) { return ad::sinh(a); }, uniform(rng, {3, 4}, -1, 1));
  unary("acosh", [](V a) { return ad::acosh(a); }, uniform(rng, {3, 4}, 1.2, 3));
  unary("asin", [](V a) { return ad::asin(a); }, uniform(rng, {3, 4}, -0.8, 0.8));
  unary("acos", [](V a) { return ad::acos(a); }, uniform(rng, {3, 4}, -0.8, 0.8));
  unary("gelu", [](V a) { return ad::gelu(a); }, uniform(rng, {3, 4}, -2, 2));
  unary("clamp", [](V a) { return ad::clamp(a, -0.5, 0.5); }, uniform(rng, {3, 4}, -0.4, 0.4));
  unary("mean", [](V a) { return ad::mean(a); }, uniform(rng, {3, 4}, -1, 1));
  unary("row_sum", [](V a) { return ad::row_sum(a); }, uniform(rng, {3, 4}, -1, 1));
  unary("softmax_rows", [](V a) { return ad::softmax_rows(a); }, uniform(rng, {3, 4}, -2, 2));
  unary("log_softmax_rows", [](V a) { return ad::log_softmax_rows(a); }, uniform(rng, {3, 4}, -2, 2));
  unary("pick", [](V a) { return ad::pick(a, {0, 3, 1}); }, uniform(rng, {3, 4}, -1, 1));
  unary("gather_rows", [](V a) { return ad::gather_rows(a, {2, 0, 2}); }, uniform(rng, {3, 4}, -1, 1));
  unary("concat_rows", [](V a) { return ad::concat_rows(std::vector<V>{a, ad::scale(a, 2.0)}); },
        uniform(rng, {3, 4}, -1, 1));
  unary("embedding_lookup", [](V a) { return ad::embedding_lookup(a, {1, 1, 2}); }, uniform(rng, {3, 4}, -1, 1));
  {
    const TensorD gain = uniform(rng, {4}, 0.5, 1.5), bias = uniform(rng, {4}, -0.5, 0.5);
    unary("layer_norm",
          [=](V a) { return ad::layer_norm(a, a.tape->constant(gain), a.tape->constant(bias)); },
          uniform(rng, {3, 4}, -1, 1));
  }
  unary("attention", [](V a) { return ad::attention(a, 2, 3, 2, false); }, uniform(rng, {6, 12}, -1, 1));
  unary("attention_causal", [](V a) { return ad::attention(a, 2, 3, 2, true); }, uniform(rng, {6, 12}, -1, 1));

  const TensorD pts = normal(rng, {3, 4}, 0.8);
  const TensorD pts2 = normal(rng, {2, 4}, 0.8);
  unary("exp_map_origin", [](V a) { return lorentz::ad::exp_map_origin(a, a.tape->constant(TensorD::scalar(0.8))); },
        normal(rng, {3, 4}, 0.6));
  unary("pairwise_distance",
        [=](V a) { return lorentz::ad::pairwise_distance(a, a.tape->constant(pts), a.tape->constant(TensorD::scalar(1.3))); },
        normal(rng, {3, 4}, 0.8));
  unary("half_aperture_rows",
        [](V a) { return lorentz::ad::half_aperture_rows(a, a.tape->constant(TensorD::scalar(1.0)), 0.1); },
        uniform(rng, {3, 4}, 0.5, 1.5));
  unary("exterior_angle_rows",
        [=](V a) { return lorentz::ad::exterior_angle_rows(a, a.tape->constant(pts), a.tape->constant(TensorD::scalar(0.7))); },
        normal(rng, {3, 4}, 0.8));
  unary("curvature_of_distance",
        [=](V c) {
          return lorentz::ad::pairwise_distance(c.tape->constant(pts), c.tape->constant(pts2), c); },
        TensorD::scalar(0.9));
  return out;
}

std::vector<CheckResult> loss_suite(std::uint64_t seed, std::int64_t B, std::int64_t n) {
  std::mt19937_64 rng(seed);
  const TensorD vectors = normal(rng, {2 * B, n}, 0.5);        // student image rows, then text rows
  const TensorD teacher = normal(rng, {2 * B, n}, 0.5);        // frozen teacher tangents
  const TensorD scalars({4}, std::vector<double>{0.3, 0.8, 1.1, 0.9});  // tau, c, alpha_img, alpha_txt
  const double K = 0.1;

  struct Inputs {
    V img, txt, t_img, t_txt, tau, c, a_img, a_txt;
  };
  // Builds projected student/teacher embeddings from raw vectors and scalars.
  auto build = [=](Tp& t, V vec, V sc) {
    Inputs in;
    auto s = ad::reshape(sc, {4, 1});
    in.tau = ad::gather_rows(s, {0});
    in.c = ad::gather_rows(s, {1});
    in.a_img = ad::gather_rows(s, {2});
    in.a_txt = ad::gather_rows(s, {3});
    in.img = ad::gather_rows(vec, range(0, B));
    in.txt = ad::gather_rows(vec, range(B, 2 * B));
    auto tv = t.constant(teacher);
    in.t_img = model::project_to_hyperbolic(ad::gather_rows(tv, range(0, B)), in.a_img, in.c);
    in.t_txt = model::project_to_hyperbolic(ad::gather_rows(tv, range(B, 2 * B)), in.a_txt, in.c);
    return in;
  };
  auto student = [](const Inputs& in) {
    return losses::EmbeddingBatch<double>{model::project_to_hyperbolic(in.img, in.a_img, in.c),
                                          model::project_to_hyperbolic(in.txt, in.a_txt, in.c)};
  };

  using LossFn = std::function<V(const Inputs&)>;
  std::vector<std::pair<std::string, LossFn>> losses_to_check = {
      {"clip", [](const Inputs& in) { return losses::euclidean_clip_loss(in.img, in.txt, in.tau); }},
      {"contrastive",
       [=](const Inputs& in) { return losses::hyperbolic_contrastive_loss(student(in), in.tau, in.c); }},
      {"distillation",
       [=](const Inputs& in) {
         losses::EmbeddingBatch<double> t{in.t_img, in.t_txt, losses::Source::Teacher};
         return losses::interaction_distillation_loss(student(in), t, in.tau, in.c);
       }},
      {"entailment", [=](const Inputs& in) { return losses::entailment_loss(student(in), in.c, K); }},
      {"total",
       [=](const Inputs& in) {
         losses::EmbeddingBatch<double> t{in.t_img, in.t_txt, losses::Source::Teacher};
         return losses::total_loss(student(in), &t, in.tau, in.c, K, losses::LossWeights{}).total;
       }},
  };

  std::vector<CheckResult> out;
  for (const auto& [name, loss] : losses_to_check) {
    out.push_back(check(name + "/vectors",
                        [=](Tp& t, V v) { return loss(build(t, v, t.constant(scalars))); }, vectors));
    out.push_back(check(name + "/scalars",
                        [=](Tp& t, V s) { return loss(build(t, t.constant(vectors), s)); }, scalars));
  }
  return out;
}

}  // namespace hmid::gradcheck
