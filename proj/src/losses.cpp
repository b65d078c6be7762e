#include "hmid/losses.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "hmid/lorentz_ops.hpp"

namespace hmid::losses {

void LossWeights::validate() const {
  if (!(std::isfinite(distillation) && distillation >= 0.0))
    throw ConfigError("lambda_distill must be finite and non-negative");
  if (!(std::isfinite(entailment) && entailment >= 0.0))
    throw ConfigError("lambda_entail must be finite and non-negative");
}

namespace {

template <typename T>
void require_tau(Var<T> tau) {
  const T t = tau.value().item();
  HMID_REQUIRE(t >= static_cast<T>(kTauMin), "temperature " + std::to_string(t) + " is below tau_min");
}

template <typename T>
void require_pairs(const EmbeddingBatch<T>& b, const char* what) {
  HMID_REQUIRE(b.image.rows() >= 1, std::string(what) + ": empty batch");
  HMID_REQUIRE(b.image.shape() == b.text.shape(), std::string(what) + ": image/text batch shapes differ");
}

template <typename T>
Var<T> logits_from_distance(Var<T> x, Var<T> y, Var<T> tau, Var<T> c) {
  return ad::div(ad::neg(lorentz::ad::pairwise_distance(x, y, c)), tau);
}

template <typename T>
Var<T> half_sum(Var<T> a, Var<T> b) {
  return ad::scale(ad::add(a, b), T(0.5));
}

}  // namespace

template <typename T>
Var<T> diagonal_cross_entropy(Var<T> logits) {
  HMID_REQUIRE(logits.rows() == logits.cols(), "diagonal_cross_entropy needs a square logit matrix");
  std::vector<std::int64_t> diag(static_cast<std::size_t>(logits.rows()));
  std::iota(diag.begin(), diag.end(), 0);
  return ad::neg(ad::mean(ad::pick(ad::log_softmax_rows(logits), diag)));
}

template <typename T>
PairTerms<T> hyperbolic_contrastive_terms(const EmbeddingBatch<T>& batch, Var<T> tau, Var<T> c) {
  require_pairs(batch, "hyperbolic_contrastive_loss");
  require_tau(tau);
  auto logits = logits_from_distance(batch.image, batch.text, tau, c);
  PairTerms<T> out;
  out.i2t = diagonal_cross_entropy(logits);
  out.t2i = diagonal_cross_entropy(ad::transpose(logits));
  out.loss = half_sum(out.i2t, out.t2i);
  return out;
}

template <typename T>
PairTerms<T> interaction_distillation_terms(const EmbeddingBatch<T>& student, const EmbeddingBatch<T>& teacher,
                                            Var<T> tau, Var<T> c) {
  require_pairs(student, "interaction_distillation_loss");
  require_pairs(teacher, "interaction_distillation_loss");
  HMID_REQUIRE(student.image.shape() == teacher.image.shape(),
               "interaction_distillation_loss: student/teacher batch mismatch " + shape_str(student.image.shape()) +
                   " vs " + shape_str(teacher.image.shape()));
  require_tau(tau);
  PairTerms<T> out;
  out.i2t = diagonal_cross_entropy(logits_from_distance(student.image, teacher.text, tau, c));
  out.t2i = diagonal_cross_entropy(logits_from_distance(student.text, teacher.image, tau, c));
  out.loss = half_sum(out.i2t, out.t2i);
  return out;
}

template <typename T>
Var<T> entailment_loss(const EmbeddingBatch<T>& batch, Var<T> c, T K, std::atomic<std::int64_t>* root_hits) {
  require_pairs(batch, "entailment_loss");
  auto aperture = lorentz::ad::half_aperture_rows(batch.text, c, K, root_hits);
  auto exterior = lorentz::ad::exterior_angle_rows(batch.text, batch.image, c);
  auto violation = ad::clamp(ad::sub(exterior, aperture), T(0), std::numeric_limits<T>::infinity());
  return ad::mean(violation);
}

template <typename T>
TotalLoss<T> total_loss(const EmbeddingBatch<T>& student, const EmbeddingBatch<T>* teacher, Var<T> tau, Var<T> c,
                        T K, const LossWeights& weights) {
  weights.validate();
  TotalLoss<T> out;
  auto& r = out.report;
  auto con = hyperbolic_contrastive_terms(student, tau, c);
  r.contrastive = con.loss.value().item();
  r.contrastive_i2t = con.i2t.value().item();
  r.contrastive_t2i = con.t2i.value().item();
  Var<T> total = con.loss;

  if (teacher) {
    auto dist = interaction_distillation_terms(student, *teacher, tau, c);
    r.distillation = dist.loss.value().item();
    r.distill_i2t = dist.i2t.value().item();
    r.distill_t2i = dist.t2i.value().item();
    total = ad::add(total, ad::scale(dist.loss, static_cast<T>(weights.distillation)));
  }
  std::atomic<std::int64_t> hits{0};
  auto ent = entailment_loss(student, c, K, &hits);
  r.entailment = ent.value().item();
  r.root_hits = hits.load();
  total = ad::add(total, ad::scale(ent, static_cast<T>(weights.entailment)));
  out.total = total;
  r.total = total.value().item();
  return out;
}

template <typename T>
Var<T> euclidean_clip_loss(Var<T> image, Var<T> text, Var<T> tau) {
  HMID_REQUIRE(image.shape() == text.shape() && image.rows() >= 1, "euclidean_clip_loss: batch shape mismatch");
  require_tau(tau);
  auto normalize = [](Var<T> x) {
    auto norm = ad::sqrt(ad::row_sum(ad::mul(x, x)));
    for (T n : norm.value().values()) HMID_REQUIRE(n > T(0), "euclidean_clip_loss: zero-norm embedding");
    return ad::div(x, norm);
  };
  auto logits = ad::div(ad::matmul_nt(normalize(image), normalize(text)), tau);
  return half_sum(diagonal_cross_entropy(logits), diagonal_cross_entropy(ad::transpose(logits)));
}

#define HMID_LOSSES_INSTANTIATE(T)                                                                            \
  template Var<T> diagonal_cross_entropy(Var<T>);                                                             \
  template PairTerms<T> hyperbolic_contrastive_terms(const EmbeddingBatch<T>&, Var<T>, Var<T>);              \
  template PairTerms<T> interaction_distillation_terms(const EmbeddingBatch<T>&, const EmbeddingBatch<T>&,   \
                                                       Var<T>, Var<T>);                                       \
  template Var<T> entailment_loss(const EmbeddingBatch<T>&, Var<T>, T, std::atomic<std::int64_t>*);         \
  template TotalLoss<T> total_loss(const EmbeddingBatch<T>&, const EmbeddingBatch<T>*, Var<T>, Var<T>, T,    \
                                   const LossWeights&);                                                       \
  template Var<T> euclidean_clip_loss(Var<T>, Var<T>, Var<T>);

HMID_LOSSES_INSTANTIATE(float)
HMID_LOSSES_INSTANTIATE(double)

}  // namespace hmid::losses
