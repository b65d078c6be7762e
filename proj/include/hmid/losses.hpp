#pragma once

// Training objectives. Embeddings are passed as space parts of hyperboloid
// points (one row per sample) on the same tape as tau and c.

#include <atomic>
#include <cstdint>

#include "hmid/autograd.hpp"

namespace hmid::losses {

using ad::Var;

inline constexpr double kTauMin = 0.01;

struct LossWeights {
  double distillation = 1.0;
  double entailment = 0.2;
  /// Throws ConfigError for negative or non-finite weights.
  void validate() const;
};

enum class Source : std::uint8_t { Student, Teacher };

template <typename T>
struct EmbeddingBatch {
  Var<T> image;  // [B, n]
  Var<T> text;   // [B, n]; row i is paired with image row i
  Source source = Source::Student;
};

/// Symmetric cross-entropy terms; `loss` = (i2t + t2i) / 2.
template <typename T>
struct PairTerms {
  Var<T> loss, i2t, t2i;
};

/// Mean cross-entropy of each row of `logits` against the diagonal target.
template <typename T>
Var<T> diagonal_cross_entropy(Var<T> logits);

/// Logits -d_L(img_i, txt_j) / tau, cross-entropy in both directions.
template <typename T>
PairTerms<T> hyperbolic_contrastive_terms(const EmbeddingBatch<T>& batch, Var<T> tau, Var<T> c);
template <typename T>
Var<T> hyperbolic_contrastive_loss(const EmbeddingBatch<T>& batch, Var<T> tau, Var<T> c) {
  return hyperbolic_contrastive_terms(batch, tau, c).loss;
}

/// i2t: student images against teacher texts; t2i: student texts against teacher images.
template <typename T>
PairTerms<T> interaction_distillation_terms(const EmbeddingBatch<T>& student, const EmbeddingBatch<T>& teacher,
                                            Var<T> tau, Var<T> c);
template <typename T>
Var<T> interaction_distillation_loss(const EmbeddingBatch<T>& student, const EmbeddingBatch<T>& teacher, Var<T> tau,
                                     Var<T> c) {
  return interaction_distillation_terms(student, teacher, tau, c).loss;
}

/// Mean cone violation with text as the cone apex and the paired image as the
/// point tested. Texts at the root use the clamped aperture and bump `root_hits`.
template <typename T>
Var<T> entailment_loss(const EmbeddingBatch<T>& batch, Var<T> c, T K,
                       std::atomic<std::int64_t>* root_hits = nullptr);

struct LossReport {
  double total = 0, contrastive = 0, distillation = 0, entailment = 0;
  double contrastive_i2t = 0, contrastive_t2i = 0;
  double distill_i2t = 0, distill_t2i = 0;
  std::int64_t root_hits = 0;
};

template <typename T>
struct TotalLoss {
  Var<T> total;
  LossReport report;
};

/// contrastive + w.distillation * distillation + w.entailment * entailment.
/// Without a teacher the distillation term is absent (reported as 0).
template <typename T>
TotalLoss<T> total_loss(const EmbeddingBatch<T>& student, const EmbeddingBatch<T>* teacher, Var<T> tau, Var<T> c,
                        T K, const LossWeights& weights);

/// CLIP baseline: cosine-similarity logits / tau, symmetric cross-entropy.
template <typename T>
Var<T> euclidean_clip_loss(Var<T> image, Var<T> text, Var<T> tau);

}  // namespace hmid::losses
