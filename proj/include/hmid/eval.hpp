#pragma once

// Zero-shot classification, retrieval and geodesic traversal over embedded
// corpora. Hyperbolic models are compared by -d_L, Euclidean ones by cosine.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hmid/data_synth.hpp"
#include "hmid/encoders.hpp"
#include "hmid/tensor.hpp"

namespace hmid::eval {

/// Embedded points: space parts on the hyperboloid, or unit vectors for Euclidean models.
struct Embedded {
  TensorD points;  // [N, proj_dim]
  model::Geometry geometry = model::Geometry::Hyperbolic;
  double curvature = 1.0;
};

/// Full (unmasked) images through the image tower and projection.
Embedded embed_images(const model::Model& m, const synth::Corpus& corpus, const std::vector<std::int64_t>& indices);
Embedded embed_images(const model::Model& m, const std::vector<TensorF>& images);
Embedded embed_texts(const model::Model& m, const std::vector<std::string>& captions);

/// score[i][j]: -d_L(a_i, b_j) or cosine similarity. Larger is more similar.
TensorD similarity(const Embedded& a, const Embedded& b);
/// <a_i, b_j>_L for hyperbolic embeddings.
TensorD lorentz_inner_matrix(const Embedded& a, const Embedded& b);

/// Zero-based rank of column `target` in row `row`: candidates with a higher score,
/// plus equal-score candidates with a lower index, come first.
std::int64_t rank_of(const TensorD& scores, std::int64_t row, std::int64_t target);

struct RecallTable {
  std::vector<int> ks;
  std::map<int, double> image_to_text;
  std::map<int, double> text_to_image;
  double mean_r1() const;
};
/// scores[i][j] between image i and caption j; the true partner of i is j = i.
RecallTable retrieval_recall(const TensorD& scores, const std::vector<int>& ks = {1, 5, 10});
RecallTable retrieval_recall(const model::Model& m, const synth::Corpus& corpus,
                             const std::vector<std::int64_t>& indices, const std::vector<int>& ks = {1, 5, 10});

struct ClassReport {
  std::string prompt;
  std::int64_t support = 0;    // images carrying this label
  std::int64_t predicted = 0;  // images assigned this class
  std::int64_t correct = 0;    // assigned this class and carrying the label
};
struct ClassifyResult {
  double accuracy = 0;
  std::vector<std::int64_t> predictions;
  std::vector<ClassReport> per_class;
};
/// Predicts argmax over prompts (lowest index wins ties). A prediction is correct
/// when it is among the image's labels.
ClassifyResult zero_shot_classify(const Embedded& images, const Embedded& prompts,
                                  const std::vector<std::string>& prompt_text,
                                  const std::vector<std::vector<std::int64_t>>& labels);

/// Walks t = 0, 1/steps, ..., (steps-1)/steps from `image_row` toward the root and
/// keeps the pool caption with the largest Lorentz inner product at each step;
/// duplicates removed in first-seen order, truncated to `max_out`.
std::vector<std::int64_t> geodesic_traversal(const Embedded& images, std::int64_t image_row, const Embedded& pool,
                                             int steps = 50, std::size_t max_out = 5);
/// Same walk ranked by -d_L instead of the inner product.
std::vector<std::int64_t> geodesic_traversal_by_distance(const Embedded& images, std::int64_t image_row,
                                                         const Embedded& pool, int steps = 50, std::size_t max_out = 5);

struct HierarchyReport {
  double image = 0, specific = 0, mid = 0, generic = 0;  // mean space norms
  bool ordered() const { return generic < mid && mid < specific && specific < image; }
};
HierarchyReport hierarchy_radius_report(const model::Model& m, const synth::Corpus& corpus,
                                        const std::vector<std::int64_t>& indices);

struct TraversalSummary {
  std::int64_t images = 0;
  std::int64_t level_success = 0;  // collapsed level sequence == specific, mid, generic
  std::int64_t own_success = 0;    // ... and every caption belongs to the query image
  double level_rate() const { return images ? double(level_success) / images : 0.0; }
  double own_rate() const { return images ? double(own_success) / images : 0.0; }
  std::vector<std::vector<std::string>> outputs;
};
/// Pool: every distinct caption of the given samples at all three levels.
TraversalSummary traversal_eval(const model::Model& m, const synth::Corpus& corpus,
                                const std::vector<std::int64_t>& indices, int steps = 50);

/// Color+kind phrases ("rO", "bS", ...) used as zero-shot class prompts.
std::vector<std::string> shape_class_prompts();
/// Labels per image: indices into shape_class_prompts() of the shapes present.
std::vector<std::vector<std::int64_t>> shape_class_labels(const synth::Corpus& corpus,
                                                          const std::vector<std::int64_t>& indices);

}  // namespace hmid::eval
