#include "hmid/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <unordered_map>

#include "hmid/lorentz.hpp"
#include "hmid/lorentz_ops.hpp"

namespace hmid::eval {

namespace {

constexpr std::int64_t kChunk = 128;

// Tangent vectors -> embedded points in double precision.
Embedded finish(const model::Model& m, const TensorF& tangent, float alpha) {
  Embedded out;
  out.geometry = m.geometry;
  out.curvature = m.curvature();
  TensorD v = tangent.cast<double>();
  if (m.geometry == model::Geometry::Euclidean) {
    for (std::int64_t i = 0; i < v.rows(); ++i) {
      double n = 0;
      for (double x : v.row(i)) n += x * x;
      n = std::sqrt(n);
      HMID_REQUIRE(n > 0.0, "zero-norm embedding cannot be normalized");
      for (double& x : v.row(i)) x /= n;
    }
    out.points = std::move(v);
    return out;
  }
  ad::Tape<double> tape;
  auto p = model::project_to_hyperbolic(tape.constant(std::move(v)), tape.constant(TensorD::scalar(alpha)),
                                        tape.constant(TensorD::scalar(out.curvature)));
  out.points = p.value();
  return out;
}

TensorF stack_rows(const std::vector<TensorF>& parts, std::int64_t cols) {
  std::int64_t rows = 0;
  for (const auto& p : parts) rows += p.rows();
  TensorF out({rows, cols});
  std::int64_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.data() + r * cols);
    r += p.rows();
  }
  return out;
}

std::vector<double> time_components(const Embedded& e) {
  std::vector<double> t(static_cast<std::size_t>(e.points.rows()));
  for (std::int64_t i = 0; i < e.points.rows(); ++i) {
    double s = 0;
    for (double x : e.points.row(i)) s += x * x;
    t[static_cast<std::size_t>(i)] = std::sqrt(1.0 / e.curvature + s);
  }
  return t;
}

lorentz::LorentzPoint point_of(const Embedded& e, std::int64_t row) {
  const auto r = e.points.row(row);
  return lorentz::lift_to_hyperboloid(std::vector<double>(r.begin(), r.end()), lorentz::Curvature(e.curvature));
}

template <typename Score>
std::vector<std::int64_t> traverse(const Embedded& images, std::int64_t image_row, const Embedded& pool, int steps,
                                   std::size_t max_out, Score score) {
  HMID_REQUIRE(images.geometry == model::Geometry::Hyperbolic, "geodesic traversal needs hyperbolic embeddings");
  HMID_REQUIRE(pool.points.rows() >= 1, "geodesic traversal needs a nonempty caption pool");
  HMID_REQUIRE(steps >= 1, "geodesic traversal needs at least one step");
  const lorentz::Curvature c(images.curvature);
  const auto x = point_of(images, image_row);
  const auto root = lorentz::origin(x.dim(), c);
  std::vector<lorentz::LorentzPoint> cands;
  for (std::int64_t j = 0; j < pool.points.rows(); ++j) cands.push_back(point_of(pool, j));

  std::vector<std::int64_t> out;
  for (int k = 0; k < steps && out.size() < max_out; ++k) {
    const auto g = lorentz::geodesic_interpolate(x, root, static_cast<double>(k) / steps, c);
    std::int64_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cands.size(); ++j) {
      const double s = score(g, cands[j], c);
      if (s > best_score) {
        best_score = s;
        best = static_cast<std::int64_t>(j);
      }
    }
    if (std::find(out.begin(), out.end(), best) == out.end()) out.push_back(best);
  }
  return out;
}

}  // namespace

Embedded embed_images(const model::Model& m, const std::vector<TensorF>& images) {
  HMID_REQUIRE(!images.empty(), "embed_images: no images");
  std::vector<TensorF> parts;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    std::vector<masking::PatchSequence> seqs;
    for (std::size_t i = start; i < std::min(images.size(), start + kChunk); ++i)
      seqs.push_back(model::image_tokens(images[i], m.config.patch_size));
    ad::Tape<float> tape;
    model::Bound p(tape, m, false);
    parts.push_back(model::encode_image(p, model::stack_patches(seqs)).value());
  }
  return finish(m, stack_rows(parts, m.config.proj_dim), m.alpha_img());
}

Embedded embed_images(const model::Model& m, const synth::Corpus& corpus, const std::vector<std::int64_t>& indices) {
  std::vector<TensorF> images;
  images.reserve(indices.size());
  for (auto i : indices) images.push_back(corpus.image(static_cast<std::size_t>(i)));
  return embed_images(m, images);
}

Embedded embed_texts(const model::Model& m, const std::vector<std::string>& captions) {
  HMID_REQUIRE(!captions.empty(), "embed_texts: no captions");
  const auto L = m.config.max_text_len;
  std::vector<TensorF> parts;
  for (std::size_t start = 0; start < captions.size(); start += kChunk) {
    const auto end = std::min(captions.size(), start + kChunk);
    std::vector<std::int64_t> ids;
    for (std::size_t i = start; i < end; ++i) {
      auto t = synth::tokenize(captions[i], L);
      ids.insert(ids.end(), t.begin(), t.end());
    }
    ad::Tape<float> tape;
    model::Bound p(tape, m, false);
    parts.push_back(model::encode_text(p, ids, static_cast<std::int64_t>(end - start)).value());
  }
  return finish(m, stack_rows(parts, m.config.proj_dim), m.alpha_txt());
}

TensorD similarity(const Embedded& a, const Embedded& b) {
  HMID_REQUIRE(a.geometry == b.geometry, "similarity: mixed geometries");
  HMID_REQUIRE(a.points.cols() == b.points.cols(), "similarity: dimension mismatch");
  ad::Tape<double> tape;
  auto A = tape.constant(a.points), B = tape.constant(b.points);
  if (a.geometry == model::Geometry::Euclidean) return ad::matmul_nt(A, B).value();
  HMID_REQUIRE(a.curvature == b.curvature, "similarity: embeddings use different curvatures");
  auto d = lorentz::ad::pairwise_distance(A, B, tape.constant(TensorD::scalar(a.curvature))).value();
  for (auto& v : d.buffer()) v = -v;
  return d;
}

TensorD lorentz_inner_matrix(const Embedded& a, const Embedded& b) {
  const auto ta = time_components(a), tb = time_components(b);
  const auto N = a.points.rows(), M = b.points.rows(), n = a.points.cols();
  TensorD out({N, M});
  for (std::int64_t i = 0; i < N; ++i)
    for (std::int64_t j = 0; j < M; ++j) {
      double s = -ta[static_cast<std::size_t>(i)] * tb[static_cast<std::size_t>(j)];
      for (std::int64_t k = 0; k < n; ++k) s += a.points(i, k) * b.points(j, k);
      out(i, j) = s;
    }
  return out;
}

std::int64_t rank_of(const TensorD& scores, std::int64_t row, std::int64_t target) {
  const double s = scores(row, target);
  std::int64_t rank = 0;
  for (std::int64_t j = 0; j < scores.cols(); ++j) {
    const double v = scores(row, j);
    if (v > s || (v == s && j < target)) ++rank;
  }
  return rank;
}

double RecallTable::mean_r1() const { return 0.5 * (image_to_text.at(1) + text_to_image.at(1)); }

RecallTable retrieval_recall(const TensorD& scores, const std::vector<int>& ks) {
  HMID_REQUIRE(scores.rank() == 2 && scores.rows() == scores.cols() && scores.rows() >= 1,
               "retrieval needs a square score matrix with 1:1 pairing");
  const auto N = scores.rows();
  TensorD transposed({N, N});
  for (std::int64_t i = 0; i < N; ++i)
    for (std::int64_t j = 0; j < N; ++j) transposed(j, i) = scores(i, j);
  RecallTable t;
  t.ks = ks;
  for (int k : ks) {
    std::int64_t hit_i2t = 0, hit_t2i = 0;
    for (std::int64_t i = 0; i < N; ++i) {
      hit_i2t += rank_of(scores, i, i) < k;
      hit_t2i += rank_of(transposed, i, i) < k;
    }
    t.image_to_text[k] = static_cast<double>(hit_i2t) / N;
    t.text_to_image[k] = static_cast<double>(hit_t2i) / N;
  }
  return t;
}

RecallTable retrieval_recall(const model::Model& m, const synth::Corpus& corpus,
                             const std::vector<std::int64_t>& indices, const std::vector<int>& ks) {
  std::vector<std::string> caps;
  for (auto i : indices) caps.push_back(corpus.samples[static_cast<std::size_t>(i)].captions.specific);
  return retrieval_recall(similarity(embed_images(m, corpus, indices), embed_texts(m, caps)), ks);
}

ClassifyResult zero_shot_classify(const Embedded& images, const Embedded& prompts,
                                  const std::vector<std::string>& prompt_text,
                                  const std::vector<std::vector<std::int64_t>>& labels) {
  if (prompts.points.rows() == 0) throw ConfigError("zero-shot classification needs class prompts");
  HMID_REQUIRE(prompts.points.rows() >= 2, "zero-shot classification needs at least two classes");
  HMID_REQUIRE(static_cast<std::int64_t>(prompt_text.size()) == prompts.points.rows(), "prompt text/embedding mismatch");
  HMID_REQUIRE(static_cast<std::int64_t>(labels.size()) == images.points.rows(), "one label set per image required");
  const TensorD scores = similarity(images, prompts);
  ClassifyResult r;
  for (const auto& p : prompt_text) r.per_class.push_back({p});
  std::int64_t correct = 0;
  for (std::int64_t i = 0; i < scores.rows(); ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < scores.cols(); ++j)
      if (scores(i, j) > scores(i, best)) best = j;
    r.predictions.push_back(best);
    const auto& lab = labels[static_cast<std::size_t>(i)];
    const bool ok = std::find(lab.begin(), lab.end(), best) != lab.end();
    correct += ok;
    auto& pc = r.per_class[static_cast<std::size_t>(best)];
    ++pc.predicted;
    pc.correct += ok;
    for (auto l : lab) ++r.per_class.at(static_cast<std::size_t>(l)).support;
  }
  r.accuracy = scores.rows() ? static_cast<double>(correct) / scores.rows() : 0.0;
  return r;
}

std::vector<std::int64_t> geodesic_traversal(const Embedded& images, std::int64_t image_row, const Embedded& pool,
                                             int steps, std::size_t max_out) {
  return traverse(images, image_row, pool, steps, max_out,
                  [](const lorentz::LorentzPoint& g, const lorentz::LorentzPoint& y, lorentz::Curvature) {
                    return lorentz::lorentz_inner(g, y);
                  });
}

std::vector<std::int64_t> geodesic_traversal_by_distance(const Embedded& images, std::int64_t image_row,
                                                         const Embedded& pool, int steps, std::size_t max_out) {
  return traverse(images, image_row, pool, steps, max_out,
                  [](const lorentz::LorentzPoint& g, const lorentz::LorentzPoint& y, lorentz::Curvature c) {
                    return -lorentz::lorentz_distance(g, y, c);
                  });
}

namespace {

double mean_norm(const TensorD& points) {
  double total = 0;
  for (std::int64_t i = 0; i < points.rows(); ++i) {
    double s = 0;
    for (double v : points.row(i)) s += v * v;
    total += std::sqrt(s);
  }
  return points.rows() ? total / points.rows() : 0.0;
}

}  // namespace

HierarchyReport hierarchy_radius_report(const model::Model& m, const synth::Corpus& corpus,
                                        const std::vector<std::int64_t>& indices) {
  std::vector<std::string> spec, mid, gen;
  for (auto i : indices) {
    const auto& c = corpus.samples[static_cast<std::size_t>(i)].captions;
    spec.push_back(c.specific);
    mid.push_back(c.mid);
    gen.push_back(c.generic);
  }
  HierarchyReport r;
  r.image = mean_norm(embed_images(m, corpus, indices).points);
  r.specific = mean_norm(embed_texts(m, spec).points);
  r.mid = mean_norm(embed_texts(m, mid).points);
  r.generic = mean_norm(embed_texts(m, gen).points);
  return r;
}

TraversalSummary traversal_eval(const model::Model& m, const synth::Corpus& corpus,
                                const std::vector<std::int64_t>& indices, int steps) {
  std::vector<std::string> pool;
  std::unordered_map<std::string, synth::CaptionLevel> level_of;
  auto add = [&](const std::string& s, synth::CaptionLevel l) {
    if (level_of.emplace(s, l).second) pool.push_back(s);
  };
  for (auto i : indices) {
    const auto& c = corpus.samples[static_cast<std::size_t>(i)].captions;
    add(c.specific, synth::CaptionLevel::Specific);
    add(c.mid, synth::CaptionLevel::Mid);
    add(c.generic, synth::CaptionLevel::Generic);
  }
  const auto images = embed_images(m, corpus, indices);
  const auto texts = embed_texts(m, pool);
  const std::vector<synth::CaptionLevel> expected{synth::CaptionLevel::Specific, synth::CaptionLevel::Mid,
                                                  synth::CaptionLevel::Generic};
  TraversalSummary s;
  for (std::size_t q = 0; q < indices.size(); ++q) {
    const auto& own = corpus.samples[static_cast<std::size_t>(indices[q])].captions;
    const auto picked = geodesic_traversal(images, static_cast<std::int64_t>(q), texts, steps);
    std::vector<std::string> names;
    std::vector<synth::CaptionLevel> levels;
    bool all_own = true;
    for (auto j : picked) {
      const auto& cap = pool[static_cast<std::size_t>(j)];
      names.push_back(cap);
      const auto l = level_of.at(cap);
      if (levels.empty() || levels.back() != l) levels.push_back(l);
      all_own = all_own && (cap == own.specific || cap == own.mid || cap == own.generic);
    }
    ++s.images;
    const bool ok = levels == expected;
    s.level_success += ok;
    s.own_success += ok && all_own;
    s.outputs.push_back(std::move(names));
  }
  return s;
}

std::vector<std::string> shape_class_prompts() {
  std::vector<std::string> out;
  for (const auto& col : synth::palette())
    for (char kind : {'O', 'S', 'T'}) out.push_back(std::string{col.code, kind});
  return out;
}

std::vector<std::vector<std::int64_t>> shape_class_labels(const synth::Corpus& corpus,
                                                          const std::vector<std::int64_t>& indices) {
  const auto prompts = shape_class_prompts();
  std::vector<std::vector<std::int64_t>> out;
  for (auto i : indices) {
    std::vector<std::int64_t> lab;
    std::istringstream ss(corpus.samples[static_cast<std::size_t>(i)].captions.specific);
    std::string tok;
    while (ss >> tok) {
      tok.resize(2);  // drop the cell
      const auto it = std::find(prompts.begin(), prompts.end(), tok);
      HMID_REQUIRE(it != prompts.end(), "unexpected shape token '" + tok + "'");
      const auto idx = static_cast<std::int64_t>(it - prompts.begin());
      if (std::find(lab.begin(), lab.end(), idx) == lab.end()) lab.push_back(idx);
    }
    out.push_back(std::move(lab));
  }
  return out;
}

}  // namespace hmid::eval
