#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "hmid/data_synth.hpp"
#include "hmid/encoders.hpp"
#include "hmid/losses.hpp"

namespace hmid::train {

/// Flat key=value configuration. Keys match the field names.
struct TrainConfig {
  std::int64_t batch_size = 64;
  std::int64_t max_iters = 5000;
  double base_lr = 5e-4;
  double weight_decay = 0.2;
  double warmup_frac = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-6;
  double grad_clip = 1.0;
  double mask_ratio = 0.5;
  double tau_init = 0.7;
  double tau_min = 0.01;
  double c_init = 1.0;
  double c_min = 1e-3;
  double c_max = 10.0;
  double cone_k = 0.1;
  losses::LossWeights weights;
  std::uint64_t seed = 0;
  double unmasked_tuning_frac = 0.0;
  bool learn_alpha = true;
  double caption_mid_prob = 0.15;
  double caption_generic_prob = 0.05;
  std::int64_t log_every = 50;
  std::int64_t eval_every = 500;
  bool loader_thread = true;
  std::int64_t teacher_width_mult = 2;
  model::EncoderConfig encoder;

  void set(const std::string& key, const std::string& value, int line = 0);
  /// Throws ConfigError.
  void validate() const;
  /// Canonical key=value text, one key per line in a fixed order.
  std::string to_text() const;
  /// 16 hex digits identifying to_text().
  std::string hash() const;

  static TrainConfig parse(const std::string& text);
  static TrainConfig from_file(const std::filesystem::path& path);
};

enum class Mode : std::uint8_t {
  Student,  // distillation when a teacher is given, otherwise contrastive + entailment only
  Clip,     // Euclidean baseline
  Teacher,  // wide tower, unmasked, no distillation; frozen afterwards
};

/// Linear warmup from 0, then cosine decay to 0 at max_iters.
double lr_at(std::int64_t step, std::int64_t max_iters, double base_lr, double warmup_frac);

struct OptimizerState {
  std::vector<TensorF> m, v;
  std::int64_t step = 0;
};
OptimizerState init_optimizer(const model::Model& m);

/// Teacher tangent vectors (already scaled by the teacher's alphas) for every corpus sample.
struct TeacherCache {
  TensorF image;                // [N, proj_dim]
  std::array<TensorF, 3> text;  // per caption level, [N, proj_dim]
  std::uint64_t checksum = 0;   // teacher parameter checksum when cached
};
TeacherCache build_teacher_cache(const model::Model& teacher, const synth::Corpus& corpus);

struct Batch {
  std::int64_t step = 0;
  std::vector<std::int64_t> samples;      // corpus indices
  std::vector<synth::CaptionLevel> levels;
  model::ImageBatch images;               // masked, centered patch tokens
  std::vector<std::int64_t> text_ids;     // [B * max_text_len]
  std::int64_t size() const { return static_cast<std::int64_t>(samples.size()); }
};

/// Deterministic batch for `step`: epoch-wise shuffles of `pool`, per-row mask
/// seeds and caption levels all derived from (seed, step).
Batch make_batch(const synth::Corpus& corpus, const std::vector<std::int64_t>& pool, const TrainConfig& cfg,
                 std::int64_t step, double mask_ratio);

/// tau >= tau_min and c_min <= c <= c_max, each bound rounded to the nearest float
/// that still satisfies it.
void apply_clamps(model::Model& m, const TrainConfig& cfg);

/// One AdamW step on `student`. Throws NonFiniteError naming the batch samples if
/// the loss or a gradient is not finite, ContractViolation if `student` is frozen.
losses::LossReport train_step(model::Model& student, const TeacherCache* teacher, const Batch& batch,
                              const TrainConfig& cfg, OptimizerState& opt, double lr, Mode mode);

struct MetricsRecord {
  std::int64_t step = 0;
  double lr = 0, total = 0, contrastive = 0, distillation = 0, entailment = 0, tau = 0, c = 0, wall_ms = 0;
  std::string to_json() const;
};

struct StepInfo {
  std::int64_t step;
  double lr;
  const losses::LossReport& report;
  const model::Model& model;
};

struct TrainOptions {
  Mode mode = Mode::Student;
  const model::Model* teacher = nullptr;
  std::filesystem::path out_dir;  // empty: nothing written
  std::function<void(const StepInfo&)> on_step;
};

struct TrainResult {
  model::Model final_model;
  model::Model best_model;
  double best_val_r1 = -1;
  std::int64_t best_step = -1;
  double final_val_r1 = 0;
  std::vector<MetricsRecord> metrics;
  double seconds = 0;
};

/// Writes metrics.jsonl, eval.jsonl, config.txt, final.ckpt and best.ckpt under out_dir.
TrainResult train_loop(const TrainConfig& cfg, const synth::Corpus& corpus, const TrainOptions& opts);

/// Config used for the teacher: width scaled by teacher_width_mult, no masking, no distillation.
TrainConfig teacher_config(TrainConfig cfg);
/// Trains and freezes the teacher; writes teacher.ckpt under out_dir when given.
model::Model train_teacher(const TrainConfig& cfg, const synth::Corpus& corpus, const std::filesystem::path& out_dir);

/// Image-tower training throughput (forward + backward) at a mask ratio.
/// tokens_per_sec counts every patch of each processed image, masked or not,
/// so the ratio between two mask settings is the image throughput ratio.
struct Throughput {
  double images_per_sec = 0;
  double tokens_per_sec = 0;
  std::int64_t tokens_in = 0;  // tokens entering the encoder per image, class token included
};
Throughput image_encoder_throughput(const model::Model& m, const synth::Corpus& corpus, double mask_ratio,
                                    std::int64_t batch, int repeats);

/// Ablation presets.
std::vector<double> mask_sweep_ratios();
struct LossCombo {
  std::string name;
  bool contrastive, entailment, distillation;
};
std::vector<LossCombo> loss_ablation_grid();

}  // namespace hmid::train
