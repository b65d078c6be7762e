#include "hmid/trainer.hpp"

#include <algorithm>
#include <cassert>
#include <charconv>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "hmid/eval.hpp"
#include "hmid/log.hpp"
#include "hmid/lorentz_ops.hpp"

namespace hmid::train {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- config --------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v, int line) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty())
    throw ConfigError("bad value '" + v + "' for " + key, line);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v, int line) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean '" + v + "' for " + key, line);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value, int line) {
  const std::string v = trim(value);
  auto i64 = [&] { return parse_number<std::int64_t>(key, v, line); };
  auto f64 = [&] { return parse_number<double>(key, v, line); };
  if (key == "batch_size") batch_size = i64();
  else if (key == "max_iters") max_iters = i64();
  else if (key == "base_lr") base_lr = f64();
  else if (key == "weight_decay") weight_decay = f64();
  else if (key == "warmup_frac") warmup_frac = f64();
  else if (key == "beta1") beta1 = f64();
  else if (key == "beta2") beta2 = f64();
  else if (key == "adam_eps") adam_eps = f64();
  else if (key == "grad_clip") grad_clip = f64();
  else if (key == "mask_ratio") mask_ratio = f64();
  else if (key == "tau_init") tau_init = f64();
  else if (key == "tau_min") tau_min = f64();
  else if (key == "c_init") c_init = f64();
  else if (key == "c_min") c_min = f64();
  else if (key == "c_max") c_max = f64();
  else if (key == "cone_k") cone_k = f64();
  else if (key == "lambda_distill") weights.distillation = f64();
  else if (key == "lambda_entail") weights.entailment = f64();
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, v, line);
  else if (key == "unmasked_tuning_frac") unmasked_tuning_frac = f64();
  else if (key == "learn_alpha") learn_alpha = parse_bool(key, v, line);
  else if (key == "caption_mid_prob") caption_mid_prob = f64();
  else if (key == "caption_generic_prob") caption_generic_prob = f64();
  else if (key == "log_every") log_every = i64();
  else if (key == "eval_every") eval_every = i64();
  else if (key == "loader_thread") loader_thread = parse_bool(key, v, line);
  else if (key == "teacher_width_mult") teacher_width_mult = i64();
  else if (key == "embed_dim") encoder.embed_dim = i64();
  else if (key == "depth") encoder.depth = i64();
  else if (key == "heads") encoder.heads = i64();
  else if (key == "patch_size") encoder.patch_size = i64();
  else if (key == "max_text_len") encoder.max_text_len = i64();
  else if (key == "image_size") encoder.image_size = i64();
  else if (key == "proj_dim") encoder.proj_dim = i64();
  else if (key == "mlp_ratio") encoder.mlp_ratio = i64();
  else throw ConfigError("unknown config key '" + key + "'", line);
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (max_iters < 1) throw ConfigError("max_iters must be at least 1");
  if (!(base_lr >= 0)) throw ConfigError("base_lr must be non-negative");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  if (!(warmup_frac > 0 && warmup_frac < 1)) throw ConfigError("warmup_frac must lie in (0, 1)");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
  if (!(grad_clip > 0)) throw ConfigError("grad_clip must be positive");
  if (!(mask_ratio >= 0 && mask_ratio < 1)) throw ConfigError("mask_ratio must lie in [0, 1)");
  if (!(tau_min > 0 && tau_init >= tau_min)) throw ConfigError("need 0 < tau_min <= tau_init");
  if (!(c_min > 0 && c_min <= c_init && c_init <= c_max)) throw ConfigError("need 0 < c_min <= c_init <= c_max");
  if (!(cone_k > 0)) throw ConfigError("cone_k must be positive");
  weights.validate();
  if (!(unmasked_tuning_frac >= 0 && unmasked_tuning_frac < 1))
    throw ConfigError("unmasked_tuning_frac must lie in [0, 1)");
  if (!(caption_mid_prob >= 0 && caption_generic_prob >= 0 && caption_mid_prob + caption_generic_prob <= 1))
    throw ConfigError("caption level probabilities must be non-negative and sum to at most 1");
  if (log_every < 1 || eval_every < 1) throw ConfigError("log_every and eval_every must be positive");
  if (teacher_width_mult < 1) throw ConfigError("teacher_width_mult must be positive");
  encoder.validate();
}

std::string TrainConfig::to_text() const {
  std::ostringstream o;
  auto kv = [&](const char* k, const std::string& v) { o << k << '=' << v << '\n'; };
  kv("batch_size", std::to_string(batch_size));
  kv("max_iters", std::to_string(max_iters));
  kv("base_lr", fmt_double(base_lr));
  kv("weight_decay", fmt_double(weight_decay));
  kv("warmup_frac", fmt_double(warmup_frac));
  kv("beta1", fmt_double(beta1));
  kv("beta2", fmt_double(beta2));
  kv("adam_eps", fmt_double(adam_eps));
  kv("grad_clip", fmt_double(grad_clip));
  kv("mask_ratio", fmt_double(mask_ratio));
  kv("tau_init", fmt_double(tau_init));
  kv("tau_min", fmt_double(tau_min));
  kv("c_init", fmt_double(c_init));
  kv("c_min", fmt_double(c_min));
  kv("c_max", fmt_double(c_max));
  kv("cone_k", fmt_double(cone_k));
  kv("lambda_distill", fmt_double(weights.distillation));
  kv("lambda_entail", fmt_double(weights.entailment));
  kv("seed", std::to_string(seed));
  kv("unmasked_tuning_frac", fmt_double(unmasked_tuning_frac));
  kv("learn_alpha", learn_alpha ? "true" : "false");
  kv("caption_mid_prob", fmt_double(caption_mid_prob));
  kv("caption_generic_prob", fmt_double(caption_generic_prob));
  kv("log_every", std::to_string(log_every));
  kv("eval_every", std::to_string(eval_every));
  kv("loader_thread", loader_thread ? "true" : "false");
  kv("teacher_width_mult", std::to_string(teacher_width_mult));
  kv("embed_dim", std::to_string(encoder.embed_dim));
  kv("depth", std::to_string(encoder.depth));
  kv("heads", std::to_string(encoder.heads));
  kv("patch_size", std::to_string(encoder.patch_size));
  kv("max_text_len", std::to_string(encoder.max_text_len));
  kv("image_size", std::to_string(encoder.image_size));
  kv("proj_dim", std::to_string(encoder.proj_dim));
  kv("mlp_ratio", std::to_string(encoder.mlp_ratio));
  return o.str();
}

std::string TrainConfig::hash() const {
  // loader_thread changes scheduling only, never results.
  TrainConfig c = *this;
  c.loader_thread = true;
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : c.to_text()) h = (h ^ ch) * 1099511628211ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.resize(hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value", lineno);
    cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1), lineno);
  }
  return cfg;
}

TrainConfig TrainConfig::from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config", path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

// ---- schedule and optimizer ----------------------------------------------------

double lr_at(std::int64_t step, std::int64_t max_iters, double base_lr, double warmup_frac) {
  HMID_REQUIRE(step >= 0 && step <= max_iters, "lr_at: step outside [0, max_iters]");
  const double warm = warmup_frac * static_cast<double>(max_iters);
  const double s = static_cast<double>(step);
  if (s < warm) return base_lr * s / warm;
  const double progress = (s - warm) / (static_cast<double>(max_iters) - warm);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

OptimizerState init_optimizer(const model::Model& m) {
  OptimizerState s;
  for (const auto& e : m.params.entries()) {
    s.m.emplace_back(e.value.shape());
    s.v.emplace_back(e.value.shape());
  }
  return s;
}

// ---- batches -------------------------------------------------------------------

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t tag = 0) {
  return mix(mix(mix(seed ^ tag) ^ a) ^ b);
}

std::vector<std::int64_t> epoch_order(const std::vector<std::int64_t>& pool, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::int64_t> order = pool;
  std::mt19937_64 rng(derive(seed, static_cast<std::uint64_t>(epoch), 0, 1));
  for (std::size_t i = order.size(); i-- > 1;) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  return order;
}

const std::string& caption_at(const synth::CaptionLevels& c, synth::CaptionLevel l) {
  switch (l) {
    case synth::CaptionLevel::Mid: return c.mid;
    case synth::CaptionLevel::Generic: return c.generic;
    default: return c.specific;
  }
}

}  // namespace

Batch make_batch(const synth::Corpus& corpus, const std::vector<std::int64_t>& pool, const TrainConfig& cfg,
                 std::int64_t step, double mask_ratio) {
  HMID_REQUIRE(!pool.empty(), "make_batch: empty sample pool");
  const auto B = cfg.batch_size;
  const auto P = static_cast<std::int64_t>(pool.size());
  Batch b;
  b.step = step;
  std::int64_t cached_epoch = -1;
  std::vector<std::int64_t> order;
  std::vector<masking::PatchSequence> seqs;
  for (std::int64_t r = 0; r < B; ++r) {
    const std::int64_t g = step * B + r;
    const std::int64_t epoch = g / P;
    if (epoch != cached_epoch) {
      order = epoch_order(pool, cfg.seed, epoch);
      cached_epoch = epoch;
    }
    const auto sample = order[static_cast<std::size_t>(g % P)];
    b.samples.push_back(sample);

    std::mt19937_64 rng(derive(cfg.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(r), 2));
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    auto level = synth::CaptionLevel::Specific;
    if (u < cfg.caption_generic_prob) level = synth::CaptionLevel::Generic;
    else if (u < cfg.caption_generic_prob + cfg.caption_mid_prob) level = synth::CaptionLevel::Mid;
    b.levels.push_back(level);

    const auto& rec = corpus.samples[static_cast<std::size_t>(sample)];
    auto ids = synth::tokenize(caption_at(rec.captions, level), cfg.encoder.max_text_len);
    b.text_ids.insert(b.text_ids.end(), ids.begin(), ids.end());

    auto seq = model::image_tokens(corpus.image(static_cast<std::size_t>(sample)), cfg.encoder.patch_size);
    seqs.push_back(masking::random_mask(seq, mask_ratio, rng()));
  }
  b.images = model::stack_patches(seqs);
  return b;
}

// ---- teacher -------------------------------------------------------------------

TeacherCache build_teacher_cache(const model::Model& teacher, const synth::Corpus& corpus) {
  HMID_REQUIRE(teacher.frozen, "teacher checkpoint is not marked frozen");
  HMID_REQUIRE(teacher.geometry == model::Geometry::Hyperbolic, "teacher must be a hyperbolic model");
  TeacherCache cache;
  cache.checksum = teacher.params.checksum();
  const auto N = static_cast<std::int64_t>(corpus.size());
  const auto p = teacher.config.proj_dim;
  constexpr std::int64_t chunk = 128;
  cache.image = TensorF({N, p});
  for (auto& t : cache.text) t = TensorF({N, p});
  for (std::int64_t start = 0; start < N; start += chunk) {
    const auto end = std::min(N, start + chunk);
    std::vector<masking::PatchSequence> seqs;
    std::array<std::vector<std::int64_t>, 3> ids;
    for (std::int64_t i = start; i < end; ++i) {
      seqs.push_back(model::image_tokens(corpus.image(static_cast<std::size_t>(i)), teacher.config.patch_size));
      const auto& caps = corpus.samples[static_cast<std::size_t>(i)].captions;
      for (int l = 0; l < 3; ++l) {
        auto t = synth::tokenize(caption_at(caps, static_cast<synth::CaptionLevel>(l)), teacher.config.max_text_len);
        ids[l].insert(ids[l].end(), t.begin(), t.end());
      }
    }
    ad::Tape<float> tape;
    model::Bound b(tape, teacher, false);
    auto img = ad::mul(model::encode_image(b, model::stack_patches(seqs)), b("alpha_img"));
    std::copy(img.value().values().begin(), img.value().values().end(), cache.image.data() + start * p);
    for (int l = 0; l < 3; ++l) {
      auto txt = ad::mul(model::encode_text(b, ids[l], end - start), b("alpha_txt"));
      std::copy(txt.value().values().begin(), txt.value().values().end(), cache.text[l].data() + start * p);
    }
  }
  return cache;
}

// ---- step ----------------------------------------------------------------------

namespace {

// Smallest float not below v, so a float parameter clamped here satisfies p >= v exactly.
float float_at_least(double v) {
  float f = static_cast<float>(v);
  if (static_cast<double>(f) < v) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  return f;
}

std::string describe_batch(const Batch& b) {
  std::string s = "step " + std::to_string(b.step) + ", batch samples [";
  for (std::size_t i = 0; i < b.samples.size(); ++i) s += (i ? "," : "") + std::to_string(b.samples[i]);
  return s + "]";
}

}  // namespace

void apply_clamps(model::Model& m, const TrainConfig& cfg) {
  float& tv = m.params.value("tau")[0];
  tv = std::max(tv, float_at_least(cfg.tau_min));
  float& cv = m.params.value("curvature")[0];
  cv = std::clamp(cv, float_at_least(cfg.c_min), static_cast<float>(cfg.c_max));
}

losses::LossReport train_step(model::Model& student, const TeacherCache* teacher, const Batch& batch,
                              const TrainConfig& cfg, OptimizerState& opt, double lr, Mode mode) {
  HMID_REQUIRE(!student.frozen, "refusing to update a frozen model");
  HMID_REQUIRE(opt.m.size() == student.params.size(), "optimizer state does not match the model");
  const auto B = batch.size();

  ad::Tape<float> tape;
  model::Bound p(tape, student, true);
  auto v_img = model::encode_image(p, batch.images);
  auto v_txt = model::encode_text(p, batch.text_ids, B);
  auto tau = p("tau");

  losses::LossReport report;
  ad::Var<float> loss;
  if (mode == Mode::Clip) {
    loss = losses::euclidean_clip_loss(v_img, v_txt, tau);
    report.total = report.contrastive = loss.value().item();
  } else {
    auto c = p("curvature");
    losses::EmbeddingBatch<float> s{model::project_to_hyperbolic(v_img, p("alpha_img"), c),
                                    model::project_to_hyperbolic(v_txt, p("alpha_txt"), c)};
    losses::EmbeddingBatch<float> t;
    if (teacher) {
      const auto pd = teacher->image.cols();
      TensorF ti({B, pd}), tt({B, pd});
      for (std::int64_t r = 0; r < B; ++r) {
        const auto i = batch.samples[static_cast<std::size_t>(r)];
        const auto& text = teacher->text[static_cast<std::size_t>(batch.levels[static_cast<std::size_t>(r)])];
        std::copy(teacher->image.row(i).begin(), teacher->image.row(i).end(), ti.data() + r * pd);
        std::copy(text.row(i).begin(), text.row(i).end(), tt.data() + r * pd);
      }
      // Teacher tangents are constants; only the shared curvature sees their gradient.
      t = {lorentz::ad::exp_map_origin(tape.constant(std::move(ti)), c),
           lorentz::ad::exp_map_origin(tape.constant(std::move(tt)), c), losses::Source::Teacher};
    }
    auto weights = cfg.weights;
    if (!teacher) weights.distillation = 0.0;
    auto total = losses::total_loss(s, teacher ? &t : nullptr, tau, c, static_cast<float>(cfg.cone_k), weights);
    loss = total.total;
    report = total.report;
  }
  if (!std::isfinite(report.total)) throw NonFiniteError("non-finite loss at " + describe_batch(batch));

  auto grads = tape.backward(loss);
  if (!cfg.learn_alpha) {
    grads.erase(student.params.id("alpha_img"));
    grads.erase(student.params.id("alpha_txt"));
  }
  double sq = 0;
  for (const auto& [id, g] : grads)
    for (float v : g.values()) sq += static_cast<double>(v) * v;
  if (!std::isfinite(sq)) throw NonFiniteError("non-finite gradient at " + describe_batch(batch));
  const double norm = std::sqrt(sq);
  const float clip = norm > cfg.grad_clip ? static_cast<float>(cfg.grad_clip / norm) : 1.0f;

  ++opt.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(cfg.adam_eps);
  const float decay = static_cast<float>(1.0 - lr * cfg.weight_decay);
  for (const auto& [id, g] : grads) {
    auto& e = student.params.at(id);
    if (!e.trainable) continue;
    float* w = e.value.data();
    float* m = opt.m[id].data();
    float* v = opt.v[id].data();
    if (e.decay)
      for (std::size_t k = 0; k < e.value.size(); ++k) w[k] *= decay;
    for (std::size_t k = 0; k < e.value.size(); ++k) {
      const float gk = g[k] * clip;
      m[k] = b1 * m[k] + (1.0f - b1) * gk;
      v[k] = b2 * v[k] + (1.0f - b2) * gk * gk;
      w[k] -= step_size * m[k] / (std::sqrt(v[k]) * inv_sqrt_bc2 + eps);
    }
  }

  apply_clamps(student, cfg);
  return report;
}

// ---- loop ----------------------------------------------------------------------

std::string MetricsRecord::to_json() const {
  json j = {{"step", step},       {"lr", lr},   {"total", total}, {"contrastive", contrastive},
            {"distillation", distillation}, {"entailment", entailment}, {"tau", tau}, {"c", c},
            {"wall_ms", wall_ms}};
  return j.dump();
}

namespace {

/// Runs make_batch ahead of the trainer on one worker thread (capacity 2).
class BatchLoader {
 public:
  using Maker = std::function<Batch(std::int64_t)>;

  BatchLoader(Maker make, std::int64_t steps, bool threaded) : make_(std::move(make)), steps_(steps) {
    if (threaded) worker_ = std::jthread([this](std::stop_token st) { run(st); });
  }
  ~BatchLoader() {
    if (worker_.joinable()) {
      worker_.request_stop();
      cv_.notify_all();
    }
  }

  Batch next(std::int64_t step) {
    if (!worker_.joinable()) return make_(step);
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return !queue_.empty() || error_; });
    if (queue_.empty()) std::rethrow_exception(error_);
    Batch b = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    HMID_REQUIRE(b.step == step, "batch loader out of order");
    return b;
  }

 private:
  void run(std::stop_token st) {
    try {
      for (std::int64_t s = 0; s < steps_; ++s) {
        Batch b = make_(s);
        std::unique_lock lk(mu_);
        cv_.wait(lk, [&] { return queue_.size() < kCapacity || st.stop_requested(); });
        if (st.stop_requested()) return;
        queue_.push_back(std::move(b));
        cv_.notify_all();
      }
    } catch (...) {
      std::lock_guard lk(mu_);
      error_ = std::current_exception();
      cv_.notify_all();
    }
  }

  static constexpr std::size_t kCapacity = 2;
  Maker make_;
  std::int64_t steps_;
  std::mutex mu_;
  std::condition_variable_any cv_;
  std::deque<Batch> queue_;
  std::exception_ptr error_;
  std::jthread worker_;
};

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append", path.string());
  out << line << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write", path.string());
  out << text;
}

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::Student: return "student";
    case Mode::Clip: return "clip";
    case Mode::Teacher: return "teacher";
  }
  return "?";
}

}  // namespace

TrainResult train_loop(const TrainConfig& cfg_in, const synth::Corpus& corpus, const TrainOptions& opts) {
  TrainConfig cfg = cfg_in;
  cfg.encoder.image_size = corpus.image_size;
  cfg.validate();
  HMID_REQUIRE(corpus.size() > 0, "train_loop: empty corpus");
  const auto pool = corpus.split_indices(false);
  const auto val = corpus.split_indices(true);
  HMID_REQUIRE(!pool.empty(), "train_loop: no training samples");

  const model::Model* teacher = opts.mode == Mode::Student ? opts.teacher : nullptr;
  model::ScalarInit init{static_cast<float>(cfg.tau_init), static_cast<float>(cfg.c_init), 1.0f};
  std::unique_ptr<TeacherCache> cache;
  if (teacher) {
    HMID_REQUIRE(teacher->frozen, "teacher must be frozen before distillation");
    HMID_REQUIRE(teacher->config.proj_dim == cfg.encoder.proj_dim, "teacher and student embedding widths differ");
    // Student and teacher share one curvature from the start.
    init.curvature = std::clamp(teacher->curvature(), static_cast<float>(cfg.c_min), static_cast<float>(cfg.c_max));
    cache = std::make_unique<TeacherCache>(build_teacher_cache(*teacher, corpus));
  }
  const auto geometry = opts.mode == Mode::Clip ? model::Geometry::Euclidean : model::Geometry::Hyperbolic;
  model::Model student = model::init_model(cfg.encoder, cfg.seed, init, geometry);
  student.meta = {{"config_hash", cfg.hash()}, {"mode", mode_name(opts.mode)}, {"seed", std::to_string(cfg.seed)}};
  auto opt = init_optimizer(student);

  const bool write = !opts.out_dir.empty();
  if (write) {
    std::error_code ec;
    fs::create_directories(opts.out_dir, ec);
    if (ec) throw IoError("cannot create output directory (" + ec.message() + ")", opts.out_dir.string());
    write_text(opts.out_dir / "config.txt", cfg.to_text());
    write_text(opts.out_dir / "metrics.jsonl", "");
    write_text(opts.out_dir / "eval.jsonl", "");
  }

  const auto tuning_steps =
      static_cast<std::int64_t>(std::llround(cfg.unmasked_tuning_frac * static_cast<double>(cfg.max_iters)));
  const auto tuning_start = cfg.max_iters - tuning_steps;
  BatchLoader loader(
      [&](std::int64_t s) { return make_batch(corpus, pool, cfg, s, s >= tuning_start ? 0.0 : cfg.mask_ratio); },
      cfg.max_iters, cfg.loader_thread);

  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  auto evaluate = [&](std::int64_t step) {
    if (val.empty()) return 0.0;
    const double r1 = eval::retrieval_recall(student, corpus, val, {1}).mean_r1();
    if (write) append_line(opts.out_dir / "eval.jsonl", json({{"step", step}, {"val_recall_at_1", r1}}).dump());
    if (r1 > result.best_val_r1) {
      result.best_val_r1 = r1;
      result.best_step = step;
      result.best_model = student;
    }
    log::info("step " + std::to_string(step) + " val recall@1 " + std::to_string(r1));
    return r1;
  };

  for (std::int64_t step = 0; step < cfg.max_iters; ++step) {
    Batch batch = loader.next(step);
    const double lr = lr_at(step, cfg.max_iters, cfg.base_lr, cfg.warmup_frac);
    const auto report = train_step(student, cache.get(), batch, cfg, opt, lr, opts.mode);
    assert(static_cast<double>(student.tau()) >= cfg.tau_min);
    assert(student.curvature() > 0.0f && student.curvature() <= static_cast<float>(cfg.c_max));
    if (opts.on_step) opts.on_step(StepInfo{step, lr, report, student});

    const bool last = step + 1 == cfg.max_iters;
    if (step % cfg.log_every == 0 || last) {
      MetricsRecord rec{step,         lr, report.total, report.contrastive, report.distillation, report.entailment,
                        student.tau(), student.curvature(), elapsed_ms()};
      result.metrics.push_back(rec);
      if (write) append_line(opts.out_dir / "metrics.jsonl", rec.to_json());
      log::debug("step " + std::to_string(step) + " loss " + std::to_string(report.total));
    }
    if ((step + 1) % cfg.eval_every == 0 || last) {
      const double r1 = evaluate(step + 1);
      if (last) result.final_val_r1 = r1;
    }
  }
  if (teacher) {
    HMID_REQUIRE(teacher->params.checksum() == cache->checksum, "teacher parameters changed during distillation");
  }

  student.meta["step"] = std::to_string(cfg.max_iters);
  result.final_model = student;
  if (result.best_step < 0) result.best_model = student;
  result.best_model.meta["step"] = std::to_string(result.best_step < 0 ? cfg.max_iters : result.best_step);
  result.seconds = elapsed_ms() / 1000.0;
  if (write) {
    model::save_checkpoint(result.final_model, opts.out_dir / "final.ckpt");
    model::save_checkpoint(result.best_model, opts.out_dir / "best.ckpt");
  }
  return result;
}

TrainConfig teacher_config(TrainConfig cfg) {
  cfg.encoder.embed_dim *= cfg.teacher_width_mult;
  cfg.mask_ratio = 0.0;
  cfg.unmasked_tuning_frac = 0.0;
  cfg.weights.distillation = 0.0;
  return cfg;
}

model::Model train_teacher(const TrainConfig& cfg, const synth::Corpus& corpus, const fs::path& out_dir) {
  TrainOptions opts;
  opts.mode = Mode::Teacher;
  opts.out_dir = out_dir;
  auto result = train_loop(teacher_config(cfg), corpus, opts);
  model::Model teacher = std::move(result.final_model);
  teacher.frozen = true;
  if (!out_dir.empty()) model::save_checkpoint(teacher, out_dir / "teacher.ckpt");
  return teacher;
}

Throughput image_encoder_throughput(const model::Model& m, const synth::Corpus& corpus, double mask_ratio,
                                    std::int64_t batch, int repeats) {
  HMID_REQUIRE(batch >= 1 && repeats >= 1, "throughput: batch and repeats must be positive");
  HMID_REQUIRE(corpus.size() > 0, "throughput: empty corpus");
  std::vector<masking::PatchSequence> seqs;
  for (std::int64_t i = 0; i < batch; ++i) {
    auto seq = model::image_tokens(corpus.image(static_cast<std::size_t>(i) % corpus.size()), m.config.patch_size);
    seqs.push_back(masking::random_mask(seq, mask_ratio, static_cast<std::uint64_t>(i)));
  }
  const auto images = model::stack_patches(seqs);
  model::Model probe = m;
  probe.frozen = false;
  auto run = [&] {
    ad::Tape<float> tape;
    model::Bound p(tape, probe, true);
    auto out = ad::mean(model::encode_image(p, images));
    tape.backward(out);
  };
  run();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < repeats; ++r) run();
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Throughput t;
  t.images_per_sec = static_cast<double>(batch * repeats) / sec;
  t.tokens_per_sec = t.images_per_sec * static_cast<double>(m.config.num_patches());
  t.tokens_in = images.kept + 1;
  return t;
}

std::vector<double> mask_sweep_ratios() { return {0.0, 0.25, 0.5, 0.75}; }

std::vector<LossCombo> loss_ablation_grid() {
  return {{"contrastive", true, false, false},
          {"contrastive+entailment", true, true, false},
          {"contrastive+distillation", true, false, true},
          {"contrastive+entailment+distillation", true, true, true}};
}

}  // namespace hmid::train
