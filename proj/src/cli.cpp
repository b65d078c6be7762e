#include "hmid/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hmid/eval.hpp"
#include "hmid/grad_check.hpp"
#include "hmid/log.hpp"
#include "hmid/trainer.hpp"

namespace hmid::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Options {
  std::string config, out, data, teacher, checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<double> mask_ratio, lambda_distill, lambda_entail;
  std::optional<std::int64_t> iters, batch;
  std::int64_t n = 2000;
  int image_size = synth::kDefaultImageSize;
  std::int64_t images = 0;  // traverse: 0 means the whole val split
};

train::TrainConfig build_config(const Options& o) {
  auto cfg = o.config.empty() ? train::TrainConfig{} : train::TrainConfig::from_file(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.mask_ratio) cfg.mask_ratio = *o.mask_ratio;
  if (o.lambda_distill) cfg.weights.distillation = *o.lambda_distill;
  if (o.lambda_entail) cfg.weights.entailment = *o.lambda_entail;
  if (o.iters) cfg.max_iters = *o.iters;
  if (o.batch) cfg.batch_size = *o.batch;
  cfg.validate();
  return cfg;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string("missing required flag ") + flag);
}

synth::Corpus corpus_of(const Options& o) {
  require(o.data, "--data");
  return synth::load_corpus(o.data);
}

model::Model load_teacher(const std::string& path) {
  auto t = model::load_checkpoint(path);
  if (!t.frozen) throw ContractViolation("teacher checkpoint is not frozen: " + path);
  return t;
}

model::Model load_model(const Options& o) {
  require(o.checkpoint, "--checkpoint");
  return model::load_checkpoint(o.checkpoint);
}

fs::path out_dir(const Options& o, const char* fallback) { return o.out.empty() ? fs::path(fallback) : fs::path(o.out); }

std::string hash_text(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) h = (h ^ ch) * 1099511628211ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void emit(std::ostream& out, const std::string& task, json metrics, const std::string& config_hash,
          const std::string& checkpoint, const std::string& dir) {
  json r = {{"task", task}, {"metrics", std::move(metrics)}, {"config_hash", config_hash},
            {"checkpoint_path", checkpoint}};
  if (!dir.empty()) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream f(fs::path(dir) / "result.json");
    if (!f) throw IoError("cannot write result", (fs::path(dir) / "result.json").string());
    f << r.dump(2) << '\n';
  }
  out << r.dump() << '\n';
}

json train_metrics(const train::TrainResult& r) {
  return {{"final_val_recall_at_1", r.final_val_r1},
          {"best_val_recall_at_1", r.best_val_r1},
          {"best_step", r.best_step},
          {"tau", r.final_model.tau()},
          {"c", r.final_model.curvature()},
          {"seconds", r.seconds}};
}

json recall_json(const eval::RecallTable& t) {
  json i2t, t2i;
  for (auto& [k, v] : t.image_to_text) i2t[std::to_string(k)] = v;
  for (auto& [k, v] : t.text_to_image) t2i[std::to_string(k)] = v;
  return {{"image_to_text", i2t}, {"text_to_image", t2i}, {"mean_recall_at_1", t.mean_r1()}};
}

int cmd_gen_data(const Options& o, std::ostream& out) {
  require(o.out, "--out");
  synth::CorpusOptions opts{o.n, o.seed.value_or(0), o.image_size};
  auto samples = synth::generate_corpus(opts, o.out);
  std::int64_t val = 0;
  for (const auto& s : samples) val += s.val;
  std::ostringstream key;
  key << "gen-data n=" << opts.n << " seed=" << opts.seed << " image_size=" << opts.image_size;
  emit(out, "gen-data", {{"n", opts.n}, {"train", opts.n - val}, {"val", val}}, hash_text(key.str()), "", o.out);
  return kOk;
}

int cmd_train(const Options& o, std::ostream& out, const std::string& task) {
  auto cfg = build_config(o);
  auto corpus = corpus_of(o);
  const auto dir = out_dir(o, ("runs/" + task).c_str());
  if (task == "train-teacher") {
    auto teacher = train::train_teacher(cfg, corpus, dir);
    emit(out, task, {{"tau", teacher.tau()}, {"c", teacher.curvature()}}, train::teacher_config(cfg).hash(),
         (dir / "teacher.ckpt").string(), dir.string());
    return kOk;
  }
  train::TrainOptions opts;
  opts.out_dir = dir;
  std::optional<model::Model> teacher;
  if (task == "distill") {
    require(o.teacher, "--teacher");
    teacher = load_teacher(o.teacher);
    opts.teacher = &*teacher;
  } else if (task == "train-meru") {
    cfg.weights.distillation = 0.0;
  } else {
    opts.mode = train::Mode::Clip;
  }
  auto r = train::train_loop(cfg, corpus, opts);
  emit(out, task, train_metrics(r), cfg.hash(), (dir / "final.ckpt").string(), dir.string());
  return kOk;
}

int cmd_eval_classify(const Options& o, std::ostream& out) {
  auto m = load_model(o);
  auto corpus = corpus_of(o);
  const auto val = corpus.split_indices(true);
  const auto prompts = eval::shape_class_prompts();
  auto r = eval::zero_shot_classify(eval::embed_images(m, corpus, val), eval::embed_texts(m, prompts), prompts,
                                    eval::shape_class_labels(corpus, val));
  json per_class = json::array();
  for (const auto& c : r.per_class)
    per_class.push_back({{"prompt", c.prompt}, {"support", c.support}, {"predicted", c.predicted}, {"correct", c.correct}});
  emit(out, "eval-classify", {{"accuracy", r.accuracy}, {"images", val.size()}, {"per_class", per_class}},
       m.meta.count("config_hash") ? m.meta.at("config_hash") : "", o.checkpoint, o.out);
  return kOk;
}

int cmd_eval_retrieve(const Options& o, std::ostream& out) {
  auto m = load_model(o);
  auto corpus = corpus_of(o);
  const auto val = corpus.split_indices(true);
  auto metrics = recall_json(eval::retrieval_recall(m, corpus, val));
  metrics["images"] = val.size();
  if (m.geometry == model::Geometry::Hyperbolic) {
    auto h = eval::hierarchy_radius_report(m, corpus, val);
    metrics["mean_norm"] = {{"image", h.image}, {"specific", h.specific}, {"mid", h.mid}, {"generic", h.generic}};
  }
  emit(out, "eval-retrieve", metrics, m.meta.count("config_hash") ? m.meta.at("config_hash") : "", o.checkpoint,
       o.out);
  return kOk;
}

int cmd_traverse(const Options& o, std::ostream& out) {
  auto m = load_model(o);
  if (m.geometry != model::Geometry::Hyperbolic) throw ConfigError("traverse needs a hyperbolic checkpoint");
  auto corpus = corpus_of(o);
  auto val = corpus.split_indices(true);
  if (o.images > 0 && static_cast<std::size_t>(o.images) < val.size()) val.resize(static_cast<std::size_t>(o.images));
  auto s = eval::traversal_eval(m, corpus, val);
  for (std::size_t i = 0; i < val.size(); ++i) {
    out << std::setw(6) << std::setfill('0') << val[i] << std::setfill(' ') << ':';
    for (const auto& c : s.outputs[i]) out << " | " << c;
    out << '\n';
  }
  emit(out, "traverse", {{"images", s.images}, {"level_success_rate", s.level_rate()}, {"own_success_rate", s.own_rate()}},
       m.meta.count("config_hash") ? m.meta.at("config_hash") : "", o.checkpoint, o.out);
  return kOk;
}

int cmd_ablate_mask(const Options& o, std::ostream& out) {
  auto base = build_config(o);
  auto corpus = corpus_of(o);
  const auto dir = out_dir(o, "runs/ablate-mask");
  std::optional<model::Model> teacher;
  if (!o.teacher.empty()) teacher = load_teacher(o.teacher);
  if (!teacher) base.weights.distillation = 0.0;
  json rows = json::array();
  out << "mask_ratio  val_recall@1  tokens_in  image_tokens/s\n";
  for (double ratio : train::mask_sweep_ratios()) {
    auto cfg = base;
    cfg.mask_ratio = ratio;
    train::TrainOptions opts;
    opts.teacher = teacher ? &*teacher : nullptr;
    char name[32];
    std::snprintf(name, sizeof name, "mask_%.2f", ratio);
    opts.out_dir = dir / name;
    auto r = train::train_loop(cfg, corpus, opts);
    auto t = train::image_encoder_throughput(r.final_model, corpus, ratio, cfg.batch_size, 3);
    char line[128];
    std::snprintf(line, sizeof line, "%10.2f  %12.4f  %9lld  %14.0f\n", ratio, r.final_val_r1,
                  static_cast<long long>(t.tokens_in), t.tokens_per_sec);
    out << line;
    rows.push_back({{"mask_ratio", ratio}, {"val_recall_at_1", r.final_val_r1}, {"tokens_in", t.tokens_in},
                    {"image_tokens_per_sec", t.tokens_per_sec}});
  }
  emit(out, "ablate-mask", {{"rows", rows}}, base.hash(), "", dir.string());
  return kOk;
}

int cmd_ablate_loss(const Options& o, std::ostream& out) {
  auto base = build_config(o);
  auto corpus = corpus_of(o);
  require(o.teacher, "--teacher");
  const auto teacher = load_teacher(o.teacher);
  const auto dir = out_dir(o, "runs/ablate-loss");
  json rows = json::array();
  out << "contrastive  entailment  distillation  val_recall@1\n";
  for (const auto& combo : train::loss_ablation_grid()) {
    auto cfg = base;
    if (!combo.entailment) cfg.weights.entailment = 0.0;
    if (!combo.distillation) cfg.weights.distillation = 0.0;
    train::TrainOptions opts;
    opts.teacher = combo.distillation ? &teacher : nullptr;
    opts.out_dir = dir / combo.name;
    auto r = train::train_loop(cfg, corpus, opts);
    auto mark = [](bool b) { return b ? "yes" : "-"; };
    char line[128];
    std::snprintf(line, sizeof line, "%11s  %10s  %12s  %12.4f\n", mark(combo.contrastive), mark(combo.entailment),
                  mark(combo.distillation), r.final_val_r1);
    out << line;
    rows.push_back({{"contrastive", combo.contrastive}, {"entailment", combo.entailment},
                    {"distillation", combo.distillation}, {"val_recall_at_1", r.final_val_r1}});
  }
  emit(out, "ablate-loss", {{"rows", rows}}, base.hash(), "", dir.string());
  return kOk;
}

int cmd_grad_check(const Options& o, std::ostream& out) {
  const auto seed = o.seed.value_or(1);
  auto results = gradcheck::op_suite(seed);
  auto losses = gradcheck::loss_suite(seed);
  results.insert(results.end(), losses.begin(), losses.end());
  std::int64_t failed = 0;
  double worst = 0;
  for (const auto& r : results) {
    worst = std::max(worst, r.fd.max_rel_err);
    if (!r.pass) {
      ++failed;
      out << "FAIL " << r.name << " rel_err=" << r.fd.max_rel_err << '\n';
    }
  }
  emit(out, "grad-check",
       {{"checks", results.size()}, {"failed", failed}, {"max_rel_err", worst}, {"tolerance", gradcheck::kGradTolerance}},
       hash_text("grad-check seed=" + std::to_string(seed)), "", o.out);
  return failed ? kFailure : kOk;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"hmid: hyperbolic image-text embeddings with masked distillation", "hmid"};
  app.require_subcommand(1, 1);
  Options o;

  struct Sub {
    const char* name;
    const char* help;
  };
  const std::vector<Sub> subs = {
      {"gen-data", "generate the synthetic corpus"},
      {"train-teacher", "train and freeze the wide teacher"},
      {"distill", "train a masked student distilled from --teacher"},
      {"train-meru", "train a masked student without distillation"},
      {"train-clip-baseline", "train the Euclidean baseline"},
      {"eval-classify", "zero-shot color+kind classification on the val split"},
      {"eval-retrieve", "image-text retrieval recall on the val split"},
      {"traverse", "geodesic traversal from val images toward the root"},
      {"ablate-mask", "train across mask ratios 0, 0.25, 0.5, 0.75"},
      {"ablate-loss", "train the four loss combinations"},
      {"grad-check", "finite-difference check of every op and loss"},
  };
  for (const auto& s : subs) {
    auto* c = app.add_subcommand(s.name, s.help);
    c->add_option("--config", o.config, "key=value config file")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--seed", o.seed, "random seed")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--out", o.out, "output directory")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--data", o.data, "corpus directory")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--teacher", o.teacher, "frozen teacher checkpoint")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--checkpoint", o.checkpoint, "model checkpoint")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--mask-ratio", o.mask_ratio, "student mask ratio")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--lambda-distill", o.lambda_distill, "distillation weight")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--lambda-entail", o.lambda_entail, "entailment weight")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--iters", o.iters, "training iterations")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--batch", o.batch, "batch size")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--n", o.n, "corpus size (gen-data)")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--image-size", o.image_size, "image side in pixels (gen-data)")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    c->add_option("--images", o.images, "val images to traverse (0 = all)")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error kind=usage message=\"" << one_line(e.what()) << "\"\n";
    err << app.help();
    return kUsage;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "gen-data") return cmd_gen_data(o, out);
    if (cmd == "train-teacher" || cmd == "distill" || cmd == "train-meru" || cmd == "train-clip-baseline")
      return cmd_train(o, out, cmd);
    if (cmd == "eval-classify") return cmd_eval_classify(o, out);
    if (cmd == "eval-retrieve") return cmd_eval_retrieve(o, out);
    if (cmd == "traverse") return cmd_traverse(o, out);
    if (cmd == "ablate-mask") return cmd_ablate_mask(o, out);
    if (cmd == "ablate-loss") return cmd_ablate_loss(o, out);
    if (cmd == "grad-check") return cmd_grad_check(o, out);
  } catch (const ConfigError& e) {
    err << "error kind=config line=" << e.line() << " message=\"" << one_line(e.what()) << "\"\n";
    return kConfig;
  } catch (const IoError& e) {
    err << "error kind=io path=\"" << e.path() << "\" message=\"" << one_line(e.what()) << "\"\n";
    return kIo;
  } catch (const ContractViolation& e) {
    err << "error kind=contract message=\"" << one_line(e.what()) << "\"\n";
    return kContract;
  } catch (const NonFiniteError& e) {
    err << "error kind=nonfinite message=\"" << one_line(e.what()) << "\"\n";
    return kNonFinite;
  } catch (const std::exception& e) {
    err << "error kind=internal message=\"" << one_line(e.what()) << "\"\n";
    return kInternal;
  }
  err << "error kind=usage message=\"unknown command " << cmd << "\"\n";
  return kUsage;
}

}  // namespace hmid::cli
