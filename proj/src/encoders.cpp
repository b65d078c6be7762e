#include "hmid/encoders.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

#include "hmid/lorentz_ops.hpp"

namespace hmid::model {

namespace fs = std::filesystem;
using json = nlohmann::json;

void EncoderConfig::validate() const {
  auto positive = [](std::int64_t v, const char* name) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(embed_dim, "embed_dim");
  positive(depth, "depth");
  positive(heads, "heads");
  positive(patch_size, "patch_size");
  positive(vocab_size, "vocab_size");
  positive(max_text_len, "max_text_len");
  positive(image_size, "image_size");
  positive(proj_dim, "proj_dim");
  positive(mlp_ratio, "mlp_ratio");
  if (embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
  if (embed_dim % 4 != 0) throw ConfigError("embed_dim must be divisible by 4 (2-D sin-cos positions)");
  if (image_size % patch_size != 0) throw ConfigError("image_size must be divisible by patch_size");
  if (vocab_size < 128) throw ConfigError("vocab_size must cover printable ASCII");
}

const char* geometry_name(Geometry g) { return g == Geometry::Hyperbolic ? "hyperbolic" : "euclidean"; }

Geometry parse_geometry(const std::string& s) {
  if (s == "hyperbolic") return Geometry::Hyperbolic;
  if (s == "euclidean") return Geometry::Euclidean;
  throw ConfigError("unknown geometry '" + s + "'");
}

// ---- parameter store ---------------------------------------------------------

ParamId ParameterStore::add(std::string name, TensorF value, bool trainable, bool decay) {
  HMID_REQUIRE(!contains(name), "duplicate parameter " + name);
  const ParamId id = entries_.size();
  index_.emplace(name, id);
  entries_.push_back({std::move(name), std::move(value), trainable, decay});
  return id;
}

ParamId ParameterStore::id(const std::string& name) const {
  auto it = index_.find(name);
  HMID_REQUIRE(it != index_.end(), "unknown parameter " + name);
  return it->second;
}

std::int64_t ParameterStore::num_values() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::int64_t>(e.value.size());
  return n;
}

std::uint64_t ParameterStore::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
  };
  for (const auto& e : entries_) {
    mix(e.name.data(), e.name.size());
    mix(e.value.shape().data(), e.value.shape().size() * sizeof(std::int64_t));
    mix(e.value.data(), e.value.size() * sizeof(float));
  }
  return h;
}

// ---- init --------------------------------------------------------------------

namespace {

void sincos_1d(float* out, std::int64_t dim, double pos) {
  const std::int64_t half = dim / 2;
  for (std::int64_t k = 0; k < half; ++k) {
    const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(half));
    out[k] = static_cast<float>(std::sin(pos * omega));
    out[half + k] = static_cast<float>(std::cos(pos * omega));
  }
}

void add_tower(ParameterStore& ps, const std::string& tower, const EncoderConfig& cfg,
               const std::function<TensorF(Shape, float)>& normal_std) {
  auto normal = [&](Shape s, float stddev = 0.02f) { return normal_std(std::move(s), stddev); };
  const auto d = cfg.embed_dim, h = cfg.embed_dim * cfg.mlp_ratio;
  for (std::int64_t i = 0; i < cfg.depth; ++i) {
    const std::string b = tower + ".blocks." + std::to_string(i) + ".";
    ps.add(b + "ln1.g", TensorF({d}, 1.0f), true, false);
    ps.add(b + "ln1.b", TensorF({d}), true, false);
    ps.add(b + "attn.qkv.w", normal({d, 3 * d}), true, true);
    ps.add(b + "attn.qkv.b", TensorF({3 * d}), true, false);
    ps.add(b + "attn.out.w", normal({d, d}), true, true);
    ps.add(b + "attn.out.b", TensorF({d}), true, false);
    ps.add(b + "ln2.g", TensorF({d}, 1.0f), true, false);
    ps.add(b + "ln2.b", TensorF({d}), true, false);
    ps.add(b + "mlp.fc1.w", normal({d, h}), true, true);
    ps.add(b + "mlp.fc1.b", TensorF({h}), true, false);
    ps.add(b + "mlp.fc2.w", normal({h, d}), true, true);
    ps.add(b + "mlp.fc2.b", TensorF({d}), true, false);
  }
  ps.add(tower + ".ln_final.g", TensorF({d}, 1.0f), true, false);
  ps.add(tower + ".ln_final.b", TensorF({d}), true, false);
  ps.add(tower + ".proj.w", normal({d, cfg.proj_dim}), true, true);
}

}  // namespace

TensorF image_positional_table(const EncoderConfig& cfg) {
  const auto d = cfg.embed_dim, g = cfg.grid();
  TensorF t({cfg.num_patches() + 1, d});
  for (std::int64_t p = 0; p < cfg.num_patches(); ++p) {
    float* row = t.data() + (p + 1) * d;
    sincos_1d(row, d / 2, static_cast<double>(p / g));
    sincos_1d(row + d / 2, d / 2, static_cast<double>(p % g));
  }
  return t;
}

TensorF text_positional_table(const EncoderConfig& cfg) {
  TensorF t({cfg.max_text_len, cfg.embed_dim});
  for (std::int64_t p = 0; p < cfg.max_text_len; ++p) sincos_1d(t.data() + p * cfg.embed_dim, cfg.embed_dim, p);
  return t;
}

Model init_model(const EncoderConfig& cfg, std::uint64_t seed, const ScalarInit& scalars, Geometry geometry) {
  cfg.validate();
  Model m;
  m.config = cfg;
  m.geometry = geometry;
  std::mt19937_64 rng(seed);
  auto normal = [&](Shape s, float stddev = 0.02f) {
    std::normal_distribution<float> n(0.0f, stddev);
    TensorF t(std::move(s));
    for (auto& v : t.buffer()) v = n(rng);
    return t;
  };
  auto& ps = m.params;
  const auto d = cfg.embed_dim;
  // Content embeddings start at the scale of the frozen sincos tables (RMS ~0.7);
  // at 0.02 the towers initially see little but position.
  const float xavier = std::sqrt(2.0f / static_cast<float>(cfg.patch_dim() + d));
  ps.add("image.patch.w", normal({cfg.patch_dim(), d}, xavier), true, true);
  ps.add("image.patch.b", TensorF({d}), true, false);
  ps.add("image.cls", normal({1, d}), true, false);
  ps.add("image.pos", image_positional_table(cfg), false, false);
  add_tower(ps, "image", cfg, normal);
  ps.add("text.token_embed", normal({cfg.vocab_size, d}, 0.5f), true, true);
  ps.add("text.pos", text_positional_table(cfg), false, false);
  add_tower(ps, "text", cfg, normal);
  ps.add("tau", TensorF::scalar(scalars.tau), true, false);
  ps.add("curvature", TensorF::scalar(scalars.curvature), true, false);
  ps.add("alpha_img", TensorF::scalar(scalars.alpha), true, false);
  ps.add("alpha_txt", TensorF::scalar(scalars.alpha), true, false);
  return m;
}

// ---- forward -----------------------------------------------------------------

Bound::Bound(Tape<float>& tape, const Model& model, bool with_grad)
    : tape_(tape), model_(model), with_grad_(with_grad && !model.frozen) {}

Var<float> Bound::operator()(const std::string& name) {
  const ParamId id = model_.params.id(name);
  if (auto it = cache_.find(id); it != cache_.end()) return it->second;
  const auto& e = model_.params.at(id);
  Var<float> v = (with_grad_ && e.trainable) ? tape_.parameter(e.value, id) : tape_.constant(e.value);
  cache_.emplace(id, v);
  return v;
}

ImageBatch stack_patches(const std::vector<masking::PatchSequence>& seqs) {
  HMID_REQUIRE(!seqs.empty(), "stack_patches: empty batch");
  ImageBatch out;
  out.batch = static_cast<std::int64_t>(seqs.size());
  out.kept = seqs[0].num_kept();
  const auto dim = seqs[0].patch_dim();
  out.tokens = TensorF({out.batch * out.kept, dim});
  out.positions.reserve(static_cast<std::size_t>(out.batch * out.kept));
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    HMID_REQUIRE(seqs[b].num_kept() == out.kept && seqs[b].patch_dim() == dim,
                 "stack_patches: all sequences in a batch need the same kept count and patch size");
    std::copy(seqs[b].tokens.values().begin(), seqs[b].tokens.values().end(),
              out.tokens.data() + static_cast<std::int64_t>(b) * out.kept * dim);
    out.positions.insert(out.positions.end(), seqs[b].kept_indices.begin(), seqs[b].kept_indices.end());
  }
  return out;
}

masking::PatchSequence image_tokens(const TensorF& image, std::int64_t patch_size) {
  TensorF centered = image;
  for (auto& v : centered.buffer()) v -= 0.5f;
  return masking::patchify(centered, patch_size);
}

namespace {

Var<float> linear(Var<float> x, Var<float> w, Var<float> b) { return ad::add(ad::matmul(x, w), b); }

Var<float> block(Bound& p, const std::string& prefix, Var<float> x, std::int64_t batch, std::int64_t seq,
                 bool causal) {
  const auto& cfg = p.model().config;
  auto h = ad::layer_norm(x, p(prefix + "ln1.g"), p(prefix + "ln1.b"));
  auto qkv = linear(h, p(prefix + "attn.qkv.w"), p(prefix + "attn.qkv.b"));
  auto a = ad::attention(qkv, batch, seq, cfg.heads, causal);
  x = ad::add(x, linear(a, p(prefix + "attn.out.w"), p(prefix + "attn.out.b")));
  h = ad::layer_norm(x, p(prefix + "ln2.g"), p(prefix + "ln2.b"));
  auto m = ad::gelu(linear(h, p(prefix + "mlp.fc1.w"), p(prefix + "mlp.fc1.b")));
  return ad::add(x, linear(m, p(prefix + "mlp.fc2.w"), p(prefix + "mlp.fc2.b")));
}

Var<float> tower(Bound& p, const std::string& name, Var<float> x, std::int64_t batch, std::int64_t seq, bool causal,
                 const std::vector<std::int64_t>& readout_rows) {
  for (std::int64_t i = 0; i < p.model().config.depth; ++i)
    x = block(p, name + ".blocks." + std::to_string(i) + ".", x, batch, seq, causal);
  x = ad::layer_norm(x, p(name + ".ln_final.g"), p(name + ".ln_final.b"));
  return ad::matmul(ad::gather_rows(x, readout_rows), p(name + ".proj.w"));
}

}  // namespace

Var<float> encode_image(Bound& p, const ImageBatch& images) {
  const auto& cfg = p.model().config;
  const auto B = images.batch, k = images.kept;
  HMID_REQUIRE(B >= 1 && k >= 1, "encode_image: need at least one image and one token");
  HMID_REQUIRE(images.tokens.rank() == 2 && images.tokens.dim(0) == B * k && images.tokens.dim(1) == cfg.patch_dim(),
               "encode_image: token tensor " + shape_str(images.tokens.shape()) + " does not match the batch");
  HMID_REQUIRE(static_cast<std::int64_t>(images.positions.size()) == B * k,
               "encode_image: token/position count mismatch");
  for (auto pos : images.positions)
    HMID_REQUIRE(pos >= 0 && pos < cfg.num_patches(), "encode_image: position id out of range");

  auto& tape = p.tape();
  auto emb = linear(tape.constant(images.tokens), p("image.patch.w"), p("image.patch.b"));
  auto rows = ad::concat_rows(std::vector<Var<float>>{emb, p("image.cls")});
  // Sequence per image: [cls, kept tokens...]; positional id 0 belongs to the class token.
  const auto seq = k + 1;
  std::vector<std::int64_t> order, pos_ids, readout;
  order.reserve(static_cast<std::size_t>(B * seq));
  pos_ids.reserve(order.capacity());
  for (std::int64_t b = 0; b < B; ++b) {
    readout.push_back(b * seq);
    order.push_back(B * k);
    pos_ids.push_back(0);
    for (std::int64_t j = 0; j < k; ++j) {
      order.push_back(b * k + j);
      pos_ids.push_back(images.positions[static_cast<std::size_t>(b * k + j)] + 1);
    }
  }
  auto x = ad::add(ad::gather_rows(rows, order), ad::gather_rows(p("image.pos"), pos_ids));
  return tower(p, "image", x, B, seq, false, readout);
}

Var<float> encode_text(Bound& p, const std::vector<std::int64_t>& ids, std::int64_t batch) {
  const auto& cfg = p.model().config;
  const auto L = cfg.max_text_len;
  HMID_REQUIRE(batch >= 1 && static_cast<std::int64_t>(ids.size()) == batch * L,
               "encode_text: expected " + std::to_string(batch) + " x " + std::to_string(L) + " token ids");
  std::vector<std::int64_t> pos_ids(ids.size()), readout;
  for (std::int64_t b = 0; b < batch; ++b) {
    std::int64_t eos = -1;
    for (std::int64_t t = 0; t < L; ++t) {
      const auto id = ids[static_cast<std::size_t>(b * L + t)];
      HMID_REQUIRE(id >= 0 && id < cfg.vocab_size, "encode_text: token id " + std::to_string(id) + " out of vocabulary");
      if (eos < 0 && id == 1) eos = t;
      pos_ids[static_cast<std::size_t>(b * L + t)] = t;
    }
    HMID_REQUIRE(eos >= 0, "encode_text: caption without EOS token");
    readout.push_back(b * L + eos);
  }
  auto x = ad::add(ad::embedding_lookup(p("text.token_embed"), ids), ad::gather_rows(p("text.pos"), pos_ids));
  return tower(p, "text", x, batch, L, true, readout);
}

template <typename T>
Var<T> project_to_hyperbolic(Var<T> v, Var<T> alpha, Var<T> c) {
  return lorentz::ad::exp_map_origin(ad::mul(v, alpha), c);
}

template Var<float> project_to_hyperbolic(Var<float>, Var<float>, Var<float>);
template Var<double> project_to_hyperbolic(Var<double>, Var<double>, Var<double>);

// ---- checkpoints ---------------------------------------------------------------

namespace {

json config_to_json(const EncoderConfig& c) {
  return {{"embed_dim", c.embed_dim},   {"depth", c.depth},     {"heads", c.heads},
          {"patch_size", c.patch_size}, {"vocab_size", c.vocab_size}, {"max_text_len", c.max_text_len},
          {"image_size", c.image_size}, {"proj_dim", c.proj_dim}, {"mlp_ratio", c.mlp_ratio}};
}

EncoderConfig config_from_json(const json& j) {
  EncoderConfig c;
  c.embed_dim = j.at("embed_dim");
  c.depth = j.at("depth");
  c.heads = j.at("heads");
  c.patch_size = j.at("patch_size");
  c.vocab_size = j.at("vocab_size");
  c.max_text_len = j.at("max_text_len");
  c.image_size = j.at("image_size");
  c.proj_dim = j.at("proj_dim");
  c.mlp_ratio = j.at("mlp_ratio");
  return c;
}

}  // namespace

void save_checkpoint(const Model& model, const fs::path& path) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : model.params.entries()) {
    tensors.push_back({{"name", e.name},
                       {"dtype", "f32"},
                       {"shape", e.value.shape()},
                       {"offset", offset},
                       {"trainable", e.trainable},
                       {"decay", e.decay}});
    offset += e.value.size() * sizeof(float);
  }
  json manifest = {{"format_version", kCheckpointVersion},
                   {"frozen", model.frozen},
                   {"geometry", geometry_name(model.geometry)},
                   {"config", config_to_json(model.config)},
                   {"scalars",
                    {{"tau", model.tau()},
                     {"curvature", model.curvature()},
                     {"alpha_img", model.alpha_img()},
                     {"alpha_txt", model.alpha_txt()}}},
                   {"meta", model.meta},
                   {"tensors", tensors}};
  const std::string text = manifest.dump();

  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing", path.string());
  out.write(kCheckpointMagic, 5);
  const auto len = static_cast<std::uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : model.params.entries())
    out.write(reinterpret_cast<const char*>(e.value.data()), static_cast<std::streamsize>(e.value.size() * sizeof(float)));
  if (!out) throw IoError("checkpoint write failed", path.string());
}

Model load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint", path.string());
  char magic[5];
  std::uint32_t len = 0;
  in.read(magic, 5);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kCheckpointMagic, 5) != 0) throw IoError("not an HMID1 checkpoint", path.string());
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw IoError("truncated checkpoint manifest", path.string());

  Model m;
  try {
    const json manifest = json::parse(text);
    if (manifest.at("format_version").get<int>() != kCheckpointVersion)
      throw IoError("unsupported checkpoint version", path.string());
    m.config = config_from_json(manifest.at("config"));
    m.geometry = parse_geometry(manifest.at("geometry").get<std::string>());
    m.frozen = manifest.at("frozen").get<bool>();
    m.meta = manifest.at("meta").get<std::map<std::string, std::string>>();
    const auto data_start = static_cast<std::uint64_t>(in.tellg());
    for (const auto& t : manifest.at("tensors")) {
      if (t.at("dtype") != "f32") throw IoError("unsupported tensor dtype", path.string());
      TensorF value(t.at("shape").get<Shape>());
      in.seekg(static_cast<std::streamoff>(data_start + t.at("offset").get<std::uint64_t>()));
      in.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(value.size() * sizeof(float)));
      if (!in) throw IoError("truncated tensor " + t.at("name").get<std::string>(), path.string());
      m.params.add(t.at("name"), std::move(value), t.at("trainable"), t.at("decay"));
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed checkpoint manifest (") + e.what() + ")", path.string());
  }
  m.config.validate();
  return m;
}

}  // namespace hmid::model
