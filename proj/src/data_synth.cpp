#include "hmid/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

namespace hmid::synth {

namespace fs = std::filesystem;
using json = nlohmann::json;

const std::array<PaletteColor, kNumColors>& palette() {
  static const std::array<PaletteColor, kNumColors> colors{{
      {"red", 'r', {0.9f, 0.1f, 0.1f}},
      {"green", 'g', {0.1f, 0.8f, 0.2f}},
      {"blue", 'b', {0.15f, 0.25f, 0.95f}},
      {"yellow", 'y', {0.95f, 0.9f, 0.1f}},
      {"cyan", 'c', {0.1f, 0.85f, 0.9f}},
      {"magenta", 'm', {0.9f, 0.15f, 0.85f}},
      {"white", 'w', {1.0f, 1.0f, 1.0f}},
      {"black", 'k', {0.0f, 0.0f, 0.0f}},
  }};
  return colors;
}

const char* level_name(CaptionLevel level) {
  switch (level) {
    case CaptionLevel::Specific: return "specific";
    case CaptionLevel::Mid: return "mid";
    case CaptionLevel::Generic: return "generic";
  }
  return "?";
}

const std::array<std::string, 4>& generic_pool() {
  static const std::array<std::string, 4> pool{"an image", "a picture", "a drawing", "a scene"};
  return pool;
}

namespace {

constexpr char kKindCode[kNumKinds] = {'O', 'S', 'T'};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string shape_token(const PlacedShape& s) {
  return {palette()[static_cast<std::size_t>(s.color)].code, kKindCode[static_cast<int>(s.kind)]};
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) out += ' ';
    out += p;
  }
  return out;
}

bool inside_shape(ShapeKind kind, double u, double v, double size, double margin) {
  // (u, v): pixel center relative to the cell's top-left corner.
  const double lo = margin, hi = size - margin, mid = size / 2.0;
  if (u < lo || u >= hi || v < lo || v >= hi) return false;
  switch (kind) {
    case ShapeKind::Square: return true;
    case ShapeKind::Circle: {
      const double r = mid - margin;
      return (u - mid) * (u - mid) + (v - mid) * (v - mid) <= r * r;
    }
    case ShapeKind::Triangle: {
      const double frac = (v - lo) / (hi - lo);
      return std::abs(u - mid) <= frac * (mid - margin);
    }
  }
  return false;
}

}  // namespace

void validate(const SceneSpec& spec) {
  HMID_REQUIRE(spec.shapes.size() <= static_cast<std::size_t>(kMaxShapes), "scene has more than 3 shapes");
  std::set<int> cells;
  for (const auto& s : spec.shapes) {
    HMID_REQUIRE(s.cell >= 0 && s.cell < kNumCells, "shape cell out of range");
    HMID_REQUIRE(s.color >= 0 && s.color < kNumColors, "shape color out of range");
    HMID_REQUIRE(static_cast<int>(s.kind) < kNumKinds, "unknown shape kind");
    HMID_REQUIRE(cells.insert(s.cell).second, "two shapes share cell " + std::to_string(s.cell));
  }
  HMID_REQUIRE(spec.background >= 0.0f && spec.background <= 1.0f, "background outside [0, 1]");
}

SceneSpec sample_scene(std::mt19937_64& rng) {
  SceneSpec spec;
  spec.seed = rng();
  std::mt19937_64 local(spec.seed);
  // Mostly multi-shape scenes: single-shape scenes have only 384 distinct captions.
  std::discrete_distribution<int> count_dist({0.1, 0.3, 0.6});
  const int count = count_dist(local) + 1;
  std::array<int, kNumCells> cells{};
  std::iota(cells.begin(), cells.end(), 0);
  for (int i = kNumCells - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(cells[i], cells[pick(local)]);
  }
  std::uniform_int_distribution<int> kind_dist(0, kNumKinds - 1), color_dist(0, kNumColors - 1),
      bg_dist(0, static_cast<int>(kBackgroundGreys.size()) - 1);
  for (int i = 0; i < count; ++i) {
    PlacedShape s;
    s.kind = static_cast<ShapeKind>(kind_dist(local));
    s.color = color_dist(local);
    s.cell = cells[i];
    spec.shapes.push_back(s);
  }
  std::sort(spec.shapes.begin(), spec.shapes.end(), [](auto& a, auto& b) { return a.cell < b.cell; });
  spec.background = kBackgroundGreys[static_cast<std::size_t>(bg_dist(local))];
  return spec;
}

CaptionLevels describe(const SceneSpec& spec) {
  validate(spec);
  HMID_REQUIRE(!spec.shapes.empty(), "cannot caption an empty scene");
  auto shapes = spec.shapes;
  std::sort(shapes.begin(), shapes.end(), [](auto& a, auto& b) { return a.cell < b.cell; });

  std::vector<std::string> specific, mid;
  static const char* kHex = "0123456789abcdef";
  std::array<int, kNumKinds> kind_count{};
  for (const auto& s : shapes) {
    specific.push_back(shape_token(s) + kHex[s.cell]);
    ++kind_count[static_cast<std::size_t>(s.kind)];
  }
  for (int k = 0; k < kNumKinds; ++k)
    if (kind_count[k]) mid.push_back(std::to_string(kind_count[k]) + kKindCode[k]);

  CaptionLevels out;
  out.specific = join(specific);
  out.mid = join(mid);
  // Content-free, so every scene satisfies it.
  out.generic = generic_pool()[spec.seed % generic_pool().size()];
  return out;
}

CellBox cell_box(int cell, int image_size) {
  const int s = image_size / kGrid;
  const int r = cell / kGrid, c = cell % kGrid;
  return {c * s, r * s, (c + 1) * s, (r + 1) * s};
}

TensorF render(const SceneSpec& spec, int image_size) {
  validate(spec);
  HMID_REQUIRE(image_size > 0 && image_size % kGrid == 0, "image size must be a positive multiple of 4");
  TensorF img({image_size, image_size, 3}, spec.background);
  const int s = image_size / kGrid;
  const double margin = std::max(1.0, s / 8.0);
  for (const auto& shape : spec.shapes) {
    const auto box = cell_box(shape.cell, image_size);
    const auto& rgb = palette()[static_cast<std::size_t>(shape.color)].rgb;
    for (int y = box.y0; y < box.y1; ++y)
      for (int x = box.x0; x < box.x1; ++x) {
        if (!inside_shape(shape.kind, x - box.x0 + 0.5, y - box.y0 + 0.5, s, margin)) continue;
        float* px = img.data() + (static_cast<std::int64_t>(y) * image_size + x) * 3;
        std::copy(rgb.begin(), rgb.end(), px);
      }
  }
  return img;
}

std::vector<std::int64_t> tokenize(const std::string& text, std::int64_t max_len) {
  if (static_cast<std::int64_t>(text.size()) + 1 > max_len)
    throw ConfigError("caption '" + text + "' does not fit in " + std::to_string(max_len) + " tokens");
  std::vector<std::int64_t> ids(static_cast<std::size_t>(max_len), kPadToken);
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto b = static_cast<unsigned char>(text[i]);
    if (b < 32) throw ConfigError("caption contains a control byte");
    ids[i] = b;
  }
  ids[text.size()] = kEosToken;
  return ids;
}

std::int64_t eos_position(std::span<const std::int64_t> ids) {
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == kEosToken) return static_cast<std::int64_t>(i);
  throw ContractViolation("token sequence has no EOS");
}

bool is_val(std::uint64_t seed, std::int64_t index) {
  return splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(index))) % 10 == 0;
}

void write_ppm(const fs::path& path, const TensorF& image) {
  HMID_REQUIRE(image.rank() == 3 && image.dim(2) == 3, "write_ppm expects [H, W, 3]");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing", path.string());
  out << "P6\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  std::vector<char> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i)
    bytes[i] = static_cast<char>(std::lround(std::clamp(image[i], 0.0f, 1.0f) * 255.0f));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed", path.string());
}

namespace {

std::vector<std::uint8_t> read_ppm_bytes(const fs::path& path, int& width, int& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open", path.string());
  std::string magic;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P6" || width <= 0 || height <= 0 || maxval != 255) throw IoError("not an 8-bit P6 image", path.string());
  in.get();
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(width) * height * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw IoError("truncated image", path.string());
  return bytes;
}

}  // namespace

TensorF read_ppm(const fs::path& path) {
  int w = 0, h = 0;
  const auto bytes = read_ppm_bytes(path, w, h);
  TensorF img({h, w, 3});
  for (std::size_t i = 0; i < bytes.size(); ++i) img[i] = bytes[i] / 255.0f;
  return img;
}

std::vector<SampleRecord> generate_corpus(const CorpusOptions& opts, const fs::path& dir) {
  if (opts.n < 1) throw ConfigError("corpus size must be at least 1");
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create directory (" + ec.message() + ")", (dir / "images").string());

  std::mt19937_64 rng(opts.seed);
  std::unordered_set<std::string> seen;
  std::vector<SampleRecord> records;
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw IoError("cannot open for writing", (dir / "manifest.jsonl").string());
  for (std::int64_t i = 0; i < opts.n; ++i) {
    SceneSpec spec;
    CaptionLevels caps;
    do {
      spec = sample_scene(rng);
      caps = describe(spec);
    } while (!seen.insert(caps.specific).second);

    char id[24];
    std::snprintf(id, sizeof id, "%06lld", static_cast<long long>(i));
    SampleRecord rec{id, std::string("images/") + id + ".ppm", caps, is_val(opts.seed, i)};
    write_ppm(dir / rec.image_path, render(spec, opts.image_size));
    json line = {{"id", rec.id},
                 {"image_path", rec.image_path},
                 {"caption_specific", caps.specific},
                 {"caption_mid", caps.mid},
                 {"caption_generic", caps.generic},
                 {"split", rec.val ? "val" : "train"}};
    manifest << line.dump() << '\n';
    records.push_back(std::move(rec));
  }
  if (!manifest) throw IoError("write failed", (dir / "manifest.jsonl").string());
  return records;
}

std::vector<std::int64_t> Corpus::split_indices(bool val) const {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].val == val) out.push_back(static_cast<std::int64_t>(i));
  return out;
}

TensorF Corpus::image(std::size_t i) const {
  const auto& px = pixels.at(i);
  TensorF img({image_size, image_size, 3});
  for (std::size_t k = 0; k < px.size(); ++k) img[k] = px[k] / 255.0f;
  return img;
}

Corpus load_corpus(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.jsonl";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open corpus manifest", manifest_path.string());
  Corpus corpus;
  corpus.dir = dir;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      SampleRecord rec;
      rec.id = j.at("id").get<std::string>();
      rec.image_path = j.at("image_path").get<std::string>();
      rec.captions.specific = j.at("caption_specific").get<std::string>();
      rec.captions.mid = j.at("caption_mid").get<std::string>();
      rec.captions.generic = j.at("caption_generic").get<std::string>();
      rec.val = j.at("split").get<std::string>() == "val";
      corpus.samples.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw IoError("malformed manifest line " + std::to_string(lineno) + " (" + e.what() + ")",
                    manifest_path.string());
    }
  }
  if (corpus.samples.empty()) throw IoError("empty corpus manifest", manifest_path.string());
  for (const auto& rec : corpus.samples) {
    int w = 0, h = 0;
    corpus.pixels.push_back(read_ppm_bytes(dir / rec.image_path, w, h));
    if (w != h) throw IoError("non-square image", (dir / rec.image_path).string());
    if (corpus.image_size == 0) corpus.image_size = w;
    if (w != corpus.image_size) throw IoError("image size differs from the rest of the corpus", (dir / rec.image_path).string());
  }
  return corpus;
}

}  // namespace hmid::synth
