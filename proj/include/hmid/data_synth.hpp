#pragma once

// Procedural image/caption corpus: flat-color shapes on a 4x4 grid with three
// nested caption levels per scene.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "hmid/tensor.hpp"

namespace hmid::synth {

inline constexpr int kGrid = 4;
inline constexpr int kNumCells = kGrid * kGrid;
inline constexpr int kMaxShapes = 3;
inline constexpr int kDefaultImageSize = 64;

enum class ShapeKind : std::uint8_t { Circle, Square, Triangle };
inline constexpr int kNumKinds = 3;

struct PaletteColor {
  const char* name;
  char code;
  std::array<float, 3> rgb;
};
inline constexpr int kNumColors = 8;
const std::array<PaletteColor, kNumColors>& palette();
inline constexpr std::array<float, 2> kBackgroundGreys{0.35f, 0.6f};

struct PlacedShape {
  ShapeKind kind = ShapeKind::Circle;
  int color = 0;  // index into palette()
  int cell = 0;   // row-major on the grid
};

struct SceneSpec {
  std::vector<PlacedShape> shapes;
  float background = kBackgroundGreys[0];
  std::uint64_t seed = 0;
};

enum class CaptionLevel : std::uint8_t { Specific, Mid, Generic };
const char* level_name(CaptionLevel level);

struct CaptionLevels {
  std::string specific;  // every shape with color, kind and cell, e.g. "rO5 bSc"
  std::string mid;       // count per kind in O, S, T order, e.g. "1O 2S"
  std::string generic;   // one of generic_pool(), picked by the scene seed
};

const std::array<std::string, 4>& generic_pool();

/// Throws ContractViolation for out-of-range fields, overlapping cells or too many shapes.
void validate(const SceneSpec& spec);
SceneSpec sample_scene(std::mt19937_64& rng);
CaptionLevels describe(const SceneSpec& spec);

/// Pixel bounds [x0, x1) x [y0, y1) of a grid cell.
struct CellBox {
  int x0, y0, x1, y1;
};
CellBox cell_box(int cell, int image_size);

/// Flat-color rasterization without anti-aliasing; values in [0, 1], shape [S, S, 3].
TensorF render(const SceneSpec& spec, int image_size);

// ---- tokenizer -----------------------------------------------------------------

inline constexpr std::int64_t kPadToken = 0;
inline constexpr std::int64_t kEosToken = 1;

/// Byte-level ids with a trailing EOS, padded to max_len. Throws ConfigError if the
/// caption plus EOS does not fit or contains a byte below 32.
std::vector<std::int64_t> tokenize(const std::string& text, std::int64_t max_len);
/// Position of the EOS token in a tokenized caption.
std::int64_t eos_position(std::span<const std::int64_t> ids);

// ---- corpus --------------------------------------------------------------------

struct SampleRecord {
  std::string id;
  std::string image_path;  // relative to the corpus directory
  CaptionLevels captions;
  bool val = false;
};

struct CorpusOptions {
  std::int64_t n = 2000;
  std::uint64_t seed = 0;
  int image_size = kDefaultImageSize;
};

/// Returns true when sample `index` of a corpus generated with `seed` is in the val split (~10%).
bool is_val(std::uint64_t seed, std::int64_t index);

/// Writes images/<id>.ppm and manifest.jsonl under `dir`. Specific captions are
/// unique within the corpus. Returns the manifest records.
std::vector<SampleRecord> generate_corpus(const CorpusOptions& opts, const std::filesystem::path& dir);

/// Corpus loaded into memory; pixels kept as 8-bit.
struct Corpus {
  std::filesystem::path dir;
  int image_size = 0;
  std::vector<SampleRecord> samples;
  std::vector<std::vector<std::uint8_t>> pixels;  // one [S*S*3] buffer per sample

  std::size_t size() const noexcept { return samples.size(); }
  std::vector<std::int64_t> split_indices(bool val) const;
  /// [S, S, 3] floats in [0, 1].
  TensorF image(std::size_t i) const;
};

Corpus load_corpus(const std::filesystem::path& dir);

void write_ppm(const std::filesystem::path& path, const TensorF& image);
/// Returns [H, W, 3] floats in [0, 1].
TensorF read_ppm(const std::filesystem::path& path);

}  // namespace hmid::synth
