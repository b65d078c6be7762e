#pragma once

// Dual-tower toy encoders (pre-norm transformer blocks), the learnable scalars
// tau, c, alpha_img, alpha_txt, and projection onto the hyperboloid.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "hmid/autograd.hpp"
#include "hmid/masking.hpp"
#include "hmid/tensor.hpp"

namespace hmid::model {

using ad::ParamId;
using ad::Tape;
using ad::Var;

struct EncoderConfig {
  std::int64_t embed_dim = 64;
  std::int64_t depth = 2;
  std::int64_t heads = 4;
  std::int64_t patch_size = 16;
  std::int64_t vocab_size = 256;
  std::int64_t max_text_len = 16;
  std::int64_t image_size = 64;
  std::int64_t proj_dim = 64;  // shared embedding width, so towers of different widths are comparable
  std::int64_t mlp_ratio = 4;

  /// Throws ConfigError.
  void validate() const;
  std::int64_t grid() const { return image_size / patch_size; }
  std::int64_t num_patches() const { return grid() * grid(); }
  std::int64_t patch_dim() const { return 3 * patch_size * patch_size; }
  bool operator==(const EncoderConfig&) const = default;
};

enum class Geometry : std::uint8_t { Hyperbolic, Euclidean };
const char* geometry_name(Geometry g);
Geometry parse_geometry(const std::string& s);

struct ParamEntry {
  std::string name;
  TensorF value;
  bool trainable = true;  // false for frozen positional embeddings
  bool decay = false;     // weight decay applies (matrices only)
};

class ParameterStore {
 public:
  ParamId add(std::string name, TensorF value, bool trainable, bool decay);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  ParamId id(const std::string& name) const;
  ParamEntry& at(ParamId id) { return entries_.at(id); }
  const ParamEntry& at(ParamId id) const { return entries_.at(id); }
  TensorF& value(const std::string& name) { return entries_[id(name)].value; }
  const TensorF& value(const std::string& name) const { return entries_[id(name)].value; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::int64_t num_values() const;
  /// FNV-1a over names, shapes and raw bytes.
  std::uint64_t checksum() const;

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, ParamId> index_;
};

struct ScalarInit {
  float tau = 0.7f;
  float curvature = 1.0f;
  float alpha = 1.0f;
};

struct Model {
  EncoderConfig config;
  Geometry geometry = Geometry::Hyperbolic;
  ParameterStore params;
  bool frozen = false;
  std::map<std::string, std::string> meta;  // free-form provenance (config hash, step, ...)

  float tau() const { return params.value("tau")[0]; }
  float curvature() const { return params.value("curvature")[0]; }
  float alpha_img() const { return params.value("alpha_img")[0]; }
  float alpha_txt() const { return params.value("alpha_txt")[0]; }
};

/// Random init: matrices N(0, 0.02), gains 1, biases 0, sin-cos positional tables.
Model init_model(const EncoderConfig& config, std::uint64_t seed, const ScalarInit& scalars = {},
                 Geometry geometry = Geometry::Hyperbolic);

/// Fixed sin-cos tables. Image: [num_patches + 1, d], row 0 (class token) zero.
TensorF image_positional_table(const EncoderConfig& config);
TensorF text_positional_table(const EncoderConfig& config);

/// Parameters of a model bound onto one tape. Trainable parameters become
/// parameter leaves (ids = store ids) when `with_grad`, constants otherwise.
class Bound {
 public:
  Bound(Tape<float>& tape, const Model& model, bool with_grad);
  Var<float> operator()(const std::string& name);
  Tape<float>& tape() noexcept { return tape_; }
  const Model& model() const noexcept { return model_; }

 private:
  Tape<float>& tape_;
  const Model& model_;
  bool with_grad_;
  std::unordered_map<ParamId, Var<float>> cache_;
};

/// Equal-length patch sequences stacked for one forward pass.
struct ImageBatch {
  TensorF tokens;                       // [batch * kept, patch_dim]
  std::vector<std::int64_t> positions;  // original patch index of each token row
  std::int64_t batch = 0;
  std::int64_t kept = 0;
};
ImageBatch stack_patches(const std::vector<masking::PatchSequence>& seqs);

/// Shifts [0, 1] pixels to [-0.5, 0.5] and patchifies (unmasked).
masking::PatchSequence image_tokens(const TensorF& image, std::int64_t patch_size);

/// Class-token readout after the image tower, projected to proj_dim: [B, proj_dim].
Var<float> encode_image(Bound& p, const ImageBatch& images);
/// EOS readout after the causal text tower: [B, proj_dim]. ids is [B * max_text_len].
Var<float> encode_text(Bound& p, const std::vector<std::int64_t>& ids, std::int64_t batch);

/// exp_map_origin(alpha * v, c) row-wise; returns space parts.
template <typename T>
Var<T> project_to_hyperbolic(Var<T> v, Var<T> alpha, Var<T> c);

// ---- checkpoints -------------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "HMID1";
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace hmid::model
