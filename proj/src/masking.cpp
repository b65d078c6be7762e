#include "hmid/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace hmid::masking {

PatchSequence patchify(const TensorF& image, std::int64_t patch_size) {
  HMID_REQUIRE(image.rank() == 3 && image.dim(2) == 3, "patchify expects an [H, W, 3] image, got " +
                                                           shape_str(image.shape()));
  const auto H = image.dim(0), W = image.dim(1);
  if (patch_size <= 0 || H % patch_size != 0 || W % patch_size != 0)
    throw ConfigError("image " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible by patch size " +
                      std::to_string(patch_size));
  PatchSequence seq;
  seq.grid_rows = H / patch_size;
  seq.grid_cols = W / patch_size;
  const auto n = seq.grid_rows * seq.grid_cols;
  const auto dim = 3 * patch_size * patch_size;
  seq.tokens = TensorF({n, dim});
  seq.kept_indices.resize(static_cast<std::size_t>(n));
  std::iota(seq.kept_indices.begin(), seq.kept_indices.end(), 0);
  for (std::int64_t pr = 0; pr < seq.grid_rows; ++pr)
    for (std::int64_t pc = 0; pc < seq.grid_cols; ++pc) {
      float* dst = seq.tokens.data() + (pr * seq.grid_cols + pc) * dim;
      for (std::int64_t y = 0; y < patch_size; ++y) {
        const float* src = image.data() + ((pr * patch_size + y) * W + pc * patch_size) * 3;
        std::copy_n(src, patch_size * 3, dst + y * patch_size * 3);
      }
    }
  return seq;
}

TensorF unpatchify(const PatchSequence& seq, std::int64_t patch_size) {
  HMID_REQUIRE(seq.num_kept() == seq.num_patches(), "unpatchify needs the full, unmasked sequence");
  const auto H = seq.grid_rows * patch_size, W = seq.grid_cols * patch_size;
  const auto dim = 3 * patch_size * patch_size;
  HMID_REQUIRE(seq.patch_dim() == dim, "unpatchify: patch size does not match token width");
  TensorF image({H, W, 3});
  for (std::int64_t i = 0; i < seq.num_patches(); ++i) {
    const auto p = seq.kept_indices[i];
    const auto pr = p / seq.grid_cols, pc = p % seq.grid_cols;
    const float* src = seq.tokens.data() + i * dim;
    for (std::int64_t y = 0; y < patch_size; ++y)
      std::copy_n(src + y * patch_size * 3, patch_size * 3,
                  image.data() + ((pr * patch_size + y) * W + pc * patch_size) * 3);
  }
  return image;
}

std::int64_t kept_count(std::int64_t num_patches, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must lie in [0, 1), got " + std::to_string(ratio));
  const auto k = static_cast<std::int64_t>(std::llround(static_cast<double>(num_patches) * (1.0 - ratio)));
  return std::clamp<std::int64_t>(k, 1, num_patches);
}

PatchSequence random_mask(const PatchSequence& seq, double ratio, std::uint64_t seed) {
  const auto n = seq.num_kept();
  const auto keep = kept_count(n, ratio);
  if (keep == n) {
    PatchSequence out = seq;
    out.mask_ratio = ratio;
    return out;
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::int64_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  order.resize(static_cast<std::size_t>(keep));
  std::sort(order.begin(), order.end());

  PatchSequence out;
  out.grid_rows = seq.grid_rows;
  out.grid_cols = seq.grid_cols;
  out.mask_ratio = ratio;
  const auto dim = seq.patch_dim();
  out.tokens = TensorF({keep, dim});
  out.kept_indices.reserve(static_cast<std::size_t>(keep));
  for (std::int64_t i = 0; i < keep; ++i) {
    const auto src_row = order[i];
    out.kept_indices.push_back(seq.kept_indices[src_row]);
    std::copy_n(seq.tokens.data() + src_row * dim, dim, out.tokens.data() + i * dim);
  }
  return out;
}

}  // namespace hmid::masking
