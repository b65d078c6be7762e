#pragma once

#include <cstdint>
#include <vector>

#include "hmid/tensor.hpp"

namespace hmid::masking {

/// Patch tokens of one image. Rows of `tokens` correspond to `kept_indices`,
/// which are original row-major patch positions, strictly increasing.
struct PatchSequence {
  TensorF tokens;  // [kept, 3 * patch_size^2]
  std::vector<std::int64_t> kept_indices;
  std::int64_t grid_rows = 0;
  std::int64_t grid_cols = 0;
  double mask_ratio = 0.0;

  std::int64_t num_patches() const noexcept { return grid_rows * grid_cols; }
  std::int64_t num_kept() const noexcept { return static_cast<std::int64_t>(kept_indices.size()); }
  std::int64_t patch_dim() const { return tokens.cols(); }
};

/// Splits an [H, W, 3] image into non-overlapping patches in row-major order.
/// Each token is the patch's pixels in (y, x, channel) order.
PatchSequence patchify(const TensorF& image, std::int64_t patch_size);

/// Inverse of patchify; requires every patch to be present.
TensorF unpatchify(const PatchSequence& seq, std::int64_t patch_size);

/// round(n * (1 - ratio)), never below 1.
std::int64_t kept_count(std::int64_t num_patches, double ratio);

/// Keeps a uniformly random subset of exactly kept_count() patches, chosen by a
/// seeded Fisher-Yates shuffle. Kept tokens retain their original positions.
PatchSequence random_mask(const PatchSequence& seq, double ratio, std::uint64_t seed);

}  // namespace hmid::masking
