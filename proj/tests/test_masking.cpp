#include <doctest.h>

#include <algorithm>
#include <random>
#include <tuple>

#include "hmid/masking.hpp"

using namespace hmid;
using namespace hmid::masking;

namespace {

TensorF random_image(std::mt19937_64& rng, std::int64_t h, std::int64_t w) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  TensorF img({h, w, 3});
  for (auto& v : img.buffer()) v = u(rng);
  return img;
}

}  // namespace

TEST_CASE("patchify shapes and order") {
  std::mt19937_64 rng(1);
  auto seq = patchify(random_image(rng, 32, 32), 16);
  CHECK(seq.num_patches() == 4);
  CHECK(seq.patch_dim() == 768);
  CHECK(seq.kept_indices == std::vector<std::int64_t>{0, 1, 2, 3});

  // Pixel (y=0, x=16) is the first value of patch 1; (y=16, x=0) starts patch 2.
  TensorF img({32, 32, 3});
  img(0, 16 * 3) = 5.0f;
  img(16, 0) = 7.0f;
  auto s2 = patchify(img, 16);
  CHECK(s2.tokens(1, 0) == 5.0f);
  CHECK(s2.tokens(2, 0) == 7.0f);
}

TEST_CASE("constant image gives identical tokens") {
  auto seq = patchify(TensorF({64, 64, 3}, 0.25f), 16);
  for (std::int64_t r = 1; r < seq.num_patches(); ++r)
    for (std::int64_t c = 0; c < seq.patch_dim(); ++c) CHECK(seq.tokens(r, c) == seq.tokens(0, c));
}

TEST_CASE("unpatchify round-trips bit-exactly") {
  std::mt19937_64 rng(2);
  for (auto [h, w, p] : std::vector<std::tuple<int, int, int>>{{32, 32, 16}, {64, 64, 16}, {48, 32, 8}}) {
    auto img = random_image(rng, h, w);
    CHECK(unpatchify(patchify(img, p), p) == img);
  }
}

TEST_CASE("indivisible image is a configuration error") {
  CHECK_THROWS_AS(patchify(TensorF({30, 32, 3}), 16), ConfigError);
  CHECK_THROWS_AS(patchify(TensorF({32, 32}), 16), ContractViolation);
}

TEST_CASE("random_mask keeps an exact count") {
  std::mt19937_64 rng(3);
  auto seq = patchify(random_image(rng, 64, 64), 16);
  REQUIRE(seq.num_patches() == 16);

  auto same = random_mask(seq, 0.0, 9);
  CHECK(same.tokens == seq.tokens);
  CHECK(same.kept_indices == seq.kept_indices);

  for (auto [ratio, expected] : {std::pair{0.5, 8}, {0.25, 12}, {0.75, 4}, {0.99, 1}}) {
    auto m = random_mask(seq, ratio, 11);
    CHECK(m.num_kept() == expected);
    CHECK(m.tokens.rows() == expected);
    for (std::size_t i = 1; i < m.kept_indices.size(); ++i) CHECK(m.kept_indices[i] > m.kept_indices[i - 1]);
    CHECK(m.kept_indices.back() < 16);
    // Kept rows carry the original patch contents.
    for (std::int64_t i = 0; i < m.num_kept(); ++i)
      for (std::int64_t c = 0; c < seq.patch_dim(); ++c) REQUIRE(m.tokens(i, c) == seq.tokens(m.kept_indices[i], c));
  }
  CHECK(kept_count(5, 0.5) == 3);  // round half away from zero
  CHECK_THROWS_AS(random_mask(seq, 1.0, 1), ConfigError);
  CHECK_THROWS_AS(random_mask(seq, -0.1, 1), ConfigError);
}

TEST_CASE("random_mask is deterministic and uniform") {
  std::mt19937_64 rng(4);
  auto seq = patchify(random_image(rng, 64, 64), 16);
  CHECK(random_mask(seq, 0.5, 77).kept_indices == random_mask(seq, 0.5, 77).kept_indices);

  std::vector<int> hits(16, 0);
  const int trials = 10000;
  for (int s = 0; s < trials; ++s)
    for (auto i : random_mask(seq, 0.5, static_cast<std::uint64_t>(s)).kept_indices) ++hits[static_cast<std::size_t>(i)];
  for (int h : hits) CHECK(std::abs(h / double(trials) - 0.5) <= 0.02);
}

TEST_CASE("masking a masked sequence keeps original positions") {
  std::mt19937_64 rng(5);
  auto seq = patchify(random_image(rng, 64, 64), 16);
  auto once = random_mask(seq, 0.5, 1);
  auto twice = random_mask(once, 0.5, 2);
  CHECK(twice.num_kept() == 4);
  for (auto i : twice.kept_indices)
    CHECK(std::find(once.kept_indices.begin(), once.kept_indices.end(), i) != once.kept_indices.end());
}
