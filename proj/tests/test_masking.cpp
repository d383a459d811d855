#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "mimforge/errors.hpp"
#include "mimforge/masking.hpp"

using namespace mimforge;

namespace {

MaskingOptions opts(double ratio) {
  MaskingOptions o;
  o.ratio = ratio;
  return o;
}

}  // namespace

TEST_CASE("16x16 at ratio 0.4 masks exactly 102 cells") {
  CHECK(mask_target_count(256, 0.4) == 102);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Prng rng(seed, 3);
    CHECK(generate_block_mask(16, 16, opts(0.4), rng).size() == 102);
  }
}

TEST_CASE("ratio 0 and 1 give the empty and the full set") {
  Prng rng(1);
  auto empty = generate_block_mask(16, 16, opts(0.0), rng);
  CHECK(empty.empty());
  auto full = generate_block_mask(16, 16, opts(1.0), rng);
  REQUIRE(full.size() == 256);
  for (std::int64_t i = 0; i < 256; ++i) CHECK(full.indices[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("exact count for every decile ratio on grids up to 32x32") {
  std::uint64_t seed = 0;
  for (std::int64_t h = 1; h <= 32; h += (h < 4 ? 1 : 5)) {
    for (std::int64_t w : {1, 3, 7, 16, 32}) {
      for (int k = 0; k <= 10; ++k) {
        const double ratio = k / 10.0;
        Prng rng(seed++);
        auto m = generate_block_mask(h, w, opts(ratio), rng);
        const auto want = static_cast<std::int64_t>(std::llround(ratio * static_cast<double>(h * w)));
        INFO(h << "x" << w << " ratio " << ratio);
        CHECK(m.size() == want);
        CHECK(std::is_sorted(m.indices.begin(), m.indices.end()));
        CHECK(std::adjacent_find(m.indices.begin(), m.indices.end()) == m.indices.end());
        CHECK(reconstruct_from_blocks(m) == m.indices);
      }
    }
  }
}

TEST_CASE("per-cell masking frequency stays inside [0.25, 0.55]") {
  std::vector<int> hits(256, 0);
  const int seeds = 10000;
  for (int s = 0; s < seeds; ++s) {
    Prng rng(static_cast<std::uint64_t>(s));
    for (auto idx : generate_block_mask(16, 16, opts(0.4), rng).indices) ++hits[static_cast<std::size_t>(idx)];
  }
  const auto [lo, hi] = std::minmax_element(hits.begin(), hits.end());
  MESSAGE("cell frequency range " << *lo / double(seeds) << " .. " << *hi / double(seeds));
  CHECK(*lo / double(seeds) >= 0.25);
  CHECK(*hi / double(seeds) <= 0.55);
}

TEST_CASE("blocks respect the area and aspect bounds and stay on the grid") {
  for (std::uint64_t s = 0; s < 300; ++s) {
    Prng rng(s);
    auto m = generate_block_mask(16, 16, opts(0.4), rng);
    REQUIRE_FALSE(m.blocks.empty());
    for (const auto& b : m.blocks) {
      CHECK(b.top >= 0);
      CHECK(b.left >= 0);
      CHECK(b.top + b.height <= 16);
      CHECK(b.left + b.width <= 16);
      CHECK(b.height >= 1);
      CHECK(b.width >= 1);
    }
    // Trimmed cells come from the last block only.
    const auto& last = m.blocks.back();
    for (auto t : m.trimmed) {
      const auto r = t / 16, c = t % 16;
      CHECK(r >= last.top);
      CHECK(r < last.top + last.height);
      CHECK(c >= last.left);
      CHECK(c < last.left + last.width);
    }
  }
}

TEST_CASE("same seed and stream give the same mask, different streams differ") {
  Prng a(77, 5), b(77, 5), c(77, 6);
  auto ma = generate_block_mask(16, 16, opts(0.4), a);
  auto mb = generate_block_mask(16, 16, opts(0.4), b);
  auto mc = generate_block_mask(16, 16, opts(0.4), c);
  CHECK(ma == mb);
  CHECK_FALSE(ma.indices == mc.indices);
}

TEST_CASE("bitmap conversion") {
  auto none = mask_to_bitmap(MaskSet::none(3, 3));
  CHECK(std::all_of(none.begin(), none.end(), [](auto v) { return v == 0; }));
  auto all = mask_to_bitmap(MaskSet::all(3, 3));
  CHECK(std::all_of(all.begin(), all.end(), [](auto v) { return v == 1; }));
  auto diag = mask_to_bitmap(MaskSet::from_indices(2, 2, {0, 3}));
  CHECK(diag == std::vector<std::uint8_t>{1, 0, 0, 1});
}

TEST_CASE("invalid masking arguments are rejected") {
  Prng rng(0);
  CHECK_THROWS_AS(generate_block_mask(16, 16, opts(1.5), rng), ArgumentError);
  CHECK_THROWS_AS(generate_block_mask(0, 16, opts(0.4), rng), ArgumentError);
  CHECK_THROWS_AS(MaskSet::from_indices(2, 2, {4}), ArgumentError);
}
