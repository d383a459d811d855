#pragma once

#include <cstdint>
#include <vector>

#include "mimforge/prng.hpp"

namespace mimforge {

struct MaskBlock {
  std::int64_t top = 0;
  std::int64_t left = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;

  bool operator==(const MaskBlock&) const = default;
};

/// Masked patch positions of one image plus the rectangles that produced them.
///
/// `indices` equals the union of `blocks` minus `trimmed`, where `trimmed`
/// holds the cells removed from the last block to hit the exact count.
struct MaskSet {
  std::int64_t grid_h = 0;
  std::int64_t grid_w = 0;
  std::vector<std::int64_t> indices;  // sorted, unique, row-major flat
  std::vector<MaskBlock> blocks;
  std::vector<std::int64_t> trimmed;

  std::int64_t size() const { return static_cast<std::int64_t>(indices.size()); }
  bool empty() const { return indices.empty(); }

  static MaskSet none(std::int64_t grid_h, std::int64_t grid_w);
  static MaskSet all(std::int64_t grid_h, std::int64_t grid_w);
  static MaskSet from_indices(std::int64_t grid_h, std::int64_t grid_w, std::vector<std::int64_t> indices);

  bool operator==(const MaskSet&) const = default;
};

struct MaskingOptions {
  double ratio = 0.4;
  std::int64_t min_block = 16;
  double aspect = 0.3;
};

/// round(ratio * cells), half away from zero.
std::int64_t mask_target_count(std::int64_t cells, double ratio);

/// Block-wise masking with exact count: rectangles with sampled area >=
/// min_block and aspect ratio in [aspect, 1/aspect] are anchored uniformly
/// over every offset that overlaps the grid and clipped to it, until the
/// target is reached or passed; the surplus is then trimmed from the newest
/// cells of the last rectangle in reverse row-major order. Recorded blocks
/// are the clipped rectangles.
MaskSet generate_block_mask(std::int64_t grid_h, std::int64_t grid_w, const MaskingOptions& options, Prng& rng);

/// Row-major grid_h*grid_w flags.
std::vector<std::uint8_t> mask_to_bitmap(const MaskSet& mask);

/// Union of blocks minus trimmed cells, sorted.
std::vector<std::int64_t> reconstruct_from_blocks(const MaskSet& mask);

}  // namespace mimforge
