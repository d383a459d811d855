#include "mimforge/masking.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mimforge/errors.hpp"

namespace mimforge {
namespace {

struct BlockShape {
  std::int64_t h, w;
};

bool aspect_ok(std::int64_t h, std::int64_t w, double a) {
  const double r = static_cast<double>(h) / static_cast<double>(w);
  return r >= a - 1e-12 && r <= 1.0 / a + 1e-12;
}

void check_grid(std::int64_t grid_h, std::int64_t grid_w) {
  if (grid_h <= 0 || grid_w <= 0)
    throw ArgumentError("mask grid must be at least 1x1, got " + std::to_string(grid_h) + "x" + std::to_string(grid_w));
}

}  // namespace

MaskSet MaskSet::none(std::int64_t grid_h, std::int64_t grid_w) {
  check_grid(grid_h, grid_w);
  MaskSet m;
  m.grid_h = grid_h;
  m.grid_w = grid_w;
  return m;
}

MaskSet MaskSet::all(std::int64_t grid_h, std::int64_t grid_w) {
  MaskSet m = none(grid_h, grid_w);
  m.indices.resize(static_cast<std::size_t>(grid_h * grid_w));
  for (std::size_t i = 0; i < m.indices.size(); ++i) m.indices[i] = static_cast<std::int64_t>(i);
  m.blocks.push_back({0, 0, grid_h, grid_w});
  return m;
}

MaskSet MaskSet::from_indices(std::int64_t grid_h, std::int64_t grid_w, std::vector<std::int64_t> indices) {
  MaskSet m = none(grid_h, grid_w);
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  for (auto i : indices)
    if (i < 0 || i >= grid_h * grid_w)
      throw ArgumentError("mask index " + std::to_string(i) + " outside grid of " + std::to_string(grid_h * grid_w));
  // Each cell is its own 1x1 block so the reconstruction invariant holds.
  for (auto i : indices) m.blocks.push_back({i / grid_w, i % grid_w, 1, 1});
  m.indices = std::move(indices);
  return m;
}

std::int64_t mask_target_count(std::int64_t cells, double ratio) {
  return std::llround(ratio * static_cast<double>(cells));
}

MaskSet generate_block_mask(std::int64_t grid_h, std::int64_t grid_w, const MaskingOptions& options, Prng& rng) {
  check_grid(grid_h, grid_w);
  if (!(options.ratio >= 0.0 && options.ratio <= 1.0))
    throw ArgumentError("mask ratio must lie in [0,1], got " + std::to_string(options.ratio));
  if (options.min_block < 1) throw ArgumentError("min_block must be >= 1");
  if (!(options.aspect > 0.0 && options.aspect <= 1.0))
    throw ArgumentError("aspect bound must lie in (0,1], got " + std::to_string(options.aspect));

  const std::int64_t cells = grid_h * grid_w;
  const std::int64_t target = mask_target_count(cells, options.ratio);
  const std::int64_t min_area = std::min(options.min_block, cells);

  std::vector<BlockShape> shapes;
  for (std::int64_t h = 1; h <= grid_h; ++h)
    for (std::int64_t w = 1; w <= grid_w; ++w)
      if (h * w >= min_area && aspect_ok(h, w, options.aspect)) shapes.push_back({h, w});
  if (shapes.empty()) {
    // Grid too thin for the aspect bound; keep the area bound only.
    for (std::int64_t h = 1; h <= grid_h; ++h)
      for (std::int64_t w = 1; w <= grid_w; ++w)
        if (h * w >= min_area) shapes.push_back({h, w});
  }
  const bool relaxed = !aspect_ok(shapes.front().h, shapes.front().w, options.aspect);
  auto valid = [&](std::int64_t h, std::int64_t w) {
    return h >= 1 && w >= 1 && h <= grid_h && w <= grid_w && h * w >= min_area &&
           (relaxed || aspect_ok(h, w, options.aspect));
  };

  MaskSet mask = MaskSet::none(grid_h, grid_w);
  std::vector<std::uint8_t> bitmap(static_cast<std::size_t>(cells), 0);
  std::int64_t count = 0;
  const double log_lo = std::log(options.aspect), log_hi = -std::log(options.aspect);

  while (count < target) {
    const std::int64_t need = target - count;
    const std::int64_t area_hi = std::min(cells, std::max(min_area, need));
    BlockShape shape{0, 0};
    for (int attempt = 0; attempt < 10 && shape.h == 0; ++attempt) {
      const double area = rng.uniform(static_cast<double>(min_area), static_cast<double>(area_hi));
      const double aspect = std::exp(rng.uniform(log_lo, log_hi));
      const auto h = static_cast<std::int64_t>(std::llround(std::sqrt(area * aspect)));
      const auto w = static_cast<std::int64_t>(std::llround(std::sqrt(area / aspect)));
      if (valid(h, w)) shape = {h, w};
    }
    if (shape.h == 0) {
      // Rounding kept missing the admissible set; draw an admissible shape directly.
      std::vector<BlockShape> fitting;
      for (const auto& s : shapes)
        if (s.h * s.w <= area_hi) fitting.push_back(s);
      if (fitting.empty()) {
        fitting.push_back(*std::min_element(shapes.begin(), shapes.end(),
                                            [](const BlockShape& a, const BlockShape& b) { return a.h * a.w < b.h * b.w; }));
      }
      shape = fitting[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(fitting.size()) - 1))];
    }
    // The anchor ranges over every offset where the block still touches the
    // grid, and the block is clipped to it. Keeping blocks fully inside would
    // leave corner cells masked ~10x less often than central ones.
    const std::int64_t top0 = rng.uniform_int(1 - shape.h, grid_h - 1);
    const std::int64_t left0 = rng.uniform_int(1 - shape.w, grid_w - 1);
    const std::int64_t top = std::max<std::int64_t>(top0, 0), left = std::max<std::int64_t>(left0, 0);
    const std::int64_t bottom = std::min(top0 + shape.h, grid_h), right = std::min(left0 + shape.w, grid_w);

    std::vector<std::int64_t> added;
    for (std::int64_t y = top; y < bottom; ++y)
      for (std::int64_t x = left; x < right; ++x) {
        const auto idx = y * grid_w + x;
        if (!bitmap[static_cast<std::size_t>(idx)]) added.push_back(idx);
      }
    if (added.empty()) continue;

    mask.blocks.push_back({top, left, bottom - top, right - left});
    for (auto idx : added) bitmap[static_cast<std::size_t>(idx)] = 1;
    count += static_cast<std::int64_t>(added.size());
    if (count > target) {
      const auto excess = count - target;
      for (std::int64_t k = 0; k < excess; ++k) {
        const auto idx = added[added.size() - 1 - static_cast<std::size_t>(k)];
        bitmap[static_cast<std::size_t>(idx)] = 0;
        mask.trimmed.push_back(idx);
      }
      count = target;
    }
  }

  for (std::int64_t i = 0; i < cells; ++i)
    if (bitmap[static_cast<std::size_t>(i)]) mask.indices.push_back(i);
  std::sort(mask.trimmed.begin(), mask.trimmed.end());
  return mask;
}

std::vector<std::uint8_t> mask_to_bitmap(const MaskSet& mask) {
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(mask.grid_h * mask.grid_w), 0);
  for (auto i : mask.indices) {
    if (i < 0 || i >= mask.grid_h * mask.grid_w) throw ArgumentError("mask index " + std::to_string(i) + " outside grid");
    bits[static_cast<std::size_t>(i)] = 1;
  }
  return bits;
}

std::vector<std::int64_t> reconstruct_from_blocks(const MaskSet& mask) {
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(mask.grid_h * mask.grid_w), 0);
  for (const auto& b : mask.blocks)
    for (std::int64_t y = b.top; y < b.top + b.height; ++y)
      for (std::int64_t x = b.left; x < b.left + b.width; ++x) bits[static_cast<std::size_t>(y * mask.grid_w + x)] = 1;
  for (auto t : mask.trimmed) bits[static_cast<std::size_t>(t)] = 0;
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i]) out.push_back(static_cast<std::int64_t>(i));
  return out;
}

}  // namespace mimforge
