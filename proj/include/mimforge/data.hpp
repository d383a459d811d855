#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mimforge/prng.hpp"
#include "mimforge/tensor.hpp"

namespace mimforge {

/// 3 x S x S channel-major pixels.
struct ImageRecord {
  std::vector<std::uint8_t> pixels;
  std::uint16_t label = 0;

  bool operator==(const ImageRecord&) const = default;
};

struct Dataset {
  std::int64_t image_size = 0;
  std::int64_t class_count = 0;
  std::vector<ImageRecord> records;

  std::int64_t size() const { return static_cast<std::int64_t>(records.size()); }
  std::vector<std::int64_t> labels() const;

  bool operator==(const Dataset&) const = default;
};

struct SyntheticSpec {
  std::int64_t class_count = 8;
  std::int64_t image_size = 32;
  std::int64_t samples_per_class = 500;
  std::uint64_t seed = 0;
  double noise_sigma = 24.0;
  /// Per-sample, per-channel offset drawn uniformly from [-color_cast, color_cast].
  double color_cast = 60.0;
  /// Scales how far class colours and grating tints sit from neutral grey.
  double cue_contrast = 0.3;
  /// Sample index of the first record per class; a held-out split uses the
  /// same class patterns with indices past the training range.
  std::int64_t index_offset = 0;

  void validate() const;
};

/// Image `index` of class `label`: a class-specific grating (frequency and
/// orientation) with a per-sample phase, a class-coloured rectangle near a
/// class-specific position, a per-sample brightness shift and Gaussian noise.
ImageRecord synth_sample(const SyntheticSpec& spec, std::int64_t label, std::int64_t index);

/// samples_per_class records per class, ordered by class then index.
Dataset synth_generate(const SyntheticSpec& spec);

struct CropRect {
  std::int64_t top = 0;
  std::int64_t left = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
};

struct CropOptions {
  double scale_min = 0.2;
  double scale_max = 1.0;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  int attempts = 10;
};

/// Area fraction uniform in [scale_min, scale_max], log-uniform aspect in
/// [ratio_min, ratio_max]; falls back to a centre crop after `attempts` misses.
CropRect sample_crop(std::int64_t height, std::int64_t width, const CropOptions& options, Prng& rng);

/// Half-pixel bilinear resize of `crop` of a 3 x H x W image to 3 x out x out.
std::vector<float> resize_bilinear(std::span<const std::uint8_t> image, std::int64_t height, std::int64_t width,
                                   const CropRect& crop, std::int64_t out_size);

/// Random resized crop, returned as float pixels in [0, 255].
std::vector<float> rand_resize_crop(std::span<const std::uint8_t> image, std::int64_t image_size,
                                    const CropOptions& options, std::int64_t out_size, Prng& rng);

/// (x / 255 - 0.5) / 0.5 per value.
std::vector<float> normalize_pixels(std::span<const float> pixels);
std::vector<float> normalize_pixels(std::span<const std::uint8_t> pixels);

/// 3 x S x S -> grid x (3 p^2), patches row-major, (channel, dy, dx) inside.
std::vector<float> patchify_image(std::span<const float> image, std::int64_t image_size, std::int64_t patch);
std::vector<float> unpatchify_image(std::span<const float> patches, std::int64_t image_size, std::int64_t patch);

/// Pure function of (count, seed, epoch).
std::vector<std::int64_t> epoch_permutation(std::int64_t count, std::uint64_t seed, std::int64_t epoch);

/// Normalised [B, 3, S, S] batch. With `augment`, every image gets a random
/// resized crop from its own split of `rng`.
TensorF make_batch(const Dataset& data, std::span<const std::int64_t> indices, bool augment,
                   const CropOptions& crop, Prng& rng);

void save_evad(const std::string& path, const Dataset& data);
Dataset load_evad(const std::string& path);

}  // namespace mimforge
