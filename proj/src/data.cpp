#include "mimforge/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "mimforge/binary_io.hpp"
#include "mimforge/errors.hpp"

namespace mimforge {
namespace {

struct ClassPattern {
  double frequency;    // cycles across the image
  double orientation;  // radians
  double tint[3];      // grating channel weights
  std::uint8_t color[3];
  std::int64_t rect_top, rect_left, rect_h, rect_w;
};

ClassPattern class_pattern(const SyntheticSpec& spec, std::int64_t label) {
  Prng rng = Prng(spec.seed, fnv1a64("synthetic-classes")).split(static_cast<std::uint64_t>(label));
  const auto S = spec.image_size;
  ClassPattern p{};
  p.frequency = rng.uniform(1.0, 4.0);
  p.orientation = rng.uniform(0.0, std::numbers::pi);
  for (auto& t : p.tint) t = rng.uniform(0.3, 1.0);
  for (auto& c : p.color) c = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  p.rect_h = std::max<std::int64_t>(1, rng.uniform_int(S / 5, S / 3));
  p.rect_w = std::max<std::int64_t>(1, rng.uniform_int(S / 5, S / 3));
  p.rect_top = rng.uniform_int(0, S - p.rect_h);
  p.rect_left = rng.uniform_int(0, S - p.rect_w);
  return p;
}

}  // namespace

std::vector<std::int64_t> Dataset::labels() const {
  std::vector<std::int64_t> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.label);
  return out;
}

void SyntheticSpec::validate() const {
  if (class_count < 2) throw ArgumentError("synthetic data needs at least 2 classes");
  if (class_count > 65535) throw ArgumentError("class ids must fit in 16 bits");
  if (image_size < 4) throw ArgumentError("synthetic image_size must be >= 4");
  if (samples_per_class < 0 || index_offset < 0) throw ArgumentError("sample counts must be non-negative");
  if (!(noise_sigma >= 0)) throw ArgumentError("noise_sigma must be non-negative");
  if (!(color_cast >= 0) || color_cast > 255) throw ArgumentError("color_cast must lie in [0, 255]");
  if (!(cue_contrast >= 0) || cue_contrast > 1) throw ArgumentError("cue_contrast must lie in [0, 1]");
}

ImageRecord synth_sample(const SyntheticSpec& spec, std::int64_t label, std::int64_t index) {
  if (label < 0 || label >= spec.class_count) throw ArgumentError("synth_sample: label out of range");
  const auto S = spec.image_size;
  const ClassPattern p = class_pattern(spec, label);
  Prng rng = Prng(spec.seed, fnv1a64("synthetic-samples"))
                 .split(static_cast<std::uint64_t>(label))
                 .split(static_cast<std::uint64_t>(index));
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double tilt = rng.uniform(-0.25, 0.25);
  const auto jitter = std::max<std::int64_t>(1, S / 10);
  const auto dy = rng.uniform_int(-jitter, jitter);
  const auto dx = rng.uniform_int(-jitter, jitter);
  const double brightness = rng.uniform(-30.0, 30.0);
  double cast[3];
  for (auto& c : cast) c = spec.color_cast > 0 ? rng.uniform(-spec.color_cast, spec.color_cast) : 0.0;

  const double cos_t = std::cos(p.orientation + tilt), sin_t = std::sin(p.orientation + tilt);
  const double k = 2.0 * std::numbers::pi * p.frequency / static_cast<double>(S);
  const auto top = std::clamp<std::int64_t>(p.rect_top + dy, 0, S - p.rect_h);
  const auto left = std::clamp<std::int64_t>(p.rect_left + dx, 0, S - p.rect_w);

  ImageRecord rec;
  rec.label = static_cast<std::uint16_t>(label);
  rec.pixels.resize(static_cast<std::size_t>(3 * S * S));
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < S; ++y)
      for (std::int64_t x = 0; x < S; ++x) {
        double v;
        if (y >= top && y < top + p.rect_h && x >= left && x < left + p.rect_w) {
          v = 128.0 + spec.cue_contrast * (p.color[c] - 128.0);
        } else {
          const double tint = 0.65 + spec.cue_contrast * (p.tint[c] - 0.65);
          v = 128.0 + 90.0 * tint * std::sin(k * (x * cos_t + y * sin_t) + phase);
        }
        v += brightness + cast[c];
        if (spec.noise_sigma > 0) v += spec.noise_sigma * rng.normal();
        rec.pixels[static_cast<std::size_t>((c * S + y) * S + x)] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
  return rec;
}

Dataset synth_generate(const SyntheticSpec& spec) {
  spec.validate();
  Dataset d;
  d.image_size = spec.image_size;
  d.class_count = spec.class_count;
  d.records.reserve(static_cast<std::size_t>(spec.class_count * spec.samples_per_class));
  for (std::int64_t c = 0; c < spec.class_count; ++c)
    for (std::int64_t i = 0; i < spec.samples_per_class; ++i) d.records.push_back(synth_sample(spec, c, spec.index_offset + i));
  return d;
}

CropRect sample_crop(std::int64_t height, std::int64_t width, const CropOptions& o, Prng& rng) {
  if (!(o.scale_min > 0 && o.scale_min <= o.scale_max && o.scale_max <= 1.0))
    throw ArgumentError("crop scale must satisfy 0 < min <= max <= 1");
  if (!(o.ratio_min > 0 && o.ratio_min <= o.ratio_max)) throw ArgumentError("crop ratio must satisfy 0 < min <= max");
  const double area = static_cast<double>(height * width);
  const double log_lo = std::log(o.ratio_min), log_hi = std::log(o.ratio_max);
  for (int attempt = 0; attempt < o.attempts; ++attempt) {
    const double target = area * rng.uniform(o.scale_min, o.scale_max);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const auto w = static_cast<std::int64_t>(std::llround(std::sqrt(target * aspect)));
    const auto h = static_cast<std::int64_t>(std::llround(std::sqrt(target / aspect)));
    if (w > 0 && h > 0 && w <= width && h <= height) {
      const auto top = rng.uniform_int(0, height - h);
      const auto left = rng.uniform_int(0, width - w);
      return {top, left, h, w};
    }
  }
  const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  std::int64_t w = width, h = height;
  if (in_ratio < o.ratio_min) {
    h = std::llround(static_cast<double>(w) / o.ratio_min);
  } else if (in_ratio > o.ratio_max) {
    w = std::llround(static_cast<double>(h) * o.ratio_max);
  }
  return {(height - h) / 2, (width - w) / 2, h, w};
}

std::vector<float> resize_bilinear(std::span<const std::uint8_t> image, std::int64_t height, std::int64_t width,
                                   const CropRect& crop, std::int64_t out_size) {
  if (out_size <= 0) throw ArgumentError("resize: out_size must be positive");
  if (static_cast<std::int64_t>(image.size()) != 3 * height * width) throw ShapeError("resize: image is not 3xHxW");
  if (crop.height <= 0 || crop.width <= 0 || crop.top < 0 || crop.left < 0 || crop.top + crop.height > height ||
      crop.left + crop.width > width)
    throw ArgumentError("resize: crop outside image");
  std::vector<float> out(static_cast<std::size_t>(3 * out_size * out_size));
  const double sy = static_cast<double>(crop.height) / static_cast<double>(out_size);
  const double sx = static_cast<double>(crop.width) / static_cast<double>(out_size);
  for (std::int64_t oy = 0; oy < out_size; ++oy) {
    const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(crop.height - 1));
    const auto y0 = static_cast<std::int64_t>(fy);
    const auto y1 = std::min(y0 + 1, crop.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::int64_t ox = 0; ox < out_size; ++ox) {
      const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(crop.width - 1));
      const auto x0 = static_cast<std::int64_t>(fx);
      const auto x1 = std::min(x0 + 1, crop.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::int64_t c = 0; c < 3; ++c) {
        auto px = [&](std::int64_t y, std::int64_t x) {
          return static_cast<double>(image[static_cast<std::size_t>((c * height + crop.top + y) * width + crop.left + x)]);
        };
        const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) + wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
        out[static_cast<std::size_t>((c * out_size + oy) * out_size + ox)] = static_cast<float>(v);
      }
    }
  }
  return out;
}

std::vector<float> rand_resize_crop(std::span<const std::uint8_t> image, std::int64_t image_size,
                                    const CropOptions& options, std::int64_t out_size, Prng& rng) {
  if (out_size <= 0) throw ArgumentError("rand_resize_crop: out_size must be positive");
  const CropRect crop = sample_crop(image_size, image_size, options, rng);
  return resize_bilinear(image, image_size, image_size, crop, out_size);
}

std::vector<float> normalize_pixels(std::span<const float> pixels) {
  std::vector<float> out(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = (pixels[i] / 255.0f - 0.5f) / 0.5f;
  return out;
}

std::vector<float> normalize_pixels(std::span<const std::uint8_t> pixels) {
  std::vector<float> f(pixels.begin(), pixels.end());
  return normalize_pixels(std::span<const float>(f));
}

std::vector<float> patchify_image(std::span<const float> image, std::int64_t S, std::int64_t p) {
  if (p <= 0 || S % p != 0) throw ShapeError("patchify: image size " + std::to_string(S) + " not divisible by patch " + std::to_string(p));
  if (static_cast<std::int64_t>(image.size()) != 3 * S * S) throw ShapeError("patchify: image is not 3xSxS");
  const auto g = S / p;
  std::vector<float> out(image.size());
  std::size_t o = 0;
  for (std::int64_t py = 0; py < g; ++py)
    for (std::int64_t px = 0; px < g; ++px)
      for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t dy = 0; dy < p; ++dy)
          for (std::int64_t dx = 0; dx < p; ++dx)
            out[o++] = image[static_cast<std::size_t>((c * S + py * p + dy) * S + px * p + dx)];
  return out;
}

std::vector<float> unpatchify_image(std::span<const float> patches, std::int64_t S, std::int64_t p) {
  if (p <= 0 || S % p != 0) throw ShapeError("unpatchify: image size " + std::to_string(S) + " not divisible by patch " + std::to_string(p));
  if (static_cast<std::int64_t>(patches.size()) != 3 * S * S) throw ShapeError("unpatchify: wrong patch matrix size");
  const auto g = S / p;
  std::vector<float> out(patches.size());
  std::size_t o = 0;
  for (std::int64_t py = 0; py < g; ++py)
    for (std::int64_t px = 0; px < g; ++px)
      for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t dy = 0; dy < p; ++dy)
          for (std::int64_t dx = 0; dx < p; ++dx)
            out[static_cast<std::size_t>((c * S + py * p + dy) * S + px * p + dx)] = patches[o++];
  return out;
}

std::vector<std::int64_t> epoch_permutation(std::int64_t count, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::int64_t> perm(static_cast<std::size_t>(count));
  std::iota(perm.begin(), perm.end(), 0);
  Prng rng = Prng(seed, fnv1a64("epoch-order")).split(static_cast<std::uint64_t>(epoch));
  for (std::int64_t i = count - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  return perm;
}

TensorF make_batch(const Dataset& data, std::span<const std::int64_t> indices, bool augment, const CropOptions& crop,
                   Prng& rng) {
  const auto S = data.image_size;
  const auto B = static_cast<std::int64_t>(indices.size());
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(B * 3 * S * S));
  for (std::int64_t b = 0; b < B; ++b) {
    const auto idx = indices[static_cast<std::size_t>(b)];
    if (idx < 0 || idx >= data.size()) throw ArgumentError("make_batch: index " + std::to_string(idx) + " outside dataset");
    const auto& px = data.records[static_cast<std::size_t>(idx)].pixels;
    std::vector<float> img;
    if (augment) {
      Prng r = rng.split(static_cast<std::uint64_t>(b));
      img = normalize_pixels(std::span<const float>(rand_resize_crop(px, S, crop, S, r)));
    } else {
      img = normalize_pixels(std::span<const std::uint8_t>(px));
    }
    out.insert(out.end(), img.begin(), img.end());
  }
  return TensorF::from_vector({B, 3, S, S}, std::move(out));
}

void save_evad(const std::string& path, const Dataset& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  const auto S = data.image_size;
  binio::write_magic(os, "EVAD");
  binio::write_le<std::uint32_t>(os, 1);
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(data.records.size()));
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(S));
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(data.class_count));
  for (const auto& r : data.records) {
    if (static_cast<std::int64_t>(r.pixels.size()) != 3 * S * S) throw FormatError("save_evad: record has wrong pixel count");
    binio::write_le<std::uint16_t>(os, r.label);
    os.write(reinterpret_cast<const char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
  }
  if (!os) throw FormatError("write failed for " + path);
}

Dataset load_evad(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  binio::expect_magic(is, "EVAD", path);
  binio::expect_version(is, 1, path);
  const auto count = binio::read_le<std::uint32_t>(is, "count");
  Dataset d;
  d.image_size = binio::read_le<std::uint32_t>(is, "image_size");
  d.class_count = binio::read_le<std::uint32_t>(is, "class_count");
  const auto n = static_cast<std::size_t>(3 * d.image_size * d.image_size);
  d.records.resize(count);
  for (auto& r : d.records) {
    r.label = binio::read_le<std::uint16_t>(is, "label");
    if (r.label >= d.class_count) throw FormatError(path + ": label " + std::to_string(r.label) + " >= class_count");
    r.pixels.resize(n);
    if (!is.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(n)))
      throw FormatError(path + ": truncated file while reading pixels");
  }
  return d;
}

}  // namespace mimforge
