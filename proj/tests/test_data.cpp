#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "mimforge/data.hpp"
#include "mimforge/errors.hpp"
#include "test_util.hpp"

using namespace mimforge;
using mimforge::testing::scratch_dir;

namespace {

SyntheticSpec spec8(std::int64_t per_class = 20) {
  SyntheticSpec s;
  s.samples_per_class = per_class;
  s.seed = 3;
  return s;
}

}  // namespace

TEST_CASE("synthetic samples are pure functions of (spec, label, index)") {
  auto s = spec8();
  s.noise_sigma = 0.0;
  CHECK(synth_sample(s, 3, 7) == synth_sample(s, 3, 7));
  s.noise_sigma = 24.0;
  CHECK(synth_sample(s, 3, 7) == synth_sample(s, 3, 7));
  CHECK_FALSE(synth_sample(s, 3, 7) == synth_sample(s, 3, 8));
  auto d1 = synth_generate(s), d2 = synth_generate(s);
  CHECK(d1 == d2);
  CHECK(d1.size() == 160);
  CHECK(d1.class_count == 8);
  CHECK(d1.records[0].pixels.size() == 3u * 32 * 32);
  for (std::int64_t i = 0; i < d1.size(); ++i) CHECK(d1.records[static_cast<std::size_t>(i)].label == i / 20);
}

TEST_CASE("held-out split reuses class patterns with fresh sample indices") {
  auto train = spec8(10);
  auto held = train;
  held.index_offset = 10;
  auto a = synth_generate(train), b = synth_generate(held);
  for (const auto& r : b.records) CHECK(std::find(a.records.begin(), a.records.end(), r) == a.records.end());
  CHECK(b.records[0] == synth_sample(train, 0, 10));
}

TEST_CASE("class mean images differ") {
  auto d = synth_generate(spec8(40));
  const std::size_t n = 3 * 32 * 32;
  std::vector<std::vector<double>> means(8, std::vector<double>(n, 0.0));
  for (const auto& r : d.records)
    for (std::size_t i = 0; i < n; ++i) means[r.label][i] += r.pixels[i] / 40.0;
  for (int a = 0; a < 8; ++a)
    for (int b = a + 1; b < 8; ++b) {
      double dist = 0.0;
      for (std::size_t i = 0; i < n; ++i) dist += std::abs(means[a][i] - means[b][i]);
      CHECK(dist / n > 2.0);
    }
}

TEST_CASE("spec validation") {
  auto s = spec8();
  s.class_count = 1;
  CHECK_THROWS_AS(s.validate(), ArgumentError);
  s = spec8();
  s.cue_contrast = 1.5;
  CHECK_THROWS_AS(s.validate(), ArgumentError);
  CHECK_THROWS_AS(synth_sample(spec8(), 8, 0), ArgumentError);
}

TEST_CASE("crops stay inside the image and respect the area range") {
  CropOptions o;
  Prng rng(1);
  for (int i = 0; i < 2000; ++i) {
    auto c = sample_crop(32, 32, o, rng);
    CHECK(c.top >= 0);
    CHECK(c.left >= 0);
    CHECK(c.top + c.height <= 32);
    CHECK(c.left + c.width <= 32);
    const double area = double(c.height * c.width) / (32.0 * 32.0);
    CHECK(area <= 1.0);
    CHECK(area >= 0.1);  // rounding slack below scale_min = 0.2
  }
}

TEST_CASE("full-scale square crop reduces to a plain resize") {
  auto s = spec8(1);
  auto img = synth_sample(s, 2, 0);
  CropOptions o;
  o.scale_min = o.scale_max = 1.0;
  o.ratio_min = o.ratio_max = 1.0;
  Prng rng(2);
  auto a = rand_resize_crop(img.pixels, 32, o, 16, rng);
  auto b = resize_bilinear(img.pixels, 32, 32, {0, 0, 32, 32}, 16);
  CHECK(a == b);
  // Same-size resize of the full frame is the identity.
  auto same = resize_bilinear(img.pixels, 32, 32, {0, 0, 32, 32}, 32);
  for (std::size_t i = 0; i < same.size(); ++i) CHECK(same[i] == doctest::Approx(img.pixels[i]).epsilon(1e-6));
}

TEST_CASE("augmentation is reproducible from the stream") {
  auto d = synth_generate(spec8(2));
  std::vector<std::int64_t> idx{0, 3, 5};
  CropOptions o;
  Prng r1(9), r2(9);
  auto a = make_batch(d, idx, true, o, r1);
  auto b = make_batch(d, idx, true, o, r2);
  CHECK(a.shape() == Shape{3, 3, 32, 32});
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  Prng r3(10);
  auto c = make_batch(d, idx, true, o, r3);
  CHECK_FALSE(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
  // Without augmentation the stream is irrelevant.
  auto e = make_batch(d, idx, false, o, r1);
  auto f = make_batch(d, idx, false, o, r3);
  CHECK(std::equal(e.data().begin(), e.data().end(), f.data().begin()));
  CHECK(e.data()[0] == doctest::Approx((d.records[0].pixels[0] / 255.0 - 0.5) / 0.5));
}

TEST_CASE("normalisation maps [0, 255] to [-1, 1]") {
  std::vector<std::uint8_t> px{0, 255, 51};
  auto n = normalize_pixels(px);
  CHECK(n[0] == -1.0f);
  CHECK(n[1] == 1.0f);
  CHECK(n[2] == doctest::Approx(-0.6));
}

TEST_CASE("patchify a 32x32 image with patch 4 gives 64 rows of 48 and inverts") {
  std::vector<float> img(3 * 32 * 32);
  std::iota(img.begin(), img.end(), 0.0f);
  auto p = patchify_image(img, 32, 4);
  CHECK(p.size() == 64u * 48u);
  // Patch 9 = row 1, col 1; first value is channel 0 pixel (4, 4).
  CHECK(p[9 * 48] == img[4 * 32 + 4]);
  // Channel 1 starts after 16 values inside a patch.
  CHECK(p[16] == img[32 * 32]);
  CHECK(unpatchify_image(p, 32, 4) == img);
  CHECK_THROWS_AS(patchify_image(img, 32, 5), ShapeError);
}

TEST_CASE("epoch permutations are pure functions of (count, seed, epoch)") {
  auto a = epoch_permutation(100, 4, 2), b = epoch_permutation(100, 4, 2);
  CHECK(a == b);
  CHECK_FALSE(a == epoch_permutation(100, 4, 3));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::int64_t i = 0; i < 100; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("EVAD round trip of 100 records is bitwise exact") {
  auto s = spec8();
  s.class_count = 5;
  auto d = synth_generate(s);
  REQUIRE(d.size() == 100);
  const auto dir = scratch_dir("evad");
  const auto path = (dir / "d.evad").string();
  save_evad(path, d);
  CHECK(load_evad(path) == d);

  // Header layout: magic, version, count, image_size, class_count.
  std::ifstream is(path, std::ios::binary);
  char head[20];
  is.read(head, 20);
  CHECK(std::string(head, 4) == "EVAD");
  CHECK(static_cast<unsigned char>(head[8]) == 100);
  CHECK(std::filesystem::file_size(path) == 20u + 100u * (2u + 3u * 32u * 32u));

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 1);
  CHECK_THROWS_AS(load_evad(path), FormatError);
  CHECK_THROWS_AS(load_evad((dir / "missing.evad").string()), FormatError);
}
