#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "mimforge/errors.hpp"
#include "mimforge/ops.hpp"
#include "mimforge/vit.hpp"
#include "test_util.hpp"

using namespace mimforge;
using mimforge::testing::hash_values;
using mimforge::testing::random_tensor;

namespace {

// Tensor-by-tensor enumeration, independent of the library's own bookkeeping.
std::int64_t enumerate_params(std::int64_t image, std::int64_t patch, std::int64_t depth, std::int64_t width,
                              std::int64_t mlp) {
  const std::int64_t grid = (image / patch) * (image / patch);
  const std::int64_t pdim = 3 * patch * patch;
  std::int64_t n = 0;
  n += pdim * width + width;        // patch_embed
  n += (grid + 1) * width;          // pos_embed
  n += width + width;               // cls, mask
  for (std::int64_t i = 0; i < depth; ++i) {
    n += 2 * width;                 // norm1
    n += width * 3 * width + 3 * width;
    n += width * width + width;
    n += 2 * width;                 // norm2
    n += width * mlp + mlp;
    n += mlp * width + width;
  }
  n += 2 * width;  // final norm
  return n;
}

EncoderConfig toy() {
  EncoderConfig c;
  c.image_size = 32;
  c.patch_size = 4;
  c.depth = 4;
  c.width = 64;
  c.mlp_width = 256;
  c.heads = 4;
  return c;
}

EncoderConfig tiny() {
  EncoderConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.depth = 2;
  c.width = 8;
  c.mlp_width = 16;
  c.heads = 2;
  return c;
}

}  // namespace

TEST_CASE("toy parameter count matches a per-tensor enumeration") {
  const auto c = toy();
  CHECK(enumerate_params(32, 4, 4, 64, 256) == 207488);
  CHECK(count_parameters(c) == 207488);

  Prng rng(0);
  auto state = EncoderState<float>::init(c, rng);
  std::int64_t total = 0;
  for (const auto& [name, t] : state.named_parameters()) total += t.numel();
  CHECK(total == 207488);
}

TEST_CASE("depth 0 counts only embeddings, tokens and the final norm") {
  auto c = toy();
  c.depth = 0;
  CHECK(count_parameters(c) == 48 * 64 + 64 + 65 * 64 + 2 * 64 + 2 * 64);
}

TEST_CASE("giant configuration lands near one billion parameters") {
  const auto g = giant_config();
  CHECK(g.patch_size == 14);
  CHECK(g.depth == 40);
  CHECK(g.width == 1408);
  CHECK(g.mlp_width == 6144);
  CHECK(g.heads == 16);
  CHECK(g.image_size == 224);
  const double n = static_cast<double>(count_parameters(g));
  CHECK(n == static_cast<double>(enumerate_params(224, 14, 40, 1408, 6144)));
  CHECK(std::abs(n - 1.011e9) / 1.011e9 < 0.005);
}

TEST_CASE("config validation rejects non-dividing extents") {
  auto c = toy();
  c.patch_size = 5;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = toy();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
}

TEST_CASE("parameter names are stable and unique") {
  Prng rng(0);
  auto state = EncoderState<float>::init(tiny(), rng);
  const auto named = state.named_parameters();
  auto slots = state.parameter_slots();
  REQUIRE(named.size() == slots.size());
  std::set<std::string> seen;
  for (std::size_t i = 0; i < named.size(); ++i) {
    CHECK(named[i].name == slots[i].first);
    CHECK(seen.insert(named[i].name).second);
  }
  CHECK(seen.count("pos_embed") == 1);
  CHECK(seen.count("mask_token") == 1);
  CHECK(seen.count("blocks.1.mlp.fc2.weight") == 1);
}

TEST_CASE("empty mask in eval mode equals the unmasked forward bitwise") {
  Prng rng(1);
  auto state = EncoderState<float>::init(toy(), rng);
  auto images = random_tensor<float>({2, 3, 32, 32}, rng);
  auto plain = encoder_forward(state, images, {});
  std::vector<MaskSet> none{MaskSet::none(8, 8), MaskSet::none(8, 8)};
  auto masked = encoder_forward(state, images, none);
  CHECK(plain.shape() == Shape{2, 65, 64});
  CHECK(std::equal(plain.data().begin(), plain.data().end(), masked.data().begin()));
}

TEST_CASE("full mask makes the output independent of pixels") {
  Prng rng(2);
  auto state = EncoderState<float>::init(toy(), rng);
  auto a = random_tensor<float>({1, 3, 32, 32}, rng);
  auto b = random_tensor<float>({1, 3, 32, 32}, rng);
  std::vector<MaskSet> full{MaskSet::all(8, 8)};
  auto ya = encoder_forward(state, a, full);
  auto yb = encoder_forward(state, b, full);
  CHECK(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
  CHECK(ya.shape() == Shape{1, 65, 64});
}

TEST_CASE("pixels inside masked patches never reach the output") {
  Prng rng(3);
  auto state = EncoderState<float>::init(toy(), rng);
  auto a = random_tensor<float>({1, 3, 32, 32}, rng);
  auto mask = MaskSet::from_indices(8, 8, {0, 9, 27, 63});
  auto b = a.clone();
  auto px = b.mutable_data();
  for (std::int64_t idx : mask.indices) {
    const auto r = idx / 8, c = idx % 8;
    for (int ch = 0; ch < 3; ++ch)
      for (int dy = 0; dy < 4; ++dy)
        for (int dx = 0; dx < 4; ++dx) px[(ch * 32 + r * 4 + dy) * 32 + c * 4 + dx] += 5.0f;
  }
  std::vector<MaskSet> masks{mask};
  auto ya = encoder_forward(state, a, masks);
  auto yb = encoder_forward(state, b, masks);
  CHECK(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
  // Sanity: the same edit without the mask does change the output.
  auto za = encoder_forward(state, a, {});
  auto zb = encoder_forward(state, b, {});
  CHECK_FALSE(std::equal(za.data().begin(), za.data().end(), zb.data().begin()));
}

TEST_CASE("eval-mode forward is deterministic and matches the recorded hash") {
  Prng rng(7);
  auto state = EncoderState<float>::init(toy(), rng);
  Prng img_rng(8);
  auto images = random_tensor<float>({2, 3, 32, 32}, img_rng);
  auto y1 = encoder_forward(state, images, {});
  auto y2 = encoder_forward(state, images, {});
  CHECK(hash_values(y1.data()) == hash_values(y2.data()));
  // Recorded after the gradient suite passed; tied to this build's float
  // code generation (x86-64 with AVX-512, -march=native).
#if defined(__AVX512F__) && defined(NDEBUG) && !defined(__SANITIZE_ADDRESS__)
  CHECK(hash_values(y1.data()) == 1831869169472145171ULL);
#else
  MESSAGE("golden hash skipped for this build: " << hash_values(y1.data()));
#endif
}

TEST_CASE("stochastic depth: rate 0 and eval mode are the plain residual sum") {
  Prng rng(4);
  auto out = random_tensor<double>({6, 3}, rng);
  auto res = random_tensor<double>({6, 3}, rng);
  auto expect = ops::add(res, out);
  Prng drop(5);
  auto r0 = stochastic_depth(out, res, 0.0, 3, &drop, true);
  auto ev = stochastic_depth(out, res, 0.7, 3, nullptr, false);
  CHECK(std::equal(r0.data().begin(), r0.data().end(), expect.data().begin()));
  CHECK(std::equal(ev.data().begin(), ev.data().end(), expect.data().begin()));
}

TEST_CASE("stochastic depth drops whole samples at the configured rate") {
  const std::int64_t n = 10000;
  auto out = TensorD::full({n * 2, 1}, 1.0);
  auto res = TensorD::zeros({n * 2, 1});
  Prng drop(6);
  auto y = stochastic_depth(out, res, 0.5, n, &drop, true);
  std::int64_t dropped = 0;
  for (std::int64_t b = 0; b < n; ++b) {
    const double v0 = y.data()[2 * b], v1 = y.data()[2 * b + 1];
    CHECK(v0 == v1);  // one draw per sample
    if (v0 == 0.0) ++dropped;
    else CHECK(v0 == 2.0);
  }
  CHECK(std::abs(static_cast<double>(dropped) / n - 0.5) < 0.02);
}

TEST_CASE("training forward with drop path is reproducible from the stream") {
  Prng rng(9);
  auto state = EncoderState<float>::init(toy(), rng);
  auto images = random_tensor<float>({2, 3, 32, 32}, rng);
  Prng d1(10), d2(10);
  auto a = encoder_forward(state, images, {}, {true, &d1});
  auto b = encoder_forward(state, images, {}, {true, &d2});
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  CHECK_THROWS(encoder_forward(state, images, {}, {true, nullptr}));
}

TEST_CASE("loss on masked outputs sends gradient to mask_token but not to masked pixels") {
  Prng rng(11);
  auto state = EncoderState<double>::init(tiny(), rng);
  state.set_requires_grad(true);
  auto images = random_tensor<double>({1, 3, 8, 8}, rng, 1.0, true);
  auto mask = MaskSet::from_indices(2, 2, {1, 2});
  std::vector<MaskSet> masks{mask};
  auto y = encoder_forward(state, images, masks);
  auto flat = ops::reshape(y, {5, 8});
  std::vector<std::int64_t> rows{2, 3};  // tokens of patches 1 and 2 (cls at row 0)
  auto loss = mimforge::testing::project_to_scalar(ops::gather_rows(flat, rows));
  loss.backward();

  double mt = 0.0;
  for (double g : state.mask_token.grad()) mt += std::abs(g);
  CHECK(mt > 0.0);

  REQUIRE(images.has_grad());
  auto g = images.grad();
  double inside = 0.0, outside = 0.0;
  for (int ch = 0; ch < 3; ++ch)
    for (int yy = 0; yy < 8; ++yy)
      for (int xx = 0; xx < 8; ++xx) {
        const int patch = (yy / 4) * 2 + xx / 4;
        const double v = std::abs(g[(ch * 8 + yy) * 8 + xx]);
        (patch == 1 || patch == 2 ? inside : outside) += v;
      }
  CHECK(inside == 0.0);
  CHECK(outside > 0.0);
}
