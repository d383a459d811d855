#include <doctest.h>

#include <cmath>
#include <vector>

#include "mimforge/errors.hpp"
#include "mimforge/ops.hpp"
#include "mimforge/optim.hpp"
#include "mimforge/vit.hpp"
#include "test_util.hpp"

using namespace mimforge;
using mimforge::testing::random_tensor;

namespace {

OptimConfig cfg(double wd, std::int64_t warmup = 0, std::int64_t total = 100) {
  OptimConfig c;
  c.peak_lr = 0.1;
  c.min_lr = 0.0;
  c.beta1 = 0.9;
  c.beta2 = 0.98;
  c.eps = 1e-8;
  c.weight_decay = wd;
  c.warmup_steps = warmup;
  c.total_steps = total;
  return c;
}

ParamGroup<double> single(const std::string& name, TensorD t, bool exempt = false) {
  ParamGroup<double> g;
  g.tensors.push_back({name, std::move(t)});
  g.wd_exempt = exempt;
  return g;
}

void set_grad(TensorD& t, double v) {
  for (auto& g : t.mutable_grad()) g = v;
}

}  // namespace

TEST_CASE("zero gradient and zero decay leave parameters unchanged") {
  Prng rng(1);
  auto p = random_tensor<double>({3, 4}, rng, 1.0, true);
  const std::vector<double> before(p.data().begin(), p.data().end());
  AdamW<double> opt({single("w", p)}, cfg(0.0));
  set_grad(p, 0.0);
  opt.step(0.1);
  CHECK(std::equal(before.begin(), before.end(), p.data().begin()));
}

TEST_CASE("decoupled decay with zero gradient scales by 1 - lr*wd") {
  Prng rng(2);
  auto p = random_tensor<double>({5}, rng, 1.0, true);
  auto w = random_tensor<double>({2, 3}, rng, 1.0, true);
  const std::vector<double> before(w.data().begin(), w.data().end());
  AdamW<double> opt({single("w", w)}, cfg(0.05));
  set_grad(w, 0.0);
  opt.step(0.1);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(w.data()[i] == doctest::Approx(0.995 * before[i]).epsilon(1e-15));
  (void)p;
}

TEST_CASE("first Adam step on p=1, g=1 lands on 0.9") {
  auto p = TensorD::scalar(1.0, true);
  AdamW<double> opt({single("p", p)}, cfg(0.0));
  set_grad(p, 1.0);
  opt.step(0.1);
  // m_hat = v_hat = 1 -> p' = 1 - 0.1 * 1 / (1 + 1e-8)
  CHECK(std::abs(p.item() - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15);
  CHECK(std::abs(p.item() - 0.9) < 1e-6);
}

TEST_CASE("hand-rolled two-step AdamW trajectory") {
  auto p = TensorD::scalar(0.5, true);
  auto c = cfg(0.05);
  AdamW<double> opt({single("p", p)}, c);
  double x = 0.5, m = 0, v = 0;
  const double grads[2] = {0.3, -1.2};
  for (int t = 1; t <= 2; ++t) {
    const double g = grads[t - 1];
    set_grad(p, g);
    opt.step(0.01);
    m = 0.9 * m + 0.1 * g;
    v = 0.98 * v + 0.02 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.98, t));
    x -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    x -= 0.01 * 0.05 * x;
    CHECK(p.item() == doctest::Approx(x).epsilon(1e-14));
  }
}

TEST_CASE("exempt groups never shrink under zero gradient") {
  Prng rng(3);
  auto bias = random_tensor<double>({4}, rng, 1.0, true);
  const std::vector<double> before(bias.data().begin(), bias.data().end());
  AdamW<double> opt({single("b", bias, true)}, cfg(0.05));
  for (int i = 0; i < 20; ++i) {
    set_grad(bias, 0.0);
    opt.step(0.1);
  }
  CHECK(std::equal(before.begin(), before.end(), bias.data().begin()));
}

TEST_CASE("non-finite gradient aborts naming the tensor") {
  auto p = TensorD::scalar(1.0, true);
  AdamW<double> opt({single("blocks.0.qkv.weight", p)}, cfg(0.0));
  set_grad(p, std::nan(""));
  try {
    opt.step(0.1);
    FAIL("expected NumericAbort");
  } catch (const NumericAbort& e) {
    CHECK(std::string(e.what()).find("blocks.0.qkv.weight") != std::string::npos);
  }
}

TEST_CASE("cosine schedule endpoints, midpoint and clamping") {
  OptimConfig c = cfg(0.0, 10, 110);
  c.peak_lr = 1e-3;
  c.min_lr = 1e-5;
  CHECK(cosine_lr(0, c) == 0.0);
  CHECK(cosine_lr(5, c) == doctest::Approx(0.5e-3).epsilon(1e-12));
  CHECK(cosine_lr(10, c) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(std::abs(cosine_lr(60, c) - (1e-3 + 1e-5) / 2) < 1e-12);
  CHECK(cosine_lr(110, c) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(cosine_lr(500, c) == doctest::Approx(1e-5).epsilon(1e-12));
  double prev = cosine_lr(10, c);
  for (std::int64_t s = 11; s <= 120; ++s) {
    const double lr = cosine_lr(s, c);
    CHECK(lr <= prev);
    prev = lr;
  }
  // Continuity at the warmup boundary.
  CHECK(std::abs(cosine_lr(9, c) - cosine_lr(10, c)) <= 1e-3 / 10 + 1e-15);
  CHECK(std::abs(cosine_lr(11, c) - cosine_lr(10, c)) < 1e-6);
}

TEST_CASE("layer-wise decay multipliers") {
  for (std::int64_t l = 0; l <= 5; ++l) CHECK(layer_scale(l, 4, 1.0) == 1.0);
  CHECK(layer_scale(5, 4, 0.85) == 1.0);
  CHECK(layer_scale(13, 12, 0.6) == 1.0);
  CHECK(layer_scale(0, 4, 0.85) == doctest::Approx(0.4437).epsilon(1e-4));
  CHECK(layer_scale(0, 4, 0.85) == doctest::Approx(std::pow(0.85, 5)).epsilon(1e-15));
  CHECK_THROWS_AS(layer_scale(6, 4, 0.85), ArgumentError);
}

TEST_CASE("parameter placement and groups cover every tensor once") {
  EncoderConfig c;
  c.depth = 2;
  Prng rng(4);
  auto enc = EncoderState<double>::init(c, rng);
  auto params = enc.named_parameters();
  auto groups = build_param_groups(params, c.depth, 0.85);
  std::size_t total = 0;
  for (const auto& g : groups) {
    total += g.tensors.size();
    CHECK(g.lr_scale == doctest::Approx(std::pow(0.85, c.depth + 1 - g.layer_index)));
    for (const auto& t : g.tensors) {
      const auto pl = place_parameter(t.name, t.tensor.shape(), c.depth);
      CHECK(pl.layer_index == g.layer_index);
      CHECK(pl.wd_exempt == g.wd_exempt);
    }
  }
  CHECK(total == params.size());

  CHECK(place_parameter("pos_embed", {65, 64}, 2).layer_index == 0);
  CHECK(place_parameter("pos_embed", {65, 64}, 2).wd_exempt);
  CHECK(place_parameter("mask_token", {64}, 2).wd_exempt);
  CHECK(place_parameter("patch_embed.weight", {48, 64}, 2).layer_index == 0);
  CHECK_FALSE(place_parameter("patch_embed.weight", {48, 64}, 2).wd_exempt);
  CHECK(place_parameter("blocks.1.mlp.fc1.weight", {64, 256}, 2).layer_index == 2);
  CHECK(place_parameter("blocks.1.norm1.bias", {64}, 2).wd_exempt);
  CHECK(place_parameter("norm.weight", {64}, 2).layer_index == 3);
  CHECK(place_parameter("head.proj.weight", {64, 32}, 2).layer_index == 3);
}

TEST_CASE("optimizer restored from saved state follows the same trajectory") {
  Prng rng(5);
  auto target = random_tensor<double>({4, 3}, rng);
  auto make_loss = [&](const TensorD& w) {
    auto d = ops::add(w, ops::scale(target, -1.0));
    return ops::sum(ops::mul(d, d));
  };
  auto w1 = random_tensor<double>({4, 3}, rng, 1.0, true);
  auto b1 = random_tensor<double>({3}, rng, 1.0, true);
  auto c = cfg(0.05, 5, 200);
  std::vector<ParamGroup<double>> g1{single("w", w1), single("b", b1, true)};
  AdamW<double> opt1(g1, c);
  auto run = [&](AdamW<double>& opt, TensorD& w, TensorD& b) {
    opt.zero_grad();
    auto loss = ops::add(make_loss(w), ops::sum(ops::mul(b, b)));
    loss.backward();
    opt.step(cosine_lr(opt.steps_taken(), c));
  };
  for (int i = 0; i < 30; ++i) run(opt1, w1, b1);

  auto w2 = w1.clone();
  auto b2 = b1.clone();
  w2.set_requires_grad(true);
  b2.set_requires_grad(true);
  AdamW<double> opt2({single("w", w2), single("b", b2, true)}, c);
  opt2.load_state(opt1.state_tensors(), opt1.steps_taken());
  CHECK(opt2.steps_taken() == 30);
  for (int i = 0; i < 100; ++i) {
    run(opt1, w1, b1);
    run(opt2, w2, b2);
  }
  CHECK(std::equal(w1.data().begin(), w1.data().end(), w2.data().begin()));
  CHECK(std::equal(b1.data().begin(), b1.data().end(), b2.data().begin()));

  auto state = opt1.state_tensors();
  CHECK(state.size() == 4);
  CHECK(state[0].name.rfind("opt.m.", 0) == 0);
  state.pop_back();
  CHECK_THROWS_AS(opt2.load_state(state, 1), FormatError);
}

TEST_CASE("invalid optimizer configs are rejected") {
  auto c = cfg(0.05);
  c.beta1 = 1.0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = cfg(0.05);
  c.min_lr = 1.0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = cfg(0.05, 200, 100);
  CHECK_THROWS_AS(c.validate(), ArgumentError);
}
