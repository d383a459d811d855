#include <doctest.h>

#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "mimforge/data.hpp"
#include "mimforge/errors.hpp"
#include "mimforge/mim.hpp"
#include "test_util.hpp"

using namespace mimforge;
using mimforge::testing::hash_tensors;
using mimforge::testing::random_tensor;

namespace {

// Scalar reference: layernorm -> linear -> cosine, all in plain loops.
std::vector<double> head_ref(const std::vector<double>& x, const MimHead<double>& head) {
  const auto w = static_cast<std::size_t>(head.proj.weight.dim(0));
  const auto d = static_cast<std::size_t>(head.proj.weight.dim(1));
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= double(w);
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= double(w);
  std::vector<double> h(w), out(d);
  for (std::size_t i = 0; i < w; ++i)
    h[i] = (x[i] - mu) / std::sqrt(var + head.norm_eps) * head.norm.weight.data()[i] + head.norm.bias.data()[i];
  for (std::size_t j = 0; j < d; ++j) {
    out[j] = head.proj.bias.data()[j];
    for (std::size_t i = 0; i < w; ++i) out[j] += h[i] * head.proj.weight.data()[i * d + j];
  }
  return out;
}

double cos_ref(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / (std::max(std::sqrt(aa), 1e-8) * std::max(std::sqrt(bb), 1e-8));
}

std::vector<double> row(const TensorD& t, std::int64_t b, std::int64_t r) {
  const auto rows = t.dim(1), cols = t.dim(2);
  auto d = t.data();
  return {d.begin() + (b * rows + r) * cols, d.begin() + (b * rows + r + 1) * cols};
}

// Targets equal to c * head(student) at every patch.
TensorD aligned_targets(const TensorD& student, const MimHead<double>& head, double c) {
  const auto batch = student.dim(0), grid = student.dim(1) - 1, dim = head.proj.weight.dim(1);
  std::vector<double> t;
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t p = 0; p < grid; ++p)
      for (double v : head_ref(row(student, b, p + 1), head)) t.push_back(c * v);
  return TensorD::from_vector({batch, grid, dim}, t);
}

struct Instance {
  TensorD student, targets;
  MimHead<double> head;
  std::vector<MaskSet> masks;
};

Instance random_instance(std::uint64_t seed, std::int64_t batch = 2, std::int64_t side = 3, std::int64_t width = 6,
                         std::int64_t dim = 4) {
  Prng rng(seed);
  Instance in;
  in.student = random_tensor<double>({batch, side * side + 1, width}, rng);
  in.targets = random_tensor<double>({batch, side * side, dim}, rng, 1.0 + 10.0 * rng.uniform());
  in.head = MimHead<double>::init(width, dim, rng);
  // Non-trivial affine parameters so the oracle exercises them.
  for (auto& v : in.head.norm.weight.mutable_data()) v = 0.5 + rng.uniform();
  for (auto& v : in.head.norm.bias.mutable_data()) v = 0.1 * rng.normal();
  for (auto& v : in.head.proj.weight.mutable_data()) v = rng.normal();
  for (std::int64_t b = 0; b < batch; ++b) {
    MaskingOptions o;
    o.ratio = 0.2 + 0.6 * rng.uniform();
    o.min_block = 2;
    Prng mrng = rng.split(static_cast<std::uint64_t>(b));
    in.masks.push_back(generate_block_mask(side, side, o, mrng));
  }
  return in;
}

}  // namespace

TEST_CASE("targets parallel to the head output give loss -1") {
  auto in = random_instance(1);
  auto t = aligned_targets(in.student, in.head, 3.5);
  CHECK(mim_loss(in.student, in.head, t, in.masks).item() == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(distill_loss(in.student, in.head, t).item() == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("targets orthogonal to the head output give loss 0") {
  auto in = random_instance(2, 1, 2, 5, 2);
  auto p = aligned_targets(in.student, in.head, 1.0);
  std::vector<double> t;
  for (std::size_t i = 0; i < static_cast<std::size_t>(p.numel()); i += 2) {
    t.push_back(-p.data()[i + 1]);
    t.push_back(p.data()[i]);
  }
  auto orth = TensorD::from_vector(p.shape(), t);
  CHECK(std::abs(mim_loss(in.student, in.head, orth, in.masks).item()) < 1e-14);
}

TEST_CASE("three masked patches match the brute-force cosine mean") {
  // One image, 2x2 grid, width 4, teacher_dim 4; patches 0, 1 and 3 masked.
  const std::vector<double> s = {
      0.0,  0.0,  0.0,  0.0,    // cls
      1.0,  2.0,  -1.0, 0.5,    // patch 0
      -0.3, 0.8,  1.1,  -2.0,   // patch 1
      4.0,  4.0,  4.0,  3.0,    // patch 2 (unmasked)
      0.25, -1.5, 0.75, 2.0};   // patch 3
  const std::vector<double> t = {
      1.0,  0.0, 0.0,  0.0,
      0.5,  -1.0, 2.0, 0.3,
      9.0,  9.0, 9.0,  9.0,
      -0.2, 0.4, 0.4,  1.0};
  auto student = TensorD::from_vector({1, 5, 4}, s);
  auto targets = TensorD::from_vector({1, 4, 4}, t);
  MimHead<double> head;
  head.norm = {TensorD::from_vector({4}, {1.0, 0.5, 2.0, 1.5}), TensorD::from_vector({4}, {0.1, 0.0, -0.2, 0.3})};
  head.proj = {TensorD::from_vector({4, 4}, {1, 0, 2, 0, 0, 1, 0, -1, 0.5, 0.5, 1, 0, 0, 0, 0.3, 1}),
               TensorD::from_vector({4}, {0.0, 0.1, 0.0, -0.1})};
  std::vector<MaskSet> masks{MaskSet::from_indices(2, 2, {0, 1, 3})};

  double oracle = 0.0;
  for (std::int64_t p : {0, 1, 3}) oracle += cos_ref(head_ref(row(student, 0, p + 1), head), row(targets, 0, p));
  oracle = -oracle / 3.0;
  CHECK(mim_loss(student, head, targets, masks).item() == doctest::Approx(oracle).epsilon(1e-13));
}

TEST_CASE("distill loss equals mim loss under a full mask, and -cos for one patch") {
  auto in = random_instance(3);
  std::vector<MaskSet> full(2, MaskSet::all(3, 3));
  CHECK(distill_loss(in.student, in.head, in.targets).item() ==
        doctest::Approx(mim_loss(in.student, in.head, in.targets, full).item()).epsilon(1e-14));

  auto one = random_instance(4, 1, 1, 6, 4);
  const double c = cos_ref(head_ref(row(one.student, 0, 1), one.head), row(one.targets, 0, 0));
  CHECK(distill_loss(one.student, one.head, one.targets).item() == doctest::Approx(-c).epsilon(1e-13));
}

TEST_CASE("random 2x4 distill case matches the cosine oracle") {
  auto in = random_instance(5, 1, 1, 4, 4);
  Prng rng(55);
  auto student = random_tensor<double>({2, 2, 4}, rng);  // 2 images, 1 patch each
  auto targets = random_tensor<double>({2, 1, 4}, rng);
  double oracle = 0.0;
  for (std::int64_t b = 0; b < 2; ++b) oracle += cos_ref(head_ref(row(student, b, 1), in.head), row(targets, b, 0));
  CHECK(distill_loss(student, in.head, targets).item() == doctest::Approx(-oracle / 2).epsilon(1e-13));
}

TEST_CASE("loss stays in [-1, 1], is target-scale invariant and ignores unmasked targets") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto in = random_instance(100 + seed);
    const double l = mim_loss(in.student, in.head, in.targets, in.masks).item();
    CHECK(l >= -1.0);
    CHECK(l <= 1.0);

    auto scaled = TensorD::from_vector(in.targets.shape(), {in.targets.data().begin(), in.targets.data().end()});
    for (auto& v : scaled.mutable_data()) v *= 1e3;
    CHECK(std::abs(mim_loss(in.student, in.head, scaled, in.masks).item() - l) < 1e-6);

    auto perturbed = in.targets.clone();
    auto d = perturbed.mutable_data();
    const auto dim = in.targets.dim(2);
    for (std::int64_t b = 0; b < 2; ++b) {
      auto bits = mask_to_bitmap(in.masks[static_cast<std::size_t>(b)]);
      for (std::int64_t p = 0; p < 9; ++p)
        if (!bits[static_cast<std::size_t>(p)])
          for (std::int64_t k = 0; k < dim; ++k) d[(b * 9 + p) * dim + k] += 100.0 * (k + 1);
    }
    CHECK(mim_loss(in.student, in.head, perturbed, in.masks).item() == l);
  }
}

TEST_CASE("an all-zero target row contributes a zero cosine") {
  auto in = random_instance(6, 1, 2, 5, 3);
  auto t = TensorD::zeros(in.targets.shape());
  std::vector<MaskSet> masks{MaskSet::from_indices(2, 2, {1})};
  const double l = mim_loss(in.student, in.head, t, masks).item();
  CHECK(std::isfinite(l));
  CHECK(l == 0.0);
}

TEST_CASE("mim_loss argument errors") {
  auto in = random_instance(7);
  std::vector<MaskSet> empty{MaskSet::none(3, 3), in.masks[1]};
  CHECK_THROWS_AS(mim_loss(in.student, in.head, in.targets, empty), ArgumentError);
  std::vector<MaskSet> one{in.masks[0]};
  CHECK_THROWS_AS(mim_loss(in.student, in.head, in.targets, one), ArgumentError);
  auto bad = TensorD::zeros({2, 8, 4});
  CHECK_THROWS_AS(mim_loss(in.student, in.head, bad, in.masks), ShapeError);
  CHECK(parse_pretext_mode("distill-all") == PretextMode::distill_all);
  CHECK(to_string(PretextMode::regress_masked) == "regress-masked");
  CHECK_THROWS_AS(parse_pretext_mode("pixels"), ArgumentError);
}

TEST_CASE("full regress-masked loss passes finite differences on a depth-2 width-8 encoder") {
  const auto results = mim_loss_gradcheck(3);
  REQUIRE_FALSE(results.empty());
  bool saw_pixels = false, saw_mask_token = false;
  for (const auto& r : results) {
    INFO(r.tensor << ": " << r.report.message);
    CHECK(r.report.passed);
    CHECK(r.report.max_rel_error < 1e-4);
    saw_pixels = saw_pixels || r.tensor == "pixels";
    saw_mask_token = saw_mask_token || r.tensor == "mask_token";
  }
  CHECK(saw_pixels);
  CHECK(saw_mask_token);
}

namespace {

struct SmallRun {
  std::shared_ptr<const Dataset> data;
  std::shared_ptr<const TeacherProvider> teacher;
  PretrainOptions options;
};

SmallRun small_run(double lr, PretextMode mode = PretextMode::regress_masked) {
  SyntheticSpec spec;
  spec.class_count = 2;
  spec.samples_per_class = 8;
  spec.image_size = 16;
  SmallRun r;
  r.data = std::make_shared<Dataset>(synth_generate(spec));
  FrozenNetOptions t;
  t.width = 8;
  t.mlp_width = 16;
  r.teacher = std::make_shared<FrozenNetTeacher>(16, 4, t);
  r.options.encoder.image_size = 16;
  r.options.encoder.patch_size = 4;
  r.options.encoder.depth = 2;
  r.options.encoder.width = 16;
  r.options.encoder.mlp_width = 32;
  r.options.encoder.heads = 2;
  r.options.encoder.teacher_dim = 8;
  r.options.masking.min_block = 2;
  r.options.optim.peak_lr = lr;
  r.options.optim.min_lr = 0.0;
  r.options.optim.total_steps = 10;
  r.options.optim.warmup_steps = 0;
  r.options.batch_size = 4;
  r.options.mode = mode;
  r.options.seed = 5;
  return r;
}

}  // namespace

TEST_CASE("pretrain step at lr 0 leaves parameters bitwise unchanged") {
  auto r = small_run(0.0);
  Pretrainer p(r.options, r.data, r.teacher);
  const auto before = hash_tensors(p.named_parameters());
  for (int i = 0; i < 3; ++i) {
    auto rep = p.step();
    CHECK(rep.step == i);
    CHECK(std::isfinite(rep.loss));
    CHECK(rep.loss < 0.0 + 1.0);
  }
  CHECK(hash_tensors(p.named_parameters()) == before);
  CHECK(p.steps_done() == 3);
}

TEST_CASE("identical pretrainers produce identical step reports, in both modes") {
  for (auto mode : {PretextMode::regress_masked, PretextMode::distill_all}) {
    auto r = small_run(1e-3, mode);
    Pretrainer a(r.options, r.data, r.teacher), b(r.options, r.data, r.teacher);
    for (int i = 0; i < 4; ++i) {
      auto ra = a.step(), rb = b.step();
      CHECK(ra.loss == rb.loss);
      CHECK(ra.grad_norm == rb.grad_norm);
      CHECK(ra.lr == rb.lr);
    }
    CHECK(hash_tensors(a.named_parameters()) == hash_tensors(b.named_parameters()));
    if (mode == PretextMode::distill_all) CHECK(a.assemble_batch(0).masks.empty());
    else CHECK(a.assemble_batch(0).masks.size() == 4);
  }
}

TEST_CASE("assembled batches depend only on the step index") {
  auto r = small_run(1e-3);
  Pretrainer a(r.options, r.data, r.teacher);
  auto b7 = a.assemble_batch(7);
  a.step();
  a.step();
  auto again = a.assemble_batch(7);
  CHECK(b7.indices == again.indices);
  CHECK(b7.masks == again.masks);
  CHECK(std::equal(b7.images.data().begin(), b7.images.data().end(), again.images.data().begin()));
  CHECK(std::equal(b7.targets.data().begin(), b7.targets.data().end(), again.targets.data().begin()));
}

TEST_CASE("a non-finite loss aborts the step") {
  auto r = small_run(1e-3);
  Pretrainer p(r.options, r.data, r.teacher);
  p.encoder().pos_embed.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(p.step(), NumericAbort);
}
