#include "mimforge/mim.hpp"

#include <cmath>
#include <sstream>

#include "mimforge/errors.hpp"
#include "mimforge/ops.hpp"

namespace mimforge {
namespace {

constexpr double kCosineEps = 1e-8;

template <typename T>
Tensor<T> head_cosine_loss(const Tensor<T>& student_out, const MimHead<T>& head, const Tensor<T>& targets,
                           std::span<const std::int64_t> student_rows, std::span<const std::int64_t> target_rows) {
  auto h = ops::gather_rows(student_out, student_rows);
  h = ops::layernorm(h, head.norm.weight, head.norm.bias, head.norm_eps);
  auto pred = ops::linear(h, head.proj.weight, head.proj.bias);
  auto tgt = ops::gather_rows(targets, target_rows);
  return ops::scale(ops::mean(ops::cosine_rows(pred, tgt, kCosineEps)), -1.0);
}

template <typename T>
void check_loss_shapes(const Tensor<T>& student_out, const MimHead<T>& head, const Tensor<T>& targets) {
  if (student_out.rank() != 3 || targets.rank() != 3)
    throw ShapeError("MIM loss: expected [B,grid+1,W] student and [B,grid,D] targets, got " +
                     shape_str(student_out.shape()) + " and " + shape_str(targets.shape()));
  if (student_out.dim(0) != targets.dim(0) || student_out.dim(1) != targets.dim(1) + 1)
    throw ShapeError("MIM loss: student " + shape_str(student_out.shape()) + " vs targets " + shape_str(targets.shape()));
  if (head.proj.weight.dim(0) != student_out.dim(2))
    throw ShapeError("MIM loss: head input " + shape_str(head.proj.weight.shape()) + " vs student " + shape_str(student_out.shape()));
  if (head.proj.weight.dim(1) != targets.dim(2))
    throw ShapeError("MIM loss: head output " + shape_str(head.proj.weight.shape()) + " vs targets " + shape_str(targets.shape()));
}

}  // namespace

std::string to_string(PretextMode mode) {
  return mode == PretextMode::regress_masked ? "regress-masked" : "distill-all";
}

PretextMode parse_pretext_mode(const std::string& text) {
  if (text == "regress-masked") return PretextMode::regress_masked;
  if (text == "distill-all") return PretextMode::distill_all;
  throw ArgumentError("unknown pretext mode '" + text + "' (expected regress-masked or distill-all)");
}

template <typename T>
MimHead<T> MimHead<T>::init(std::int64_t width, std::int64_t teacher_dim, Prng& rng) {
  MimHead h;
  h.norm = {Tensor<T>::full({width}, T(1)), Tensor<T>::zeros({width})};
  std::vector<T> w(static_cast<std::size_t>(width * teacher_dim));
  for (auto& v : w) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    v = static_cast<T>(0.02 * z);
  }
  h.proj = {Tensor<T>::from_vector({width, teacher_dim}, std::move(w)), Tensor<T>::zeros({teacher_dim})};
  return h;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> MimHead<T>::parameter_slots() {
  return {{"head.norm.weight", &norm.weight},
          {"head.norm.bias", &norm.bias},
          {"head.proj.weight", &proj.weight},
          {"head.proj.bias", &proj.bias}};
}

template <typename T>
NamedTensors<T> MimHead<T>::named_parameters() const {
  NamedTensors<T> out;
  for (auto& [name, slot] : const_cast<MimHead*>(this)->parameter_slots()) out.push_back({name, *slot});
  return out;
}

template <typename T>
Tensor<T> mim_loss(const Tensor<T>& student_out, const MimHead<T>& head, const Tensor<T>& targets,
                   std::span<const MaskSet> masks) {
  check_loss_shapes(student_out, head, targets);
  const auto batch = student_out.dim(0), tokens = student_out.dim(1), grid = targets.dim(1);
  if (static_cast<std::int64_t>(masks.size()) != batch)
    throw ArgumentError("mim_loss: " + std::to_string(masks.size()) + " masks for batch of " + std::to_string(batch));
  std::vector<std::int64_t> srows, trows;
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto& m = masks[static_cast<std::size_t>(b)];
    if (m.empty()) throw ArgumentError("mim_loss: image " + std::to_string(b) + " has an empty mask");
    for (auto idx : m.indices) {
      if (idx < 0 || idx >= grid) throw ArgumentError("mim_loss: mask index " + std::to_string(idx) + " outside grid");
      srows.push_back(b * tokens + 1 + idx);
      trows.push_back(b * grid + idx);
    }
  }
  return head_cosine_loss(student_out, head, targets, srows, trows);
}

template <typename T>
Tensor<T> distill_loss(const Tensor<T>& student_out, const MimHead<T>& head, const Tensor<T>& targets) {
  check_loss_shapes(student_out, head, targets);
  const auto batch = student_out.dim(0), tokens = student_out.dim(1), grid = targets.dim(1);
  std::vector<std::int64_t> srows, trows;
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t idx = 0; idx < grid; ++idx) {
      srows.push_back(b * tokens + 1 + idx);
      trows.push_back(b * grid + idx);
    }
  return head_cosine_loss(student_out, head, targets, srows, trows);
}

StepReport pretrain_step(EncoderState<float>& encoder, MimHead<float>& head, const PretrainBatch& batch,
                         PretextMode mode, AdamW<float>& optimizer, double lr, Prng& drop_rng, std::int64_t step) {
  optimizer.zero_grad();
  const bool masked = mode == PretextMode::regress_masked;
  const std::span<const MaskSet> masks = masked ? std::span<const MaskSet>(batch.masks) : std::span<const MaskSet>();
  auto out = encoder_forward(encoder, batch.images, masks, ForwardOptions{true, &drop_rng});
  auto loss = masked ? mim_loss(out, head, batch.targets, masks) : distill_loss(out, head, batch.targets);
  StepReport report;
  report.step = step;
  report.loss = loss.item();
  report.lr = lr;
  if (!std::isfinite(report.loss)) {
    std::ostringstream os;
    os << "non-finite loss at step " << step << ": " << report.loss;
    throw NumericAbort(os.str());
  }
  loss.backward();
  report.grad_norm = optimizer.grad_norm();
  if (!std::isfinite(report.grad_norm)) {
    std::ostringstream os;
    os << "non-finite gradient norm at step " << step << " (loss " << report.loss << ")";
    throw NumericAbort(os.str());
  }
  optimizer.step(lr);
  return report;
}

Pretrainer::Pretrainer(PretrainOptions options, std::shared_ptr<const Dataset> data,
                       std::shared_ptr<const TeacherProvider> teacher)
    : options_(std::move(options)), data_(std::move(data)), teacher_(std::move(teacher)) {
  options_.encoder.validate();
  options_.optim.validate();
  if (!data_ || !teacher_) throw ArgumentError("pretrainer needs a dataset and a teacher");
  if (data_->image_size != options_.encoder.image_size)
    throw ArgumentError("dataset image size " + std::to_string(data_->image_size) + " does not match encoder image size " +
                        std::to_string(options_.encoder.image_size));
  if (options_.batch_size <= 0 || options_.batch_size > data_->size())
    throw ArgumentError("batch size must lie in [1, dataset size]");
  teacher_->check_compatible(options_.encoder);
  if (teacher_->kind() == "file" && options_.augment)
    throw ArgumentError("file teachers hold features of unaugmented images; disable augmentation");

  Prng root(options_.seed, fnv1a64("pretrain-init"));
  Prng enc_rng = root.split("encoder");
  Prng head_rng = root.split("head");
  encoder_ = EncoderState<float>::init(options_.encoder, enc_rng);
  head_ = MimHead<float>::init(options_.encoder.width, options_.encoder.teacher_dim, head_rng);
  head_.norm_eps = options_.encoder.norm_eps;
  auto params = named_parameters();
  for (auto& p : params) p.tensor.set_requires_grad(true);
  optimizer_ = std::make_unique<AdamW<float>>(
      build_param_groups(params, options_.encoder.depth, options_.optim.layer_decay), options_.optim);
}

std::int64_t Pretrainer::steps_per_epoch() const { return data_->size() / options_.batch_size; }

PretrainBatch Pretrainer::assemble_batch(std::int64_t step) const {
  const auto spe = steps_per_epoch();
  const auto epoch = step / spe;
  const auto offset = (step % spe) * options_.batch_size;
  const auto perm = epoch_permutation(data_->size(), options_.seed, epoch);
  PretrainBatch batch;
  batch.indices.assign(perm.begin() + offset, perm.begin() + offset + options_.batch_size);
  Prng aug = Prng(options_.seed, fnv1a64("augment")).split(static_cast<std::uint64_t>(step));
  batch.images = make_batch(*data_, batch.indices, options_.augment, options_.crop, aug);
  if (options_.mode == PretextMode::regress_masked) {
    Prng mask_rng = Prng(options_.seed, fnv1a64("mask")).split(static_cast<std::uint64_t>(step));
    const auto side = options_.encoder.grid_side();
    for (std::size_t b = 0; b < batch.indices.size(); ++b) {
      Prng r = mask_rng.split(b);
      batch.masks.push_back(generate_block_mask(side, side, options_.masking, r));
    }
  }
  batch.targets = teacher_->features(batch.images, batch.indices).features;
  return batch;
}

StepReport Pretrainer::step() {
  const auto k = steps_done();
  const auto batch = assemble_batch(k);
  const double lr = cosine_lr(k, options_.optim);
  Prng drop = Prng(options_.seed, fnv1a64("drop-path")).split(static_cast<std::uint64_t>(k));
  return pretrain_step(encoder_, head_, batch, options_.mode, *optimizer_, lr, drop, k);
}

NamedTensors<float> Pretrainer::named_parameters() const {
  auto out = encoder_.named_parameters();
  for (auto& p : head_.named_parameters()) out.push_back(p);
  return out;
}

std::vector<MimGradcheckResult> mim_loss_gradcheck(std::uint64_t seed, double tol, double h) {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.depth = 2;
  cfg.width = 8;
  cfg.mlp_width = 16;
  cfg.heads = 2;
  cfg.drop_path_rate = 0.1;
  cfg.teacher_dim = 4;
  const std::int64_t batch = 2;

  Prng rng(seed, fnv1a64("mim-gradcheck"));
  auto encoder = EncoderState<double>::init(cfg, rng);
  auto head = MimHead<double>::init(cfg.width, cfg.teacher_dim, rng);
  // Re-draw every parameter at unit-ish scale so no path is numerically idle.
  auto redraw = [&](std::vector<std::pair<std::string, TensorD*>> slots) {
    for (auto& [name, t] : slots) {
      const bool gain = name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name.ends_with("norm.weight");
      for (auto& v : t->mutable_data()) v = (gain ? 1.0 : 0.0) + 0.5 * rng.normal();
    }
  };
  redraw(encoder.parameter_slots());
  redraw(head.parameter_slots());

  std::vector<double> px(static_cast<std::size_t>(batch * 3 * cfg.image_size * cfg.image_size));
  for (auto& v : px) v = rng.uniform(-1.0, 1.0);
  auto images = TensorD::from_vector({batch, 3, cfg.image_size, cfg.image_size}, px);
  std::vector<double> tv(static_cast<std::size_t>(batch * cfg.grid() * cfg.teacher_dim));
  for (auto& v : tv) v = rng.normal();
  auto targets = TensorD::from_vector({batch, cfg.grid(), cfg.teacher_dim}, tv);
  std::vector<MaskSet> masks;
  for (std::int64_t b = 0; b < batch; ++b) {
    Prng mr = rng.split(static_cast<std::uint64_t>(b));
    masks.push_back(generate_block_mask(cfg.grid_side(), cfg.grid_side(), {0.5, 1, 0.3}, mr));
  }

  auto loss_with = [&](const EncoderState<double>& enc, const MimHead<double>& hd, const TensorD& img) {
    Prng drop(seed, fnv1a64("mim-gradcheck-drop"));
    auto out = encoder_forward(enc, img, masks, ForwardOptions{true, &drop});
    return mim_loss(out, hd, targets, masks);
  };

  std::vector<MimGradcheckResult> results;
  const auto enc_slots = encoder.parameter_slots();
  for (std::size_t i = 0; i < enc_slots.size(); ++i) {
    auto f = [&, i](const TensorD& x) {
      auto enc = encoder;
      *enc.parameter_slots()[i].second = x;
      return loss_with(enc, head, images);
    };
    results.push_back({enc_slots[i].first, gradcheck(f, *enc_slots[i].second, h, tol)});
  }
  const auto head_slots = head.parameter_slots();
  for (std::size_t i = 0; i < head_slots.size(); ++i) {
    auto f = [&, i](const TensorD& x) {
      auto hd = head;
      *hd.parameter_slots()[i].second = x;
      return loss_with(encoder, hd, images);
    };
    results.push_back({head_slots[i].first, gradcheck(f, *head_slots[i].second, h, tol)});
  }
  results.push_back({"pixels", gradcheck([&](const TensorD& x) { return loss_with(encoder, head, x); }, images, h, tol)});
  return results;
}

template struct MimHead<float>;
template struct MimHead<double>;
template Tensor<float> mim_loss(const Tensor<float>&, const MimHead<float>&, const Tensor<float>&, std::span<const MaskSet>);
template Tensor<double> mim_loss(const Tensor<double>&, const MimHead<double>&, const Tensor<double>&, std::span<const MaskSet>);
template Tensor<float> distill_loss(const Tensor<float>&, const MimHead<float>&, const Tensor<float>&);
template Tensor<double> distill_loss(const Tensor<double>&, const MimHead<double>&, const Tensor<double>&);

}  // namespace mimforge
