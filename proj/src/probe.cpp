#include "mimforge/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mimforge/errors.hpp"
#include "mimforge/ops.hpp"
#include "mimforge/optim.hpp"

namespace mimforge {

std::string to_string(FeatureKind kind) { return kind == FeatureKind::cls ? "cls" : "mean-patch"; }

FeatureKind parse_feature_kind(const std::string& text) {
  if (text == "mean-patch") return FeatureKind::mean_patch;
  if (text == "cls") return FeatureKind::cls;
  throw ArgumentError("unknown feature kind '" + text + "' (expected mean-patch or cls)");
}

TensorF extract_features(const EncoderState<float>& encoder, const Dataset& data, FeatureKind kind,
                         std::int64_t chunk) {
  if (data.size() == 0) throw ArgumentError("extract_features: empty dataset");
  if (chunk <= 0) throw ArgumentError("extract_features: chunk must be positive");
  if (data.image_size != encoder.config.image_size)
    throw ArgumentError("extract_features: dataset image size " + std::to_string(data.image_size) +
                        " does not match encoder image size " + std::to_string(encoder.config.image_size));
  NoGradGuard no_grad;
  const auto n = data.size(), width = encoder.config.width, tokens = encoder.config.tokens();
  std::vector<float> out(static_cast<std::size_t>(n * width), 0.0f);
  Prng unused(0);
  for (std::int64_t begin = 0; begin < n; begin += chunk) {
    const auto end = std::min(n, begin + chunk);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(end - begin));
    std::iota(idx.begin(), idx.end(), begin);
    const auto images = make_batch(data, idx, false, CropOptions{}, unused);
    const auto hidden = encoder_forward(encoder, images, {}, ForwardOptions{false, nullptr});
    const auto& h = hidden.data();
    for (std::int64_t b = 0; b < end - begin; ++b) {
      float* dst = out.data() + (begin + b) * width;
      const float* tok = h.data() + b * tokens * width;
      if (kind == FeatureKind::cls) {
        std::copy(tok, tok + width, dst);
        continue;
      }
      std::vector<double> acc(static_cast<std::size_t>(width), 0.0);
      for (std::int64_t t = 1; t < tokens; ++t)
        for (std::int64_t c = 0; c < width; ++c) acc[c] += tok[t * width + c];
      for (std::int64_t c = 0; c < width; ++c) dst[c] = static_cast<float>(acc[c] / static_cast<double>(tokens - 1));
    }
  }
  return TensorF::from_vector({n, width}, std::move(out));
}

void ProbeOptions::validate() const {
  if (epochs <= 0) throw ArgumentError("probe epochs must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ArgumentError("probe lr must be positive");
  if (batch_size <= 0) throw ArgumentError("probe batch size must be positive");
  if (weight_decay < 0.0) throw ArgumentError("probe weight decay must be non-negative");
}

namespace {

TensorD standardized(const TensorF& features, const std::vector<double>& mean, const std::vector<double>& inv_std,
                     std::span<const std::int64_t> rows) {
  const auto dim = features.cols();
  const auto& f = features.data();
  std::vector<double> out(rows.size() * static_cast<std::size_t>(dim));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::int64_t c = 0; c < dim; ++c)
      out[r * dim + c] = (static_cast<double>(f[rows[r] * dim + c]) - mean[c]) * inv_std[c];
  return TensorD::from_vector({static_cast<std::int64_t>(rows.size()), dim}, std::move(out));
}

std::vector<std::int64_t> all_rows(std::int64_t n) {
  std::vector<std::int64_t> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

void check_features(const TensorF& features, std::span<const std::int64_t> labels, std::int64_t class_count,
                    const char* what) {
  if (!features.defined() || features.rank() != 2 || features.dim(0) == 0)
    throw ArgumentError(std::string(what) + ": empty feature matrix");
  if (static_cast<std::int64_t>(labels.size()) != features.dim(0))
    throw ArgumentError(std::string(what) + ": " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(features.dim(0)) + " feature rows");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= class_count)
      throw ArgumentError(std::string(what) + ": label " + std::to_string(labels[i]) + " at row " +
                          std::to_string(i) + " outside [0, " + std::to_string(class_count) + ")");
}

}  // namespace

TensorD LinearProbe::logits(const TensorF& features) const {
  if (features.rank() != 2 || features.cols() != dim())
    throw ShapeError("probe expects [N, " + std::to_string(dim()) + "] features, got " + shape_str(features.shape()));
  NoGradGuard no_grad;
  return ops::linear(standardized(features, mean, inv_std, all_rows(features.dim(0))), weight, bias);
}

std::vector<std::int64_t> LinearProbe::predict(const TensorF& features) const {
  const auto z = logits(features);
  const auto c = classes();
  std::vector<std::int64_t> out(static_cast<std::size_t>(z.dim(0)));
  for (std::int64_t i = 0; i < z.dim(0); ++i) {
    const double* row = z.data().data() + i * c;
    out[i] = std::max_element(row, row + c) - row;
  }
  return out;
}

ProbeResult probe_train(const TensorF& features, std::span<const std::int64_t> labels, std::int64_t class_count,
                        const ProbeOptions& options) {
  options.validate();
  if (class_count < 2) throw ArgumentError("probe_train: need at least two classes");
  check_features(features, labels, class_count, "probe_train");
  const auto n = features.dim(0), dim = features.cols();

  LinearProbe probe;
  probe.mean.assign(static_cast<std::size_t>(dim), 0.0);
  probe.inv_std.assign(static_cast<std::size_t>(dim), 1.0);
  if (options.standardize) {
    const auto& f = features.data();
    for (std::int64_t c = 0; c < dim; ++c) {
      double s = 0.0, s2 = 0.0;
      for (std::int64_t i = 0; i < n; ++i) s += f[i * dim + c];
      const double mu = s / static_cast<double>(n);
      for (std::int64_t i = 0; i < n; ++i) s2 += (f[i * dim + c] - mu) * (f[i * dim + c] - mu);
      const double sd = std::sqrt(s2 / static_cast<double>(n));
      probe.mean[c] = mu;
      probe.inv_std[c] = sd > 1e-12 ? 1.0 / sd : 1.0;
    }
  }
  probe.weight = TensorD::zeros({dim, class_count}, true);
  probe.bias = TensorD::zeros({class_count}, true);

  const auto steps_per_epoch = (n + options.batch_size - 1) / options.batch_size;
  OptimConfig oc;
  oc.peak_lr = options.lr;
  oc.min_lr = 0.0;
  oc.weight_decay = options.weight_decay;
  oc.beta2 = 0.999;
  oc.warmup_steps = 0;
  oc.total_steps = options.epochs * steps_per_epoch;
  NamedTensors<double> params{{"probe.weight", probe.weight}, {"probe.bias", probe.bias}};
  AdamW<double> opt(build_param_groups(params, 0, 1.0), oc);

  const auto x_all = standardized(features, probe.mean, probe.inv_std, all_rows(n));
  ProbeResult result;
  for (std::int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    const auto perm = epoch_permutation(n, options.seed, epoch);
    double loss_sum = 0.0;
    for (std::int64_t begin = 0; begin < n; begin += options.batch_size) {
      const auto end = std::min(n, begin + options.batch_size);
      std::span<const std::int64_t> rows(perm.data() + begin, static_cast<std::size_t>(end - begin));
      std::vector<std::int64_t> y(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) y[i] = labels[rows[i]];
      opt.zero_grad();
      auto loss = ops::cross_entropy(ops::linear(ops::gather_rows(x_all, rows), probe.weight, probe.bias),
                                     std::span<const std::int64_t>(y));
      loss_sum += loss.item() * static_cast<double>(rows.size());
      loss.backward();
      opt.step(cosine_lr(opt.steps_taken(), oc));
    }
    result.train_loss_curve.push_back(loss_sum / static_cast<double>(n));
  }
  result.probe = probe;
  result.train_top1 = top1(probe.predict(features), labels);
  result.top1 = result.train_top1;
  return result;
}

ProbeResult probe_evaluate(const TensorF& train_features, std::span<const std::int64_t> train_labels,
                           const TensorF& eval_features, std::span<const std::int64_t> eval_labels,
                           std::int64_t class_count, const ProbeOptions& options) {
  check_features(eval_features, eval_labels, class_count, "probe_evaluate");
  auto result = probe_train(train_features, train_labels, class_count, options);
  result.top1 = top1(result.probe.predict(eval_features), eval_labels);
  return result;
}

double top1(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels) {
  if (preds.empty()) throw ArgumentError("top1: empty input");
  if (preds.size() != labels.size())
    throw ArgumentError("top1: " + std::to_string(preds.size()) + " predictions for " +
                        std::to_string(labels.size()) + " labels");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

RobustnessReport robustness_gap(double original_acc, std::span<const double> variant_accs) {
  if (variant_accs.empty()) throw ArgumentError("robustness_gap: empty variant list");
  auto check = [](double v) {
    if (!(v >= 0.0 && v <= 100.0)) throw ArgumentError("robustness_gap: accuracy " + std::to_string(v) + " outside [0, 100]");
  };
  check(original_acc);
  for (double v : variant_accs) check(v);
  RobustnessReport r;
  r.original_acc = original_acc;
  r.variant_accs.assign(variant_accs.begin(), variant_accs.end());
  r.avg = std::accumulate(variant_accs.begin(), variant_accs.end(), 0.0) / static_cast<double>(variant_accs.size());
  r.delta = original_acc - r.avg;
  return r;
}

}  // namespace mimforge
