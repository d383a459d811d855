#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mimforge/data.hpp"
#include "mimforge/tensor.hpp"
#include "mimforge/vit.hpp"

namespace mimforge {

enum class FeatureKind { mean_patch, cls };

std::string to_string(FeatureKind kind);
/// Accepts "mean-patch" and "cls".
FeatureKind parse_feature_kind(const std::string& text);

/// [N, width] features of every record, unaugmented, encoder in eval mode
/// with recording disabled. Throws ArgumentError on an empty dataset.
TensorF extract_features(const EncoderState<float>& encoder, const Dataset& data,
                         FeatureKind kind = FeatureKind::mean_patch, std::int64_t chunk = 250);

struct ProbeOptions {
  std::int64_t epochs = 60;
  double lr = 1e-2;
  std::int64_t batch_size = 256;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  /// Standardise each feature column with the training mean and deviation.
  bool standardize = true;

  void validate() const;
};

/// Linear classifier over (optionally standardised) features.
struct LinearProbe {
  std::vector<double> mean;
  std::vector<double> inv_std;
  TensorD weight;  // [dim, classes]
  TensorD bias;    // [classes]

  std::int64_t dim() const { return weight.dim(0); }
  std::int64_t classes() const { return weight.dim(1); }
  TensorD logits(const TensorF& features) const;
  std::vector<std::int64_t> predict(const TensorF& features) const;
};

struct ProbeResult {
  /// Accuracy on the evaluation set when one was given, otherwise on the training set.
  double top1 = 0.0;
  double train_top1 = 0.0;
  std::vector<double> train_loss_curve;  // mean loss per epoch
  FeatureKind feature_kind = FeatureKind::mean_patch;
  LinearProbe probe;
};

/// Softmax cross-entropy linear probe trained with plain AdamW on shuffled
/// mini-batches. Deterministic given options.seed.
/// Throws ArgumentError on empty input or a label outside [0, class_count).
ProbeResult probe_train(const TensorF& features, std::span<const std::int64_t> labels, std::int64_t class_count,
                        const ProbeOptions& options);

/// Trains on (train_features, train_labels) and reports top1 on the eval set.
ProbeResult probe_evaluate(const TensorF& train_features, std::span<const std::int64_t> train_labels,
                           const TensorF& eval_features, std::span<const std::int64_t> eval_labels,
                           std::int64_t class_count, const ProbeOptions& options);

/// Fraction of positions where preds equals labels. Throws on empty or
/// length-mismatched input.
double top1(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels);

struct RobustnessReport {
  double original_acc = 0.0;
  std::vector<double> variant_accs;
  double avg = 0.0;
  double delta = 0.0;
};

/// avg is the mean of variant_accs taken verbatim; delta = original - avg.
/// Accuracies are percentages in [0, 100].
RobustnessReport robustness_gap(double original_acc, std::span<const double> variant_accs);

}  // namespace mimforge
