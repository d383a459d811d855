#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mimforge/tensor.hpp"

namespace mimforge {

struct OptimConfig {
  double peak_lr = 1e-3;
  double min_lr = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.05;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
  double layer_decay = 1.0;

  void validate() const;
};

/// Linear warmup from 0 to peak over warmup_steps, then half-cosine from
/// peak to min_lr at total_steps. Steps past total clamp to min_lr.
double cosine_lr(std::int64_t step, const OptimConfig& config);

/// decay^(depth + 1 - layer_index): 1 for the head (depth+1), decay^(depth+1)
/// for the embeddings (0).
double layer_scale(std::int64_t layer_index, std::int64_t depth, double decay);

struct ParamPlacement {
  std::int64_t layer_index = 0;
  bool wd_exempt = false;
};

/// Layer index and decay exemption derived from a parameter name. Embedding
/// tensors sit at 0, "blocks.<i>." at i+1, everything else at depth+1.
/// Norm gains, biases and token/position tables are exempt from decay.
ParamPlacement place_parameter(const std::string& name, const Shape& shape, std::int64_t depth);

template <typename T>
struct ParamGroup {
  NamedTensors<T> tensors;
  std::int64_t layer_index = 0;
  bool wd_exempt = false;
  double lr_scale = 1.0;
};

/// Partitions parameters into (layer, exemption) groups with lr_scale from
/// layer_scale(). Every tensor lands in exactly one group.
template <typename T>
std::vector<ParamGroup<T>> build_param_groups(const NamedTensors<T>& params, std::int64_t depth,
                                              double layer_decay);

template <typename T>
struct Moments {
  std::vector<T> m;
  std::vector<T> v;
};

/// One AdamW update of a group at step t >= 1 with scheduled rate lr:
/// bias-corrected Adam step, then p -= lr * lr_scale * wd * p unless the
/// group is exempt. Tensors without a gradient buffer are skipped.
/// Throws NumericAbort naming the tensor on a non-finite gradient.
template <typename T>
void adamw_step(const ParamGroup<T>& group, std::vector<Moments<T>>& moments, std::int64_t t, double lr,
                const OptimConfig& config);

template <typename T>
class AdamW {
 public:
  AdamW(std::vector<ParamGroup<T>> groups, OptimConfig config);

  /// Advances the step counter and applies one update at rate lr.
  void step(double lr);
  void zero_grad();
  /// Global L2 norm of the current gradients.
  double grad_norm() const;

  std::int64_t steps_taken() const { return step_; }
  const OptimConfig& config() const { return config_; }
  const std::vector<ParamGroup<T>>& groups() const { return groups_; }

  /// "opt.m.<name>" and "opt.v.<name>" per parameter, in group order.
  NamedTensors<T> state_tensors() const;
  /// Inverse of state_tensors(); missing or misshapen entries throw FormatError.
  void load_state(const NamedTensors<T>& state, std::int64_t step);

 private:
  std::vector<ParamGroup<T>> groups_;
  std::vector<std::vector<Moments<T>>> moments_;
  OptimConfig config_;
  std::int64_t step_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace mimforge
