#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mimforge/masking.hpp"
#include "mimforge/prng.hpp"
#include "mimforge/tensor.hpp"

namespace mimforge {

struct EncoderConfig {
  std::int64_t image_size = 32;
  std::int64_t patch_size = 4;
  std::int64_t depth = 4;
  std::int64_t width = 64;
  std::int64_t mlp_width = 256;
  std::int64_t heads = 4;
  double drop_path_rate = 0.1;
  std::int64_t teacher_dim = 32;
  double norm_eps = 1e-6;

  std::int64_t grid_side() const { return image_size / patch_size; }
  std::int64_t grid() const { return grid_side() * grid_side(); }
  std::int64_t tokens() const { return grid() + 1; }
  std::int64_t patch_dim() const { return 3 * patch_size * patch_size; }

  /// Throws ArgumentError when extents do not divide or are out of range.
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

/// Giant configuration: patch 14, depth 40, width 1408, MLP 6144, 16 heads, 224 px.
EncoderConfig giant_config();

/// Exact number of encoder parameters (MIM head excluded).
std::int64_t count_parameters(const EncoderConfig& config);

/// Normal(0, std) draws truncated to two deviations.
template <typename T>
Tensor<T> trunc_normal(Shape shape, double std, Prng& rng);

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct NormParams {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct BlockParams {
  NormParams<T> norm1;
  LinearParams<T> qkv;
  LinearParams<T> proj;
  NormParams<T> norm2;
  LinearParams<T> fc1;
  LinearParams<T> fc2;
};

/// Pre-norm transformer block stack over [batch*seq, width] tokens. Shared
/// by the vision encoder and the text tower.
template <typename T>
struct TransformerStack {
  std::vector<BlockParams<T>> blocks;
  std::int64_t heads = 1;
  double norm_eps = 1e-6;

  static TransformerStack init(std::int64_t depth, std::int64_t width, std::int64_t mlp_width,
                               std::int64_t heads, double norm_eps, Prng& rng);
  void append_named(NamedTensors<T>& out, const std::string& prefix) const;
  void append_slots(std::vector<std::pair<std::string, Tensor<T>*>>& out, const std::string& prefix);

  /// `drop_rng` is only consulted when training with rate > 0.
  Tensor<T> forward(Tensor<T> x, std::int64_t batch, double drop_path_rate, Prng* drop_rng,
                    bool training) const;
};

template <typename T>
struct EncoderState {
  EncoderConfig config;
  LinearParams<T> patch_embed;
  Tensor<T> pos_embed;   // [grid+1, width], row 0 belongs to the cls token
  Tensor<T> cls_token;   // [width]
  Tensor<T> mask_token;  // [width]
  TransformerStack<T> stack;
  NormParams<T> norm;

  /// Truncated-normal(0.02) weights, zero biases, unit norm gains.
  static EncoderState init(const EncoderConfig& config, Prng& rng);

  /// Every parameter in a fixed order with stable dotted names.
  NamedTensors<T> named_parameters() const;
  /// Same order and names as named_parameters(), as mutable handle slots.
  std::vector<std::pair<std::string, Tensor<T>*>> parameter_slots();
  void set_requires_grad(bool flag) const;
};

struct ForwardOptions {
  bool training = false;
  Prng* drop_rng = nullptr;  // required when training with drop_path_rate > 0
};

/// images: [batch, 3, H, W]; masks: one MaskSet per image, or empty for no
/// masking. Masked patch tokens are replaced by mask_token before the
/// positional embedding is added. Returns [batch, grid+1, width] after the
/// final norm.
template <typename T>
Tensor<T> encoder_forward(const EncoderState<T>& state, const Tensor<T>& images,
                          std::span<const MaskSet> masks, const ForwardOptions& options = {});

/// residual + keep_b / (1 - rate) * block_output, with keep_b ~ Bernoulli(1 - rate)
/// drawn once per sample. In eval mode the block output is added unscaled.
/// Rows of sample b are rows [b*rows/batch, (b+1)*rows/batch).
template <typename T>
Tensor<T> stochastic_depth(const Tensor<T>& block_output, const Tensor<T>& residual, double rate,
                           std::int64_t batch, Prng* rng, bool training);

extern template struct TransformerStack<float>;
extern template struct TransformerStack<double>;
extern template struct EncoderState<float>;
extern template struct EncoderState<double>;

}  // namespace mimforge
