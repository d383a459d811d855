#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mimforge/checkpoint.hpp"
#include "mimforge/data.hpp"
#include "mimforge/optim.hpp"
#include "mimforge/vit.hpp"

namespace mimforge {

inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 100.0;

struct ClipConfig {
  EncoderConfig vision;
  std::int64_t embed_dim = 32;
  std::int64_t vocab = 64;
  std::int64_t context = 4;
  std::int64_t text_width = 64;
  std::int64_t text_depth = 2;
  std::int64_t text_heads = 4;
  std::int64_t text_mlp = 256;
  double init_temperature = 0.07;

  void validate() const;
};

/// Template caption of a class: three fixed prompt tokens and one class token.
std::vector<std::int64_t> class_caption(std::int64_t label, std::int64_t context = 4);
/// Largest class count whose class tokens fit the vocabulary.
std::int64_t max_caption_classes(std::int64_t vocab);

template <typename T>
struct ClipState {
  ClipConfig config;
  EncoderState<T> vision;
  Tensor<T> vision_proj;  // [width, embed]
  Tensor<T> token_embed;  // [vocab, text_width]
  Tensor<T> text_pos;     // [context, text_width]
  TransformerStack<T> text;
  NormParams<T> text_norm;
  Tensor<T> text_proj;  // [text_width, embed]
  Tensor<T> log_temp;   // [1]

  static ClipState init(const ClipConfig& config, Prng& rng);

  /// "vision.<encoder name>", "vision_proj.weight", "text.*", "text_proj.weight", "log_temp".
  NamedTensors<T> named_parameters() const;
  std::vector<std::pair<std::string, Tensor<T>*>> parameter_slots();

  double temperature() const;
  /// Clamps log_temp so the temperature stays inside [0.01, 100].
  void clamp_temperature();

  /// Mean-patch pooled, projected image embeddings [B, embed] (not normalised).
  Tensor<T> encode_images(const Tensor<T>& images, const ForwardOptions& options = {}) const;
  /// captions: B sequences of `context` token ids, flattened. [B, embed].
  Tensor<T> encode_text(std::span<const std::int64_t> tokens, std::int64_t batch, const ForwardOptions& options = {}) const;
};

struct ClipInitReport {
  std::vector<std::string> matched;  // copied from the checkpoint
  std::vector<std::string> fresh;    // newly initialised
  std::vector<std::string> ignored;  // checkpoint tensors outside the encoder
};

struct ClipInit {
  ClipState<float> state;
  ClipInitReport report;
};

/// Copies every encoder tensor of a MIM checkpoint into the vision tower and
/// initialises the projection and text tower from `rng`. Encoder tensors are
/// the checkpoint entries outside "head." and "opt."; any missing, extra or
/// misshapen one raises an error naming it and nothing is loaded.
ClipInit init_from_mim(const Checkpoint& checkpoint, const ClipConfig& config, Prng& rng);

/// Symmetric InfoNCE: rows of both inputs are L2-normalised, logits are
/// img . txt^T / temperature, and the loss averages the image-to-text and
/// text-to-image cross-entropies against the diagonal. Throws on batch < 2.
template <typename T>
Tensor<T> infonce(const Tensor<T>& image_emb, const Tensor<T>& text_emb, double temperature);
/// Same loss with a learnable temperature exp(log_temp), log_temp of shape [1].
template <typename T>
Tensor<T> infonce_log_temp(const Tensor<T>& image_emb, const Tensor<T>& text_emb, const Tensor<T>& log_temp);

/// argmax_c cos(image_emb[i], class_emb[c]); ties go to the lowest class id.
template <typename T>
std::vector<std::int64_t> zero_shot_from_embeddings(const Tensor<T>& image_emb, const Tensor<T>& class_emb);

/// Encodes one caption per class and labels each image by the nearest
/// class embedding. Throws ArgumentError on an empty class set.
std::vector<std::int64_t> zero_shot_classify(const ClipState<float>& clip, const TensorF& images,
                                             const std::vector<std::vector<std::int64_t>>& class_token_sets);

struct ClipTrainOptions {
  OptimConfig optim;
  std::int64_t batch_size = 64;
  bool augment = true;
  CropOptions crop;
  std::uint64_t seed = 0;
};

struct ClipStepReport {
  std::int64_t step = 0;
  double loss = 0.0;
  double temperature = 0.0;
  double lr = 0.0;
};

/// Contrastive training over (image, class caption) pairs. Step k's batch
/// and augmentation depend only on (seed, k).
class ClipTrainer {
 public:
  ClipTrainer(ClipState<float> state, ClipTrainOptions options, std::shared_ptr<const Dataset> data);

  ClipStepReport step();
  std::int64_t steps_done() const { return optimizer_->steps_taken(); }
  ClipState<float>& state() { return state_; }
  const ClipState<float>& state() const { return state_; }
  AdamW<float>& optimizer() { return *optimizer_; }

 private:
  ClipState<float> state_;
  ClipTrainOptions options_;
  std::shared_ptr<const Dataset> data_;
  std::unique_ptr<AdamW<float>> optimizer_;
};

extern template struct ClipState<float>;
extern template struct ClipState<double>;

}  // namespace mimforge
