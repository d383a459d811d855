#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mimforge/data.hpp"
#include "mimforge/gradcheck.hpp"
#include "mimforge/masking.hpp"
#include "mimforge/optim.hpp"
#include "mimforge/teacher.hpp"
#include "mimforge/vit.hpp"

namespace mimforge {

enum class PretextMode { regress_masked, distill_all };

std::string to_string(PretextMode mode);
/// Accepts "regress-masked" and "distill-all".
PretextMode parse_pretext_mode(const std::string& text);

/// Layer norm followed by a linear projection to the teacher width.
template <typename T>
struct MimHead {
  NormParams<T> norm;
  LinearParams<T> proj;
  double norm_eps = 1e-6;

  static MimHead init(std::int64_t width, std::int64_t teacher_dim, Prng& rng);
  /// Names are prefixed with "head.".
  NamedTensors<T> named_parameters() const;
  std::vector<std::pair<std::string, Tensor<T>*>> parameter_slots();
};

/// Negative mean cosine between head(student) and the teacher features over
/// every masked patch of every image: the denominator is the total mask size.
/// student_out is [B, grid+1, width] (cls at row 0), targets [B, grid, D].
/// Throws ArgumentError when any image has an empty mask.
template <typename T>
Tensor<T> mim_loss(const Tensor<T>& student_out, const MimHead<T>& head, const Tensor<T>& targets,
                   std::span<const MaskSet> masks);

/// Same cosine objective averaged over all patch positions, no masks.
template <typename T>
Tensor<T> distill_loss(const Tensor<T>& student_out, const MimHead<T>& head, const Tensor<T>& targets);

struct StepReport {
  std::int64_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

struct PretrainBatch {
  std::vector<std::int64_t> indices;
  TensorF images;              // [B, 3, S, S], normalised
  std::vector<MaskSet> masks;  // empty in distill-all mode
  TensorF targets;             // [B, grid, teacher_dim]
};

/// One forward/backward/update. In regress-masked mode the encoder sees the
/// batch masks; in distill-all mode it sees the uncorrupted images and every
/// patch is regressed. Throws NumericAbort on a non-finite loss.
StepReport pretrain_step(EncoderState<float>& encoder, MimHead<float>& head, const PretrainBatch& batch,
                         PretextMode mode, AdamW<float>& optimizer, double lr, Prng& drop_rng, std::int64_t step);

struct PretrainOptions {
  EncoderConfig encoder;
  MaskingOptions masking;
  OptimConfig optim;
  PretextMode mode = PretextMode::regress_masked;
  std::int64_t batch_size = 64;
  bool augment = true;
  CropOptions crop;
  std::uint64_t seed = 0;
};

/// Owns encoder, head and optimizer for one pre-training run. The batch,
/// masks and drop-path draws of step k depend only on (seed, k), so runs are
/// reproducible and resumable from any checkpointed step.
class Pretrainer {
 public:
  Pretrainer(PretrainOptions options, std::shared_ptr<const Dataset> data,
             std::shared_ptr<const TeacherProvider> teacher);

  PretrainBatch assemble_batch(std::int64_t step) const;
  /// Runs step steps_done() and returns its report.
  StepReport step();
  std::int64_t steps_done() const { return optimizer_->steps_taken(); }
  std::int64_t steps_per_epoch() const;

  EncoderState<float>& encoder() { return encoder_; }
  const EncoderState<float>& encoder() const { return encoder_; }
  MimHead<float>& head() { return head_; }
  AdamW<float>& optimizer() { return *optimizer_; }
  const PretrainOptions& options() const { return options_; }

  /// Encoder then head parameters.
  NamedTensors<float> named_parameters() const;

 private:
  PretrainOptions options_;
  std::shared_ptr<const Dataset> data_;
  std::shared_ptr<const TeacherProvider> teacher_;
  EncoderState<float> encoder_;
  MimHead<float> head_;
  std::unique_ptr<AdamW<float>> optimizer_;
};

struct MimGradcheckResult {
  std::string tensor;
  GradcheckReport report;
};

/// Finite-difference check of the full regress-masked loss (f64) with respect
/// to every encoder and head parameter tensor and the input pixels. Uses a
/// depth-2, width-8 encoder on 8x8 images with 4x4 patches, drop path on.
std::vector<MimGradcheckResult> mim_loss_gradcheck(std::uint64_t seed, double tol = 1e-4, double h = 1e-5);

}  // namespace mimforge
