#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mimforge/checkpoint.hpp"
#include "mimforge/clip.hpp"
#include "mimforge/config.hpp"
#include "mimforge/mim.hpp"
#include "mimforge/records.hpp"

namespace mimforge {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

const std::vector<std::string>& command_names();

struct CommandRequest {
  std::string command;
  std::string config_path;
  std::vector<std::string> overrides;  // key=value, applied in order
  std::optional<std::uint64_t> seed;
  std::string resume;                  // pretrain: checkpoint to continue from
  std::vector<std::string> positional;  // inspect-ckpt: checkpoint path
};

/// Runs one command and maps failures to exit codes: 2 for configuration
/// and argument errors, 3 for numeric aborts, 1 for I/O and format errors.
int run_command(const CommandRequest& request, std::ostream& out, std::ostream& err);

/// Config file, then overrides, then --seed; validated.
RunConfig resolve_config(const CommandRequest& request);
/// run_dir if set, else $MIMFORGE_RUN_DIR/<command>-seed<seed>, else runs/<command>-seed<seed>.
std::string resolve_run_dir(const RunConfig& config, const std::string& command);

struct Datasets {
  std::shared_ptr<const Dataset> train;
  std::shared_ptr<const Dataset> eval;
};
Datasets load_datasets(const RunConfig& config);
std::shared_ptr<const TeacherProvider> make_teacher(const RunConfig& config);

/// Model, head and optimizer state plus "opt.step".
Checkpoint pretrain_checkpoint(const RunConfig& config, Pretrainer& trainer);
void restore_pretrainer(Pretrainer& trainer, const Checkpoint& checkpoint);
/// Vision encoder stored in a MIM or CLIP checkpoint, built from the
/// checkpoint's own config.
EncoderState<float> encoder_from_checkpoint(const Checkpoint& checkpoint);
ClipState<float> clip_from_checkpoint(const Checkpoint& checkpoint);

struct PretrainOutcome {
  double final_loss = 0.0;
  std::int64_t steps = 0;
  std::string final_checkpoint;
};

/// Full pre-training run into run_dir (config snapshot, metrics, checkpoints).
PretrainOutcome run_pretrain(const RunConfig& config, const std::string& run_dir, const std::string& resume,
                             std::ostream& out);

/// Zero-shot top1 of `clip` on `data` with one template caption per class.
double zero_shot_top1(const ClipState<float>& clip, const Dataset& data);

}  // namespace mimforge
