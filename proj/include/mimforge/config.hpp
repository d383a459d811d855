#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mimforge/clip.hpp"
#include "mimforge/data.hpp"
#include "mimforge/masking.hpp"
#include "mimforge/mim.hpp"
#include "mimforge/probe.hpp"
#include "mimforge/teacher.hpp"
#include "mimforge/vit.hpp"

namespace mimforge {

enum class ValueKind { integer, real, boolean, text, choice };

struct ConfigKey {
  std::string name;
  ValueKind kind;
  std::string default_value;
  double min = 0.0;  // numeric bounds, inclusive
  double max = 0.0;
  std::vector<std::string> choices;
  std::string help;
};

/// Every recognised key with its default and range.
const std::vector<ConfigKey>& config_schema();

/// Flat key=value run configuration. Every key of the schema is present;
/// values are validated on every assignment. Errors throw ConfigError.
class RunConfig {
 public:
  /// All defaults (the toy recipe).
  RunConfig();

  /// Parses "key = value" lines; '#' starts a comment.
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  /// "key=value".
  void apply_override(const std::string& assignment);

  std::int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  const std::string& get_string(const std::string& key) const;

  /// Cross-key checks (extents divide, ranges agree); throws ConfigError.
  void validate() const;
  /// Canonical snapshot: one "key=value" line per key in schema order.
  /// Without locations, run_dir and init_checkpoint are left out so that
  /// checkpoints do not depend on where a run was written.
  std::string to_text(bool include_locations = true) const;

  bool operator==(const RunConfig&) const = default;

 private:
  std::map<std::string, std::string> values_;
};

EncoderConfig encoder_config(const RunConfig& config);
MaskingOptions masking_options(const RunConfig& config);
OptimConfig pretrain_optim(const RunConfig& config);
PretrainOptions pretrain_options(const RunConfig& config);
SyntheticSpec synthetic_spec(const RunConfig& config);
/// Held-out split: eval_samples_per_class records per class past the training indices.
SyntheticSpec heldout_spec(const RunConfig& config);
FrozenNetOptions frozen_teacher_options(const RunConfig& config);
ProbeOptions probe_options(const RunConfig& config);
ClipConfig clip_config(const RunConfig& config);
ClipTrainOptions clip_train_options(const RunConfig& config);

}  // namespace mimforge
