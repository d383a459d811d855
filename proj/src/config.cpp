#include "mimforge/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mimforge/errors.hpp"

namespace mimforge {

namespace {

ConfigKey int_key(std::string name, std::int64_t def, double lo, double hi, std::string help) {
  return {std::move(name), ValueKind::integer, std::to_string(def), lo, hi, {}, std::move(help)};
}
ConfigKey real_key(std::string name, std::string def, double lo, double hi, std::string help) {
  return {std::move(name), ValueKind::real, std::move(def), lo, hi, {}, std::move(help)};
}
ConfigKey bool_key(std::string name, bool def, std::string help) {
  return {std::move(name), ValueKind::boolean, def ? "true" : "false", 0, 0, {}, std::move(help)};
}
ConfigKey text_key(std::string name, std::string help) {
  return {std::move(name), ValueKind::text, "", 0, 0, {}, std::move(help)};
}
ConfigKey choice_key(std::string name, std::vector<std::string> choices, std::string help) {
  auto def = choices.front();
  return {std::move(name), ValueKind::choice, std::move(def), 0, 0, std::move(choices), std::move(help)};
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

const ConfigKey& lookup(const std::string& key) {
  for (const auto& k : config_schema())
    if (k.name == key) return k;
  throw ConfigError("unknown config key '" + key + "'");
}

bool parse_int(const std::string& v, std::int64_t& out) {
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  return res.ec == std::errc() && res.ptr == v.data() + v.size();
}

bool parse_real(const std::string& v, double& out) {
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  return res.ec == std::errc() && res.ptr == v.data() + v.size() && std::isfinite(out);
}

std::string range_str(const ConfigKey& k) {
  std::ostringstream os;
  os << "[" << k.min << ", " << k.max << "]";
  return os.str();
}

template <typename F>
auto as_config_error(F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::int64_t warmup_from(double frac, std::int64_t steps) {
  return static_cast<std::int64_t>(std::llround(frac * static_cast<double>(steps)));
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = {
      int_key("seed", 0, 0, 9007199254740992.0, "run seed (initialisation, batches, masks, drop path)"),
      choice_key("mode", {"regress-masked", "distill-all"}, "pretext objective"),
      text_key("run_dir", "output directory; defaults to $MIMFORGE_RUN_DIR/<command>-seed<seed>"),
      text_key("init_checkpoint", "input checkpoint for probe, clip-train and zeroshot"),
      int_key("image_size", 32, 4, 1024, "image side in pixels"),
      int_key("patch_size", 4, 1, 256, "patch side in pixels"),
      int_key("depth", 4, 1, 64, "encoder blocks"),
      int_key("width", 64, 1, 8192, "encoder width"),
      int_key("mlp_width", 256, 1, 32768, "encoder MLP hidden width"),
      int_key("heads", 4, 1, 128, "attention heads"),
      real_key("drop_path", "0.1", 0.0, 0.95, "stochastic depth rate"),
      real_key("norm_eps", "1e-06", 1e-12, 1e-2, "layer norm epsilon"),
      choice_key("teacher", {"frozen-net", "file"}, "target feature source"),
      text_key("teacher_path", "EVAT feature file for teacher=file"),
      int_key("teacher_dim", 32, 1, 8192, "teacher feature width"),
      int_key("teacher_depth", 2, 1, 64, "frozen-net teacher blocks"),
      int_key("teacher_heads", 2, 1, 128, "frozen-net teacher heads"),
      int_key("teacher_mlp", 128, 1, 32768, "frozen-net teacher MLP width"),
      int_key("teacher_seed", 1234, 0, 9007199254740992.0, "frozen-net teacher seed"),
      real_key("mask_ratio", "0.4", 0.0, 1.0, "fraction of patches masked"),
      int_key("mask_min_block", 16, 1, 1 << 20, "minimum mask block area in patches"),
      real_key("mask_aspect", "0.3", 1e-3, 1.0, "lower aspect bound of mask blocks"),
      int_key("steps", 3000, 1, 1e9, "pre-training steps"),
      int_key("batch_size", 64, 1, 65536, "pre-training batch"),
      real_key("lr", "0.001", 0.0, 10.0, "peak learning rate"),
      real_key("min_lr", "1e-06", 0.0, 10.0, "final learning rate (capped at lr)"),
      real_key("beta1", "0.9", 0.0, 0.999999, "Adam beta1"),
      real_key("beta2", "0.98", 0.0, 0.999999, "Adam beta2"),
      real_key("adam_eps", "1e-08", 1e-12, 1.0, "Adam epsilon"),
      real_key("weight_decay", "0.05", 0.0, 10.0, "decoupled weight decay"),
      real_key("warmup_frac", "0.05", 0.0, 1.0, "warmup length as a fraction of steps"),
      real_key("layer_decay", "1", 1e-6, 1.0, "layer-wise lr decay"),
      bool_key("augment", true, "random resized crop during training"),
      real_key("crop_scale_min", "0.2", 1e-3, 1.0, "crop area fraction lower bound"),
      real_key("crop_scale_max", "1", 1e-3, 1.0, "crop area fraction upper bound"),
      text_key("data_path", "EVAD training set; synthetic when empty"),
      text_key("eval_data_path", "EVAD evaluation set; synthetic held-out split when empty"),
      int_key("classes", 8, 2, 65535, "synthetic class count"),
      int_key("samples_per_class", 500, 1, 1e6, "synthetic training images per class"),
      int_key("eval_samples_per_class", 100, 1, 1e6, "synthetic held-out images per class"),
      int_key("data_seed", 0, 0, 9007199254740992.0, "synthetic pattern seed"),
      real_key("noise_sigma", "24", 0.0, 255.0, "synthetic pixel noise"),
      real_key("color_cast", "60", 0.0, 255.0, "synthetic per-image colour offset range"),
      real_key("cue_contrast", "0.3", 0.0, 1.0, "synthetic class colour contrast"),
      int_key("checkpoint_every", 1000, 0, 1e9, "checkpoint interval in steps (0: final only)"),
      int_key("log_every", 1, 1, 1e9, "metric record interval in steps"),
      choice_key("feature", {"mean-patch", "cls"}, "probe feature"),
      int_key("probe_epochs", 60, 1, 1e6, "probe epochs"),
      real_key("probe_lr", "0.01", 1e-9, 10.0, "probe learning rate"),
      int_key("probe_batch", 256, 1, 1 << 20, "probe batch"),
      real_key("probe_weight_decay", "0.0001", 0.0, 10.0, "probe weight decay"),
      int_key("clip_steps", 2000, 1, 1e9, "contrastive training steps"),
      int_key("clip_batch", 64, 2, 65536, "contrastive batch"),
      real_key("clip_lr", "0.0005", 0.0, 10.0, "contrastive peak learning rate"),
      real_key("clip_weight_decay", "0.05", 0.0, 10.0, "contrastive weight decay"),
      int_key("embed_dim", 32, 1, 8192, "joint embedding width"),
      int_key("text_width", 64, 1, 8192, "text tower width"),
      int_key("text_depth", 2, 1, 64, "text tower blocks"),
      int_key("text_heads", 4, 1, 128, "text tower heads"),
      int_key("text_mlp", 256, 1, 32768, "text tower MLP width"),
      real_key("init_temperature", "0.07", 0.01, 100.0, "initial contrastive temperature"),
      real_key("gradcheck_tol", "0.0001", 1e-12, 1.0, "gradcheck relative error bound"),
      real_key("gradcheck_step", "1e-05", 1e-12, 1.0, "gradcheck finite-difference step"),
  };
  return schema;
}

RunConfig::RunConfig() {
  for (const auto& k : config_schema()) values_[k.name] = k.default_value;
}

void RunConfig::set(const std::string& key_in, const std::string& value_in) {
  const auto key = trim(key_in), value = trim(value_in);
  const auto& k = lookup(key);
  auto bad = [&](const std::string& why) { throw ConfigError("config key '" + key + "': " + why + " (got '" + value + "')"); };
  switch (k.kind) {
    case ValueKind::integer: {
      std::int64_t v = 0;
      if (!parse_int(value, v)) bad("expected an integer");
      if (static_cast<double>(v) < k.min || static_cast<double>(v) > k.max) bad("out of range " + range_str(k));
      break;
    }
    case ValueKind::real: {
      double v = 0;
      if (!parse_real(value, v)) bad("expected a finite number");
      if (v < k.min || v > k.max) bad("out of range " + range_str(k));
      break;
    }
    case ValueKind::boolean:
      if (value != "true" && value != "false" && value != "1" && value != "0") bad("expected true or false");
      values_[key] = (value == "true" || value == "1") ? "true" : "false";
      return;
    case ValueKind::choice:
      if (std::find(k.choices.begin(), k.choices.end(), value) == k.choices.end()) {
        std::string list;
        for (const auto& c : k.choices) list += (list.empty() ? "" : ", ") + c;
        bad("expected one of " + list);
      }
      break;
    case ValueKind::text:
      break;
  }
  values_[key] = value;
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    c.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  if (lookup(key).kind != ValueKind::integer) throw ConfigError("config key '" + key + "' is not an integer");
  std::int64_t v = 0;
  parse_int(values_.at(key), v);
  return v;
}

double RunConfig::get_double(const std::string& key) const {
  const auto kind = lookup(key).kind;
  if (kind == ValueKind::integer) return static_cast<double>(get_int(key));
  if (kind != ValueKind::real) throw ConfigError("config key '" + key + "' is not numeric");
  double v = 0;
  parse_real(values_.at(key), v);
  return v;
}

bool RunConfig::get_bool(const std::string& key) const {
  if (lookup(key).kind != ValueKind::boolean) throw ConfigError("config key '" + key + "' is not a boolean");
  return values_.at(key) == "true";
}

const std::string& RunConfig::get_string(const std::string& key) const {
  lookup(key);
  return values_.at(key);
}

std::string RunConfig::to_text(bool include_locations) const {
  std::string out;
  for (const auto& k : config_schema()) {
    if (!include_locations && (k.name == "run_dir" || k.name == "init_checkpoint")) continue;
    out += k.name + "=" + values_.at(k.name) + "\n";
  }
  return out;
}

void RunConfig::validate() const {
  as_config_error([&] {
    encoder_config(*this).validate();
    if (get_double("crop_scale_min") > get_double("crop_scale_max"))
      throw ConfigError("crop_scale_min exceeds crop_scale_max");
    if (get_string("mode") == "regress-masked" && get_double("mask_ratio") <= 0.0)
      throw ConfigError("mask_ratio must be positive in regress-masked mode");
    if (get_string("teacher") == "frozen-net" && get_int("teacher_dim") % get_int("teacher_heads") != 0)
      throw ConfigError("teacher_dim must be divisible by teacher_heads");
    if (get_string("teacher") == "file" && get_string("teacher_path").empty())
      throw ConfigError("teacher=file needs teacher_path");
    if (get_string("teacher") == "file" && get_bool("augment"))
      throw ConfigError("teacher=file stores features of unaugmented images; set augment=false");
    synthetic_spec(*this).validate();
    clip_config(*this).validate();
    return 0;
  });
}

EncoderConfig encoder_config(const RunConfig& c) {
  EncoderConfig e;
  e.image_size = c.get_int("image_size");
  e.patch_size = c.get_int("patch_size");
  e.depth = c.get_int("depth");
  e.width = c.get_int("width");
  e.mlp_width = c.get_int("mlp_width");
  e.heads = c.get_int("heads");
  e.drop_path_rate = c.get_double("drop_path");
  e.teacher_dim = c.get_int("teacher_dim");
  e.norm_eps = c.get_double("norm_eps");
  return e;
}

MaskingOptions masking_options(const RunConfig& c) {
  return {c.get_double("mask_ratio"), c.get_int("mask_min_block"), c.get_double("mask_aspect")};
}

OptimConfig pretrain_optim(const RunConfig& c) {
  OptimConfig o;
  o.peak_lr = c.get_double("lr");
  o.min_lr = std::min(c.get_double("min_lr"), o.peak_lr);
  o.beta1 = c.get_double("beta1");
  o.beta2 = c.get_double("beta2");
  o.eps = c.get_double("adam_eps");
  o.weight_decay = c.get_double("weight_decay");
  o.total_steps = c.get_int("steps");
  o.warmup_steps = warmup_from(c.get_double("warmup_frac"), o.total_steps);
  o.layer_decay = c.get_double("layer_decay");
  return o;
}

PretrainOptions pretrain_options(const RunConfig& c) {
  PretrainOptions p;
  p.encoder = encoder_config(c);
  p.masking = masking_options(c);
  p.optim = pretrain_optim(c);
  p.mode = parse_pretext_mode(c.get_string("mode"));
  p.batch_size = c.get_int("batch_size");
  p.augment = c.get_bool("augment");
  p.crop.scale_min = c.get_double("crop_scale_min");
  p.crop.scale_max = c.get_double("crop_scale_max");
  p.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  return p;
}

SyntheticSpec synthetic_spec(const RunConfig& c) {
  SyntheticSpec s;
  s.class_count = c.get_int("classes");
  s.image_size = c.get_int("image_size");
  s.samples_per_class = c.get_int("samples_per_class");
  s.seed = static_cast<std::uint64_t>(c.get_int("data_seed"));
  s.noise_sigma = c.get_double("noise_sigma");
  s.color_cast = c.get_double("color_cast");
  s.cue_contrast = c.get_double("cue_contrast");
  return s;
}

SyntheticSpec heldout_spec(const RunConfig& c) {
  auto s = synthetic_spec(c);
  s.index_offset = s.samples_per_class;
  s.samples_per_class = c.get_int("eval_samples_per_class");
  return s;
}

FrozenNetOptions frozen_teacher_options(const RunConfig& c) {
  FrozenNetOptions f;
  f.depth = c.get_int("teacher_depth");
  f.width = c.get_int("teacher_dim");
  f.heads = c.get_int("teacher_heads");
  f.mlp_width = c.get_int("teacher_mlp");
  f.seed = static_cast<std::uint64_t>(c.get_int("teacher_seed"));
  return f;
}

ProbeOptions probe_options(const RunConfig& c) {
  ProbeOptions p;
  p.epochs = c.get_int("probe_epochs");
  p.lr = c.get_double("probe_lr");
  p.batch_size = c.get_int("probe_batch");
  p.weight_decay = c.get_double("probe_weight_decay");
  p.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  return p;
}

ClipConfig clip_config(const RunConfig& c) {
  ClipConfig k;
  k.vision = encoder_config(c);
  k.embed_dim = c.get_int("embed_dim");
  k.text_width = c.get_int("text_width");
  k.text_depth = c.get_int("text_depth");
  k.text_heads = c.get_int("text_heads");
  k.text_mlp = c.get_int("text_mlp");
  k.init_temperature = c.get_double("init_temperature");
  return k;
}

ClipTrainOptions clip_train_options(const RunConfig& c) {
  ClipTrainOptions o;
  o.optim.peak_lr = c.get_double("clip_lr");
  o.optim.min_lr = std::min(c.get_double("min_lr"), o.optim.peak_lr);
  o.optim.beta1 = c.get_double("beta1");
  o.optim.beta2 = c.get_double("beta2");
  o.optim.eps = c.get_double("adam_eps");
  o.optim.weight_decay = c.get_double("clip_weight_decay");
  o.optim.total_steps = c.get_int("clip_steps");
  o.optim.warmup_steps = warmup_from(c.get_double("warmup_frac"), o.optim.total_steps);
  o.optim.layer_decay = c.get_double("layer_decay");
  o.batch_size = c.get_int("clip_batch");
  o.augment = c.get_bool("augment");
  o.crop.scale_min = c.get_double("crop_scale_min");
  o.crop.scale_max = c.get_double("crop_scale_max");
  o.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  return o;
}

}  // namespace mimforge
