#include "mimforge/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "mimforge/errors.hpp"
#include "mimforge/grad_suite.hpp"
#include "mimforge/probe.hpp"

namespace fs = std::filesystem;

namespace mimforge {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string step_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt-step%06lld.evac", static_cast<long long>(step));
  return buf;
}

void prepare_run_dir(const std::string& dir, const RunConfig& config) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create run directory " + dir);
  std::ofstream snap(fs::path(dir) / "config.txt", std::ios::trunc);
  if (!snap) throw std::runtime_error("run directory " + dir + " is not writable");
  snap << config.to_text();
  if (!snap) throw std::runtime_error("run directory " + dir + " is not writable");
}

RunConfig config_of(const Checkpoint& checkpoint) {
  try {
    return RunConfig::parse(checkpoint.config_text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config blob is invalid: ") + e.what());
  }
}

Checkpoint require_checkpoint(const RunConfig& config, const char* command) {
  const auto& path = config.get_string("init_checkpoint");
  if (path.empty()) throw ConfigError(std::string(command) + " needs init_checkpoint=<path>");
  return load_checkpoint(path);
}

struct ProbeOutcome {
  ProbeResult result;
  FeatureKind kind;
};

ProbeOutcome probe_encoder(const EncoderState<float>& encoder, const RunConfig& config, const Datasets& data) {
  const auto kind = parse_feature_kind(config.get_string("feature"));
  const auto ftr = extract_features(encoder, *data.train, kind);
  const auto fev = extract_features(encoder, *data.eval, kind);
  auto result = probe_evaluate(ftr, data.train->labels(), fev, data.eval->labels(), data.train->class_count,
                               probe_options(config));
  result.feature_kind = kind;
  return {std::move(result), kind};
}

Record probe_record(const ProbeOutcome& p, const std::string& encoder_source) {
  Record r;
  r.add("event", "probe")
      .add("encoder", encoder_source)
      .add("feature", to_string(p.kind))
      .add("top1", p.result.top1)
      .add("train_top1", p.result.train_top1)
      .add("final_train_loss", p.result.train_loss_curve.back());
  return r;
}

int cmd_pretrain(const CommandRequest& req, const RunConfig& config, std::ostream& out) {
  const auto dir = resolve_run_dir(config, req.command);
  const auto outcome = run_pretrain(config, dir, req.resume, out);
  out << "pretrain finished: " << outcome.steps << " steps, final loss " << fixed(outcome.final_loss) << "\n"
      << "checkpoint: " << outcome.final_checkpoint << "\n";
  return kExitOk;
}

int cmd_ablate(const CommandRequest& req, const RunConfig& config, std::ostream& out) {
  const auto dir = resolve_run_dir(config, req.command);
  prepare_run_dir(dir, config);
  RecordWriter metrics((fs::path(dir) / "metrics.txt").string());
  const auto data = load_datasets(config);
  std::vector<Record> rows;
  for (const std::string mode : {"regress-masked", "distill-all"}) {
    RunConfig arm = config;
    arm.set("mode", mode);
    const auto arm_dir = (fs::path(dir) / mode).string();
    arm.set("run_dir", arm_dir);
    out << "== arm " << mode << "\n";
    const auto outcome = run_pretrain(arm, arm_dir, "", out);
    const auto encoder = encoder_from_checkpoint(load_checkpoint(outcome.final_checkpoint));
    const auto probe = probe_encoder(encoder, arm, data);
    Record row;
    row.add("mode", mode).add("final_pretext_loss", fixed(outcome.final_loss)).add("probe_top1", fixed(probe.result.top1));
    metrics.write(Record(row).add("event", "ablate_row").add("feature", to_string(probe.kind)));
    rows.push_back(row);
  }
  const auto table = render_table(rows, {"mode", "final_pretext_loss", "probe_top1"});
  std::ofstream(fs::path(dir) / "ablate.txt") << table;
  out << table;
  return kExitOk;
}

int cmd_probe(const CommandRequest& req, const RunConfig& config, std::ostream& out) {
  const auto dir = resolve_run_dir(config, req.command);
  prepare_run_dir(dir, config);
  RecordWriter metrics((fs::path(dir) / "metrics.txt").string());
  const auto data = load_datasets(config);
  EncoderState<float> encoder;
  std::string source;
  if (config.get_string("init_checkpoint").empty()) {
    Prng rng(static_cast<std::uint64_t>(config.get_int("seed")), fnv1a64("pretrain-init"));
    Prng enc_rng = rng.split("encoder");
    encoder = EncoderState<float>::init(encoder_config(config), enc_rng);
    source = "random-init";
  } else {
    encoder = encoder_from_checkpoint(load_checkpoint(config.get_string("init_checkpoint")));
    source = config.get_string("init_checkpoint");
  }
  const auto probe = probe_encoder(encoder, config, data);
  for (std::size_t e = 0; e < probe.result.train_loss_curve.size(); ++e)
    metrics.write(Record().add("event", "probe_epoch").add("epoch", static_cast<std::int64_t>(e)).add(
        "loss", probe.result.train_loss_curve[e]));
  const auto rec = probe_record(probe, source);
  metrics.write(rec);
  out << format_record(rec) << "\n";
  return kExitOk;
}

int cmd_clip_train(const CommandRequest& req, const RunConfig& config, std::ostream& out) {
  const auto dir = resolve_run_dir(config, req.command);
  prepare_run_dir(dir, config);
  RecordWriter metrics((fs::path(dir) / "metrics.txt").string());
  const auto data = load_datasets(config);
  const auto cc = clip_config(config);
  Prng rng(static_cast<std::uint64_t>(config.get_int("seed")), fnv1a64("clip-init"));
  ClipState<float> state;
  if (config.get_string("init_checkpoint").empty()) {
    state = ClipState<float>::init(cc, rng);
    metrics.write(Record().add("event", "clip_init").add("vision", "random-init"));
  } else {
    auto init = init_from_mim(load_checkpoint(config.get_string("init_checkpoint")), cc, rng);
    state = std::move(init.state);
    metrics.write(Record()
                      .add("event", "clip_init")
                      .add("vision", config.get_string("init_checkpoint"))
                      .add("matched", static_cast<std::int64_t>(init.report.matched.size()))
                      .add("fresh", static_cast<std::int64_t>(init.report.fresh.size()))
                      .add("ignored", static_cast<std::int64_t>(init.report.ignored.size())));
  }
  ClipTrainer trainer(state, clip_train_options(config), data.train);
  const auto total = config.get_int("clip_steps");
  const auto log_every = config.get_int("log_every");
  double tmin = trainer.state().temperature(), tmax = tmin;
  const auto t0 = Clock::now();
  ClipStepReport rep;
  for (std::int64_t k = trainer.steps_done(); k < total; ++k) {
    rep = trainer.step();
    tmin = std::min(tmin, rep.temperature);
    tmax = std::max(tmax, rep.temperature);
    if ((k + 1) % log_every == 0 || k + 1 == total)
      metrics.write(Record().add("step", rep.step).add("loss", rep.loss).add("temperature", rep.temperature).add("lr", rep.lr));
    if ((k + 1) % 100 == 0 || k + 1 == total)
      out << "[clip-train] step " << k + 1 << "/" << total << " loss " << fixed(rep.loss) << " temp "
          << fixed(rep.temperature) << " (" << fixed(seconds_since(t0) / static_cast<double>(k + 1), 3) << " s/step)\n"
          << std::flush;
  }
  Checkpoint ck;
  ck.config_text = config.to_text(false);
  ck.add_all(trainer.state().named_parameters());
  ck.add_all(trainer.optimizer().state_tensors());
  ck.add_f64_scalar("opt.step", static_cast<double>(trainer.steps_done()));
  const auto path = (fs::path(dir) / "final.evac").string();
  save_checkpoint(path, ck);
  const double top1 = zero_shot_top1(trainer.state(), *data.eval);
  const auto rec = Record()
                       .add("event", "zeroshot")
                       .add("top1", top1)
                       .add("temperature_min", tmin)
                       .add("temperature_max", tmax)
                       .add("checkpoint", path);
  metrics.write(rec);
  out << format_record(rec) << "\n";
  return kExitOk;
}

int cmd_zeroshot(const CommandRequest& req, const RunConfig& config, std::ostream& out) {
  const auto dir = resolve_run_dir(config, req.command);
  prepare_run_dir(dir, config);
  RecordWriter metrics((fs::path(dir) / "metrics.txt").string());
  const auto clip = clip_from_checkpoint(require_checkpoint(config, "zeroshot"));
  const auto data = load_datasets(config);
  const double top1 = zero_shot_top1(clip, *data.eval);
  const auto rec = Record().add("event", "zeroshot").add("top1", top1).add("images", data.eval->size());
  metrics.write(rec);
  out << format_record(rec) << "\n";
  return kExitOk;
}

int cmd_gradcheck(const CommandRequest& req, const RunConfig& config, std::ostream& out) {
  const auto dir = resolve_run_dir(config, req.command);
  prepare_run_dir(dir, config);
  RecordWriter metrics((fs::path(dir) / "metrics.txt").string());
  const auto seed = static_cast<std::uint64_t>(config.get_int("seed"));
  const double tol = config.get_double("gradcheck_tol"), h = config.get_double("gradcheck_step");
  std::int64_t checks = 0, failures = 0;
  double worst = 0.0;
  for (const auto& r : op_gradcheck_suite(seed, 2, tol, h)) {
    ++checks;
    failures += !r.report.passed;
    worst = std::max(worst, r.report.max_rel_error);
    metrics.write(Record()
                      .add("op", r.op)
                      .add("input", r.input)
                      .add("shape", r.shape)
                      .add("passed", r.report.passed ? "true" : "false")
                      .add("max_rel_error", r.report.max_rel_error));
    if (!r.report.passed) out << "FAIL " << r.op << "/" << r.input << " " << r.report.message << "\n";
  }
  for (const auto& r : mim_loss_gradcheck(seed, tol, h)) {
    ++checks;
    failures += !r.report.passed;
    worst = std::max(worst, r.report.max_rel_error);
    metrics.write(Record()
                      .add("op", "mim_loss")
                      .add("input", r.tensor)
                      .add("passed", r.report.passed ? "true" : "false")
                      .add("max_rel_error", r.report.max_rel_error));
    if (!r.report.passed) out << "FAIL mim_loss/" << r.tensor << " " << r.report.message << "\n";
  }
  const auto rec = Record().add("event", "gradcheck").add("checks", checks).add("failures", failures).add("max_rel_error", worst);
  metrics.write(rec);
  out << format_record(rec) << "\n";
  return failures == 0 ? kExitOk : kExitNumeric;
}

int cmd_gen_data(const CommandRequest& req, const RunConfig& config, std::ostream& out) {
  const auto dir = resolve_run_dir(config, req.command);
  prepare_run_dir(dir, config);
  const auto train = synth_generate(synthetic_spec(config));
  const auto eval = synth_generate(heldout_spec(config));
  const auto train_path = (fs::path(dir) / "train.evad").string();
  const auto eval_path = (fs::path(dir) / "eval.evad").string();
  save_evad(train_path, train);
  save_evad(eval_path, eval);
  // Frozen-net features of the unaugmented training images, for teacher=file.
  const auto ec = encoder_config(config);
  FrozenNetTeacher teacher(ec.image_size, ec.patch_size, frozen_teacher_options(config));
  std::vector<float> feats;
  Prng unused(0);
  for (std::int64_t b = 0; b < train.size(); b += 250) {
    std::vector<std::int64_t> idx;
    for (auto i = b; i < std::min(train.size(), b + 250); ++i) idx.push_back(i);
    const auto batch = teacher.features(make_batch(train, idx, false, CropOptions{}, unused), idx);
    feats.insert(feats.end(), batch.features.data().begin(), batch.features.data().end());
  }
  const auto evat_path = (fs::path(dir) / "teacher.evat").string();
  write_evat(evat_path, feats, train.size(), teacher.grid(), teacher.teacher_dim());
  RecordWriter metrics((fs::path(dir) / "metrics.txt").string());
  const auto rec = Record()
                       .add("event", "gen-data")
                       .add("train", train_path)
                       .add("train_images", train.size())
                       .add("eval", eval_path)
                       .add("eval_images", eval.size())
                       .add("teacher_features", evat_path)
                       .add("teacher_source", teacher.source_id());
  metrics.write(rec);
  out << format_record(rec) << "\n";
  return kExitOk;
}

int cmd_inspect(const CommandRequest& req, std::ostream& out) {
  if (req.positional.size() != 1) throw ConfigError("inspect-ckpt takes exactly one checkpoint path");
  const auto ck = load_checkpoint(req.positional[0]);
  std::int64_t encoder_params = 0, head_params = 0, opt_entries = 0, other = 0;
  const bool clip = ck.find("vision.patch_embed.weight") != nullptr;
  for (const auto& t : ck.tensors) {
    const auto n = static_cast<std::int64_t>(t.values.size());
    if (t.name.starts_with("opt.")) {
      ++opt_entries;
    } else if (t.name.starts_with("head.")) {
      head_params += n;
    } else if (!clip || t.name.starts_with("vision.")) {
      encoder_params += n;
    } else {
      other += n;
    }
    out << format_record(Record()
                             .add("name", t.name)
                             .add("shape", shape_str(t.shape))
                             .add("dtype", t.dtype == DType::f32 ? "f32" : "f64")
                             .add("numel", n))
        << "\n";
  }
  const auto cfg = config_of(ck);
  out << format_record(Record()
                           .add("tensors", static_cast<std::int64_t>(ck.tensors.size()))
                           .add("config_bytes", static_cast<std::int64_t>(ck.config_text.size()))
                           .add("encoder_params", encoder_params)
                           .add("count_parameters", count_parameters(encoder_config(cfg)))
                           .add("head_params", head_params)
                           .add("other_params", other)
                           .add("optimizer_entries", opt_entries))
      << "\n";
  return kExitOk;
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"pretrain", "ablate",   "probe",     "clip-train",
                                                 "zeroshot", "gradcheck", "gen-data", "inspect-ckpt"};
  return names;
}

RunConfig resolve_config(const CommandRequest& request) {
  RunConfig c = request.config_path.empty() ? RunConfig() : RunConfig::load(request.config_path);
  for (const auto& o : request.overrides) c.apply_override(o);
  if (request.seed) c.set("seed", std::to_string(*request.seed));
  c.validate();
  return c;
}

std::string resolve_run_dir(const RunConfig& config, const std::string& command) {
  const auto& explicit_dir = config.get_string("run_dir");
  if (!explicit_dir.empty()) return explicit_dir;
  const auto leaf = command + "-seed" + std::to_string(config.get_int("seed"));
  if (const char* root = std::getenv("MIMFORGE_RUN_DIR"); root && *root) return (fs::path(root) / leaf).string();
  return (fs::path("runs") / leaf).string();
}

Datasets load_datasets(const RunConfig& config) {
  Datasets d;
  const auto& tp = config.get_string("data_path");
  const auto& ep = config.get_string("eval_data_path");
  d.train = std::make_shared<Dataset>(tp.empty() ? synth_generate(synthetic_spec(config)) : load_evad(tp));
  d.eval = std::make_shared<Dataset>(ep.empty() ? synth_generate(heldout_spec(config)) : load_evad(ep));
  if (d.train->size() == 0 || d.eval->size() == 0) throw ArgumentError("training and evaluation sets must be non-empty");
  if (d.train->image_size != config.get_int("image_size"))
    throw ConfigError("dataset image size " + std::to_string(d.train->image_size) + " does not match image_size=" +
                      std::to_string(config.get_int("image_size")));
  if (d.eval->image_size != d.train->image_size || d.eval->class_count != d.train->class_count)
    throw ConfigError("evaluation set disagrees with the training set on image size or class count");
  return d;
}

std::shared_ptr<const TeacherProvider> make_teacher(const RunConfig& config) {
  if (config.get_string("teacher") == "file") return std::make_shared<FileTeacher>(config.get_string("teacher_path"));
  const auto ec = encoder_config(config);
  return std::make_shared<FrozenNetTeacher>(ec.image_size, ec.patch_size, frozen_teacher_options(config));
}

Checkpoint pretrain_checkpoint(const RunConfig& config, Pretrainer& trainer) {
  Checkpoint ck;
  ck.config_text = config.to_text(false);
  ck.add_all(trainer.named_parameters());
  ck.add_all(trainer.optimizer().state_tensors());
  ck.add_f64_scalar("opt.step", static_cast<double>(trainer.steps_done()));
  return ck;
}

void restore_pretrainer(Pretrainer& trainer, const Checkpoint& checkpoint) {
  auto slots = trainer.encoder().parameter_slots();
  for (auto& s : trainer.head().parameter_slots()) slots.push_back(s);
  const auto step = checkpoint_step(checkpoint);
  load_parameters(checkpoint, slots);
  trainer.optimizer().load_state(optimizer_entries<float>(checkpoint), step);
}

EncoderState<float> encoder_from_checkpoint(const Checkpoint& checkpoint) {
  const auto cfg = config_of(checkpoint);
  Prng unused(0);
  auto encoder = EncoderState<float>::init(encoder_config(cfg), unused);
  const std::string prefix = checkpoint.find("vision.patch_embed.weight") ? "vision." : "";
  load_parameters(checkpoint, encoder.parameter_slots(), prefix);
  return encoder;
}

ClipState<float> clip_from_checkpoint(const Checkpoint& checkpoint) {
  const auto cfg = config_of(checkpoint);
  Prng unused(0);
  auto clip = ClipState<float>::init(clip_config(cfg), unused);
  load_parameters(checkpoint, clip.parameter_slots());
  return clip;
}

PretrainOutcome run_pretrain(const RunConfig& config, const std::string& run_dir, const std::string& resume,
                             std::ostream& out) {
  prepare_run_dir(run_dir, config);
  const auto data = load_datasets(config);
  Pretrainer trainer(pretrain_options(config), data.train, make_teacher(config));
  if (!resume.empty()) restore_pretrainer(trainer, load_checkpoint(resume));
  RecordWriter metrics((fs::path(run_dir) / "metrics.txt").string(), !resume.empty());

  const auto total = config.get_int("steps");
  const auto spe = trainer.steps_per_epoch();
  const auto& oc = trainer.options().optim;
  metrics.write(Record()
                    .add("event", resume.empty() ? "start" : "resume")
                    .add("start_step", trainer.steps_done())
                    .add("steps", total)
                    .add("steps_per_epoch", spe)
                    .add("epochs", static_cast<double>(total) / static_cast<double>(spe))
                    .add("warmup_steps", oc.warmup_steps)
                    .add("mode", config.get_string("mode")));
  if (resume.empty()) save_checkpoint((fs::path(run_dir) / "init.evac").string(), pretrain_checkpoint(config, trainer));

  const auto every = config.get_int("checkpoint_every");
  const auto log_every = config.get_int("log_every");
  const auto t0 = Clock::now();
  const auto first = trainer.steps_done();
  PretrainOutcome outcome;
  for (std::int64_t k = first; k < total; ++k) {
    const auto rep = trainer.step();
    outcome.final_loss = rep.loss;
    if ((k + 1) % log_every == 0 || k + 1 == total)
      metrics.write(Record()
                        .add("step", rep.step)
                        .add("epoch", rep.step / spe)
                        .add("loss", rep.loss)
                        .add("grad_norm", rep.grad_norm)
                        .add("lr", rep.lr));
    if (every > 0 && (k + 1) % every == 0 && k + 1 < total)
      save_checkpoint((fs::path(run_dir) / step_name(k + 1)).string(), pretrain_checkpoint(config, trainer));
    if ((k + 1) % 100 == 0 || k + 1 == total)
      out << "[pretrain " << config.get_string("mode") << "] step " << k + 1 << "/" << total << " loss "
          << fixed(rep.loss) << " lr " << rep.lr << " ("
          << fixed(seconds_since(t0) / static_cast<double>(k + 1 - first), 3) << " s/step)\n"
          << std::flush;
  }
  outcome.steps = trainer.steps_done();
  outcome.final_checkpoint = (fs::path(run_dir) / "final.evac").string();
  save_checkpoint(outcome.final_checkpoint, pretrain_checkpoint(config, trainer));
  metrics.write(Record().add("event", "final").add("steps", outcome.steps).add("checkpoint", outcome.final_checkpoint));
  return outcome;
}

double zero_shot_top1(const ClipState<float>& clip, const Dataset& data) {
  if (data.size() == 0) throw ArgumentError("zero-shot evaluation on an empty dataset");
  std::vector<std::vector<std::int64_t>> captions;
  for (std::int64_t c = 0; c < data.class_count; ++c) captions.push_back(class_caption(c, clip.config.context));
  std::vector<std::int64_t> preds;
  Prng unused(0);
  for (std::int64_t b = 0; b < data.size(); b += 250) {
    std::vector<std::int64_t> idx;
    for (auto i = b; i < std::min(data.size(), b + 250); ++i) idx.push_back(i);
    const auto labels = zero_shot_classify(clip, make_batch(data, idx, false, CropOptions{}, unused), captions);
    preds.insert(preds.end(), labels.begin(), labels.end());
  }
  return top1(preds, data.labels());
}

int run_command(const CommandRequest& request, std::ostream& out, std::ostream& err) {
  try {
    if (request.command == "inspect-ckpt") return cmd_inspect(request, out);
    const auto& names = command_names();
    if (std::find(names.begin(), names.end(), request.command) == names.end())
      throw ConfigError("unknown command '" + request.command + "'");
    if (!request.resume.empty() && request.command != "pretrain") throw ConfigError("--resume only applies to pretrain");
    if (!request.positional.empty()) throw ConfigError(request.command + " takes no positional arguments");
    const auto config = resolve_config(request);
    if (request.command == "pretrain") return cmd_pretrain(request, config, out);
    if (request.command == "ablate") return cmd_ablate(request, config, out);
    if (request.command == "probe") return cmd_probe(request, config, out);
    if (request.command == "clip-train") return cmd_clip_train(request, config, out);
    if (request.command == "zeroshot") return cmd_zeroshot(request, config, out);
    if (request.command == "gradcheck") return cmd_gradcheck(request, config, out);
    return cmd_gen_data(request, config, out);
  } catch (const NumericAbort& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace mimforge
