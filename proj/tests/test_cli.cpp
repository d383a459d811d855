#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "mimforge/checkpoint.hpp"
#include "mimforge/commands.hpp"
#include "mimforge/config.hpp"
#include "mimforge/errors.hpp"
#include "mimforge/records.hpp"
#include "test_util.hpp"

using namespace mimforge;
using mimforge::testing::random_tensor;
using mimforge::testing::scratch_dir;

namespace fs = std::filesystem;

namespace {

std::vector<std::string> tiny_overrides(const fs::path& dir) {
  return {"run_dir=" + dir.string(), "image_size=16", "depth=1", "width=16", "mlp_width=32", "heads=2",
          "teacher_dim=8", "teacher_mlp=16", "classes=2", "samples_per_class=8", "eval_samples_per_class=4",
          "batch_size=4", "steps=10", "checkpoint_every=5", "probe_epochs=2", "mask_min_block=2"};
}

int run(const std::string& command, std::vector<std::string> overrides, std::string* out_text = nullptr,
        std::vector<std::string> positional = {}) {
  CommandRequest req;
  req.command = command;
  req.overrides = std::move(overrides);
  req.positional = std::move(positional);
  std::ostringstream out, err;
  const int code = run_command(req, out, err);
  if (out_text) *out_text = out.str() + err.str();
  return code;
}

}  // namespace

TEST_CASE("default config is the toy recipe and validates") {
  RunConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.get_int("depth") == 4);
  CHECK(c.get_int("width") == 64);
  CHECK(c.get_int("steps") == 3000);
  CHECK(c.get_int("batch_size") == 64);
  CHECK(c.get_double("mask_ratio") == 0.4);
  CHECK(c.get_double("lr") == 1e-3);
  CHECK(c.get_double("beta2") == 0.98);
  CHECK(c.get_double("weight_decay") == 0.05);
  CHECK(c.get_string("teacher") == "frozen-net");
  CHECK(c.get_string("mode") == "regress-masked");
  const auto e = encoder_config(c);
  CHECK(count_parameters(e) == 207488);
}

TEST_CASE("config parsing, overrides and errors") {
  auto c = RunConfig::parse("# comment\nseed = 5\n\nlr=0.002   # trailing\nmode = distill-all\n");
  CHECK(c.get_int("seed") == 5);
  CHECK(c.get_double("lr") == 0.002);
  CHECK(c.get_string("mode") == "distill-all");
  CHECK_THROWS_AS(RunConfig::parse("bogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("lr\n"), ConfigError);
  CHECK_THROWS_AS(c.set("mask_ratio", "1.5"), ConfigError);
  CHECK_THROWS_AS(c.set("depth", "two"), ConfigError);
  CHECK_THROWS_AS(c.set("mode", "pixels"), ConfigError);
  CHECK_THROWS_AS(c.apply_override("depth"), ConfigError);
  c.apply_override("depth=2");
  CHECK(c.get_int("depth") == 2);
  c.set("patch_size", "5");
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config text snapshot round-trips and can omit locations") {
  RunConfig c;
  c.set("run_dir", "/tmp/somewhere");
  c.set("seed", "9");
  c.set("lr", "0.00031");
  CHECK(RunConfig::parse(c.to_text()) == c);
  const auto bare = c.to_text(false);
  CHECK(bare.find("run_dir") == std::string::npos);
  CHECK(bare.find("init_checkpoint") == std::string::npos);
  CHECK(bare.find("seed=9") != std::string::npos);
}

TEST_CASE("records escape awkward values and round-trip") {
  Record r;
  r.add("event", "probe").add("path", "a b=c%d\ne").add("x", 0.1).add("n", std::int64_t{-3}).add("k", 7);
  const auto line = format_record(r);
  CHECK(line.find('\n') == std::string::npos);
  auto back = parse_record(line);
  CHECK(back.fields == r.fields);
  CHECK(back.get("path") == "a b=c%d\ne");
  CHECK(back.number("x") == 0.1);
  CHECK(back.number("n") == -3.0);
  CHECK_FALSE(back.get("missing").has_value());
  CHECK_THROWS_AS(back.number("event"), FormatError);
  CHECK_THROWS_AS(parse_record("novalue"), FormatError);

  Record a, b;
  a.add("mode", "regress-masked").add("probe_top1", 0.5);
  b.add("mode", "distill-all");
  const auto table = render_table({a, b}, {"mode", "probe_top1"});
  CHECK(table.find("regress-masked") != std::string::npos);
  CHECK(table.find("-") != std::string::npos);
  std::istringstream lines(table);
  std::string first;
  std::getline(lines, first);
  CHECK(first.find("mode") == 0);
}

TEST_CASE("record writer and reader agree") {
  const auto dir = scratch_dir("records");
  const auto path = (dir / "m.txt").string();
  {
    RecordWriter w(path);
    for (int i = 0; i < 3; ++i) w.write(Record{}.add("step", i).add("loss", -0.5 * i));
  }
  auto rs = read_records(path);
  REQUIRE(rs.size() == 3);
  CHECK(rs[2].number("loss") == -1.0);
}

TEST_CASE("EVAC encode/decode is bitwise exact for f32 and f64") {
  Prng rng(1);
  Checkpoint ck;
  ck.config_text = "seed=1\nlr=0.001\n";
  ck.add("a", random_tensor<float>({3, 4}, rng));
  ck.add("b.c", random_tensor<double>({2, 2, 2}, rng));
  ck.add_f64_scalar("opt.step", 12.0);
  const auto bytes = encode_checkpoint(ck);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "EVAC");
  auto back = decode_checkpoint(bytes);
  CHECK(back == ck);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(checkpoint_step(back) == 12);
  CHECK(back.at("b.c").dtype == DType::f64);
  CHECK_THROWS_AS(back.at("nope"), FormatError);

  const auto dir = scratch_dir("evac");
  const auto path = (dir / "x.evac").string();
  save_checkpoint(path, ck);
  CHECK(read_file_bytes(path) == bytes);
  CHECK(load_checkpoint(path) == ck);
  CHECK_FALSE(fs::exists(path + ".tmp"));
}

TEST_CASE("corrupt EVAC bytes raise format errors") {
  Prng rng(2);
  Checkpoint ck;
  ck.add("w", random_tensor<float>({4}, rng));
  const auto good = encode_checkpoint(ck);
  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);
  auto truncated = good;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);
  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(trailing), FormatError);
  auto bad_version = good;
  bad_version[4] = 2;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), FormatError);

  Checkpoint dup;
  dup.add("w", random_tensor<float>({1}, rng));
  dup.add("w", random_tensor<float>({1}, rng));
  CHECK_THROWS_AS(encode_checkpoint(dup), ArgumentError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.evac"), FormatError);
}

TEST_CASE("load_parameters is all-or-nothing") {
  Prng rng(3);
  auto a = random_tensor<float>({2, 2}, rng), b = random_tensor<float>({3}, rng);
  Checkpoint ck;
  ck.add("a", random_tensor<float>({2, 2}, rng));
  ck.add("b", random_tensor<float>({4}, rng));  // wrong shape
  const std::vector<float> a_before(a.data().begin(), a.data().end());
  std::vector<std::pair<std::string, TensorF*>> slots{{"a", &a}, {"b", &b}};
  CHECK_THROWS_AS(load_parameters(ck, slots), ShapeError);
  CHECK(std::equal(a_before.begin(), a_before.end(), a.data().begin()));
  std::vector<std::pair<std::string, TensorF*>> missing{{"a", &a}, {"c", &b}};
  CHECK_THROWS_AS(load_parameters(ck, missing), FormatError);

  std::vector<std::pair<std::string, TensorF*>> ok{{"a", &a}};
  auto* node = a.node();
  load_parameters(ck, ok);
  CHECK(a.node() == node);  // copied in place
  CHECK(a.data()[0] == static_cast<float>(ck.at("a").values[0]));
}

TEST_CASE("pretrain at lr 0 ends where it started") {
  const auto dir = scratch_dir("cli-lr0");
  auto ov = tiny_overrides(dir);
  ov.push_back("lr=0");
  ov.push_back("min_lr=0");
  REQUIRE(run("pretrain", ov) == kExitOk);
  const auto init = load_checkpoint((dir / "init.evac").string());
  const auto fin = load_checkpoint((dir / "final.evac").string());
  CHECK(checkpoint_step(fin) == 10);
  std::size_t compared = 0;
  for (const auto& t : init.tensors) {
    if (t.name.rfind("opt.", 0) == 0) continue;
    CHECK_MESSAGE(fin.at(t.name) == t, t.name);
    ++compared;
  }
  CHECK(compared > 0);
  CHECK(fs::exists(dir / "ckpt-step000005.evac"));
  CHECK(fs::exists(dir / "config.txt"));
  auto metrics = read_records((dir / "metrics.txt").string());
  std::size_t steps = 0;
  for (const auto& r : metrics)
    if (r.get("step") && r.get("loss")) ++steps;
  CHECK(steps == 10);
}

TEST_CASE("inspect-ckpt accounts for every tensor") {
  const auto dir = scratch_dir("cli-inspect");
  auto ov = tiny_overrides(dir);
  ov.push_back("steps=2");
  ov.push_back("checkpoint_every=0");
  REQUIRE(run("pretrain", ov) == kExitOk);
  const auto path = (dir / "final.evac").string();
  const auto ck = load_checkpoint(path);

  // Expected names: encoder + head parameters, two moments each, and the step.
  auto cfg = RunConfig::parse(ck.config_text);
  Prng rng(0);
  auto enc = EncoderState<float>::init(encoder_config(cfg), rng);
  auto head = MimHead<float>::init(cfg.get_int("width"), cfg.get_int("teacher_dim"), rng);
  std::set<std::string> expected;
  std::int64_t enc_numel = 0;
  for (const auto& [n, t] : enc.named_parameters()) {
    expected.insert(n);
    enc_numel += t.numel();
  }
  for (const auto& [n, t] : head.named_parameters()) expected.insert(n);
  const auto params = expected;
  for (const auto& n : params) {
    expected.insert("opt.m." + n);
    expected.insert("opt.v." + n);
  }
  expected.insert("opt.step");
  std::set<std::string> actual;
  for (const auto& t : ck.tensors) actual.insert(t.name);
  CHECK(actual == expected);
  CHECK(enc_numel == count_parameters(encoder_config(cfg)));

  std::string text;
  REQUIRE(run("inspect-ckpt", {}, &text, {path}) == kExitOk);
  std::istringstream lines(text);
  std::string line;
  std::optional<Record> summary;
  while (std::getline(lines, line))
    if (line.find("optimizer_entries=") != std::string::npos) summary = parse_record(line);
  REQUIRE(summary);
  CHECK(summary->number("tensors") == static_cast<double>(expected.size()));
  CHECK(summary->number("encoder_params") == static_cast<double>(enc_numel));
  CHECK(summary->number("count_parameters") == static_cast<double>(enc_numel));
  CHECK(summary->number("optimizer_entries") == static_cast<double>(2 * params.size() + 1));
}

TEST_CASE("command exit codes") {
  const auto dir = scratch_dir("cli-codes");
  CHECK(run("pretrain", {"no_such_key=1"}) == kExitConfig);
  CHECK(run("pretrain", {"mask_ratio=2"}) == kExitConfig);
  CHECK(run("inspect-ckpt", {}, nullptr, {(dir / "absent.evac").string()}) == kExitFailure);
  CHECK(run("frobnicate", {}) == kExitConfig);
  auto ov = tiny_overrides(dir);
  ov.push_back("init_checkpoint=" + (dir / "absent.evac").string());
  CHECK(run("probe", ov) == kExitFailure);
}

TEST_CASE("run directory resolution") {
  RunConfig c;
  c.set("seed", "4");
  c.set("run_dir", "/x/y");
  CHECK(resolve_run_dir(c, "pretrain") == "/x/y");
  c.set("run_dir", "");
  ::setenv("MIMFORGE_RUN_DIR", "/base", 1);
  CHECK(resolve_run_dir(c, "probe") == "/base/probe-seed4");
  ::unsetenv("MIMFORGE_RUN_DIR");
  CHECK(resolve_run_dir(c, "probe") == "runs/probe-seed4");
}
