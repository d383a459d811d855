#include <malloc.h>

#include <CLI11.hpp>
#include <iostream>

#include "mimforge/commands.hpp"

int main(int argc, char** argv) {
  // Keep freed activation buffers in the heap instead of returning them to
  // the kernel every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"mimforge: masked image modeling at desk scale"};
  app.require_subcommand(1);
  mimforge::CommandRequest request;
  std::uint64_t seed = 0;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"pretrain", "masked-feature pre-training"},
      {"ablate", "regress-masked vs distill-all, side by side"},
      {"probe", "linear probe on frozen encoder features"},
      {"clip-train", "contrastive image-text training from a MIM checkpoint"},
      {"zeroshot", "zero-shot classification with a CLIP checkpoint"},
      {"gradcheck", "finite-difference checks of every op and the MIM loss"},
      {"gen-data", "write the synthetic dataset and teacher features"},
      {"inspect-ckpt", "list the tensors of a checkpoint"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    if (name == "inspect-ckpt") {
      sub->add_option("checkpoint", request.positional, "EVAC file")->required();
      continue;
    }
    sub->add_option("--config", request.config_path, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", request.overrides, "override, key=value (repeatable)");
    sub->add_option("--seed", seed, "run seed");
    if (name == "pretrain") sub->add_option("--resume", request.resume, "checkpoint to continue from");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return mimforge::kExitConfig;
  }
  auto* chosen = app.get_subcommands().front();
  request.command = chosen->get_name();
  if (chosen->get_option_no_throw("--seed") && chosen->count("--seed") > 0) request.seed = seed;
  return mimforge::run_command(request, std::cout, std::cerr);
}
