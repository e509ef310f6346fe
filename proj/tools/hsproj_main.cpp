#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hsproj_tools/commands.hpp"

using namespace hsproj::tools;

namespace {

ExperimentConfig resolve_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  auto cfg = path.empty() ? default_experiment() : load_experiment(path);
  if (seed) {
    cfg.seed = *seed;
    cfg.resolve();
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hsproj: project LLM hidden states into an embedding space for retrieval"};
  app.require_subcommand(1);

  std::string config_path, world_dir, out_dir;
  std::optional<std::uint64_t> seed;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic world (traces, corpus, qrels)");
  gen->add_option("-c,--config", config_path, "Experiment INI file")->check(CLI::ExistingFile);
  gen->add_option("-s,--seed", seed, "Seed override");
  gen->add_option("-o,--out", out_dir, "World directory (default: $HSPROJ_CACHE_ROOT/world-<seed>)");

  bool resume = false;
  std::string replay;
  auto* trn = app.add_subcommand("train", "Train a projection head on a world");
  trn->add_option("-c,--config", config_path, "Experiment INI file")->check(CLI::ExistingFile);
  trn->add_option("-s,--seed", seed, "Seed override");
  trn->add_option("-w,--world", world_dir, "World directory (default: $HSPROJ_CACHE_ROOT/world-0)");
  trn->add_option("-o,--out", out_dir, "Run directory")->required();
  trn->add_flag("--resume", resume, "Continue from <out>/last.ckpt");
  trn->add_option("--replay", replay, "Re-run the run described by this manifest.json")->check(CLI::ExistingFile);

  std::string checkpoint, baseline;
  bool vs_teacher = false;
  std::size_t k = 10, resamples = 1000;
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint (or the teacher) on the test split");
  evl->add_option("--checkpoint", checkpoint, "Parameter file or checkpoint; omit to evaluate the teacher")
      ->check(CLI::ExistingFile);
  evl->add_option("-w,--world", world_dir, "World directory (default: $HSPROJ_CACHE_ROOT/world-0)");
  evl->add_option("--baseline", baseline, "Baseline report.json to compare against")->check(CLI::ExistingFile);
  evl->add_flag("--vs-teacher", vs_teacher, "Compare against the teacher baseline");
  evl->add_option("-k", k, "Cutoff")->check(CLI::PositiveNumber);
  evl->add_option("--resamples", resamples, "Bootstrap resamples")->check(CLI::PositiveNumber);
  evl->add_option("-s,--seed", seed, "Bootstrap seed");
  evl->add_option("-o,--out", out_dir, "Where to write report.json / report.txt");

  std::string matrix_path;
  std::size_t jobs = 1;
  auto* abl = app.add_subcommand("ablate", "Train and evaluate every configuration of an ablation matrix");
  abl->add_option("-m,--matrix", matrix_path, "Matrix INI file")->required()->check(CLI::ExistingFile);
  abl->add_option("-c,--config", config_path, "Base experiment INI file")->check(CLI::ExistingFile);
  abl->add_option("-w,--world", world_dir, "World directory (default: $HSPROJ_CACHE_ROOT/world-0)");
  abl->add_option("-o,--out", out_dir, "Output directory")->required();
  abl->add_option("-j,--jobs", jobs, "Concurrent runs (results are identical)")->check(CLI::PositiveNumber);

  std::vector<std::string> inputs;
  auto* rep = app.add_subcommand("report", "Render report.json / ablation.json files as tables");
  rep->add_option("files", inputs, "Report files")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const auto world_or_default = [&](std::uint64_t s) {
      return world_dir.empty() ? default_world_dir(s) : std::filesystem::path(world_dir);
    };
    if (gen->parsed()) {
      const auto cfg = resolve_config(config_path, seed);
      cmd_gen_data(cfg, out_dir.empty() ? default_world_dir(cfg.seed) : std::filesystem::path(out_dir), std::cout);
    } else if (trn->parsed()) {
      if (!replay.empty()) {
        cmd_replay(replay, out_dir, std::cout);
      } else {
        cmd_train(world_or_default(0), resolve_config(config_path, seed), out_dir, std::cout, resume);
      }
    } else if (evl->parsed()) {
      EvalOptions o;
      if (!checkpoint.empty()) o.checkpoint = checkpoint;
      o.world_dir = world_or_default(0);
      if (!baseline.empty()) o.baseline_report = baseline;
      o.vs_teacher = vs_teacher;
      o.out_dir = out_dir;
      o.k = k;
      o.comparison.resamples = resamples;
      o.comparison.seed = seed.value_or(0);
      cmd_eval(o, std::cout);
    } else if (abl->parsed()) {
      cmd_ablate(world_or_default(0), load_matrix(matrix_path), resolve_config(config_path, seed), out_dir,
                 std::cout, jobs);
    } else if (rep->parsed()) {
      std::vector<std::filesystem::path> paths(inputs.begin(), inputs.end());
      std::cout << cmd_report(paths);
    }
  } catch (const std::exception& e) {
    std::cerr << "hsproj: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitOk;
}
