#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hsproj/retrieval_eval.hpp"
#include "hsproj/synthetic_oracle.hpp"
#include "hsproj/trainer.hpp"
#include "hsproj_tools/experiment.hpp"

namespace hsproj::tools {

// $HSPROJ_CACHE_ROOT, else ./hsproj-cache
std::filesystem::path default_cache_root();
std::filesystem::path default_world_dir(std::uint64_t seed);

// Exit codes of the hsproj binary.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUnexpected = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitRuntime = 4;
int exit_code_for(const std::exception& e);

SyntheticWorld cmd_gen_data(const ExperimentConfig& config, const std::filesystem::path& out_dir, std::ostream& log);

struct TrainRun {
  RunManifest manifest;
  TrainResult result;
  EvalReport test_report;  // best params on the test split, compared with the teacher
};

// Status is "collapsed" when the final validation Recall@10 is below twice the
// random-chance Recall@10 of that split.
TrainRun run_training(const SyntheticWorld& world, const std::filesystem::path& world_dir,
                      const ExperimentConfig& config, const std::filesystem::path& out_dir, std::ostream& log,
                      bool resume = false);
TrainRun cmd_train(const std::filesystem::path& world_dir, const ExperimentConfig& config,
                   const std::filesystem::path& out_dir, std::ostream& log, bool resume = false);
// Re-runs a finished run from its manifest into `out_dir`.
TrainRun cmd_replay(const std::filesystem::path& manifest_path, const std::filesystem::path& out_dir,
                    std::ostream& log);

struct EvalOptions {
  std::optional<std::filesystem::path> checkpoint;  // none = evaluate the teacher itself
  std::filesystem::path world_dir;
  std::optional<std::filesystem::path> baseline_report;
  bool vs_teacher = false;  // compare against a freshly computed teacher baseline
  std::filesystem::path out_dir;
  std::size_t k = 10;
  ComparisonOptions comparison;
};

EvalReport evaluate_params(const MapperParams& params, const SyntheticWorld& world,
                           const std::vector<std::string>& trigger_ids, std::size_t k = 10);
EvalReport cmd_eval(const EvalOptions& options, std::ostream& log);

struct AblationRow {
  std::string name;
  std::string group;
  std::uint64_t seed = 0;
  std::optional<RunStatus> status;  // empty when the run failed
  std::string error;
  std::optional<EvalReport> report;
  std::filesystem::path manifest;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // matrix order, then seed order
  std::string table;
};

// jobs > 1 trains runs concurrently; results do not depend on it.
AblationResult cmd_ablate(const std::filesystem::path& world_dir, const AblationMatrix& matrix,
                          const ExperimentConfig& base, const std::filesystem::path& out_dir, std::ostream& log,
                          std::size_t jobs = 1);
AblationResult run_ablation(const SyntheticWorld& world, const std::filesystem::path& world_dir,
                            const AblationMatrix& matrix, const ExperimentConfig& base,
                            const std::filesystem::path& out_dir, std::ostream& log, std::size_t jobs = 1);

// One line per configuration sorted by Recall@10; with several seeds the
// median-Recall@10 seed represents the configuration.
std::string render_ablation_table(const std::vector<AblationRow>& rows);
nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows);
std::vector<AblationRow> ablation_from_json(const nlohmann::json& doc);

// Renders report.json or ablation.json files as text tables.
std::string cmd_report(const std::vector<std::filesystem::path>& paths);

}  // namespace hsproj::tools
