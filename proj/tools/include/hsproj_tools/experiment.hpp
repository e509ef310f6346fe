#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsproj/projection_head.hpp"
#include "hsproj/synthetic_oracle.hpp"
#include "hsproj/trainer.hpp"

namespace hsproj::tools {

// One experiment as read from an INI file:
//
//   [experiment]  name, group, seed
//   [world]       WorldConfig fields (seed comes from [experiment])
//   [mapper]      d_m, layers, heads, ff_dim; d_h, d, max_positions follow the world
//   [train]       TrainConfig fields except the loss weights
//   [loss]        align, contra, rank, tau, tau_r
//
// Unknown sections or keys are errors.
struct ExperimentConfig {
  std::string name = "default";
  std::string group;
  std::uint64_t seed = 0;
  WorldConfig world;
  MapperConfig mapper;
  TrainConfig train;

  // Copies the seed into world/mapper/train and the world's shape into the mapper.
  void resolve();
  void validate() const;
};

// Settings tuned for the 64 -> 32 synthetic world (the full-size defaults
// of MapperConfig are far too large for it).
MapperConfig synthetic_mapper_defaults();
ExperimentConfig default_experiment();

ExperimentConfig parse_experiment(const std::string& text, const std::string& source = "<string>");
ExperimentConfig load_experiment(const std::filesystem::path& path);
nlohmann::json mapper_config_to_json(const MapperConfig& config);
MapperConfig mapper_config_from_json(const nlohmann::json& doc);

// --- ablation matrix -----------------------------------------------------------

// [matrix] may set `seeds = 0,1,2`; every other section is one named run whose
// keys override [train] / [loss] fields of the base experiment, plus `group`.
struct AblationRun {
  std::string name;
  std::string group;
  std::map<std::string, std::string> overrides;  // "train.epochs" -> "30"
};

struct AblationMatrix {
  std::vector<std::uint64_t> seeds{0};
  std::vector<AblationRun> runs;  // file order
};

AblationMatrix parse_matrix(const std::string& text, const std::string& source = "<string>");
AblationMatrix load_matrix(const std::filesystem::path& path);
// Applies a run's overrides on top of `base`; throws ConfigError on bad values.
ExperimentConfig apply_run(const ExperimentConfig& base, const AblationRun& run, std::uint64_t seed);

// --- run manifest ----------------------------------------------------------------

enum class RunStatus { kConverged, kCollapsed };
std::string to_string(RunStatus status);
RunStatus run_status_from_string(const std::string& text);

struct RunManifest {
  std::string experiment;
  std::string group;
  std::uint64_t seed = 0;
  WorldConfig world;
  MapperConfig mapper;
  TrainConfig train;
  std::filesystem::path world_dir;
  std::filesystem::path out_dir;
  std::map<std::string, std::string> artifacts;  // role -> path
  double wall_clock_seconds = 0.0;
  RunStatus status = RunStatus::kConverged;
  std::map<std::string, double> metrics;
};

nlohmann::json manifest_to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const nlohmann::json& doc);
void save_manifest(const RunManifest& manifest, const std::filesystem::path& path);
RunManifest load_manifest(const std::filesystem::path& path);

}  // namespace hsproj::tools
