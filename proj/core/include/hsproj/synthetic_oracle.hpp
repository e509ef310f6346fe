#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hsproj/retrieval_eval.hpp"
#include "hsproj/trace_store.hpp"

namespace hsproj {

// Knobs of the desk-scale stand-in for (LLM, teacher encoder, corpus, qrels).
struct WorldConfig {
  std::uint64_t seed = 0;
  std::size_t d_h = 64;
  std::size_t d = 32;
  std::size_t num_conversations = 450;
  std::size_t triggers_min = 4;
  std::size_t triggers_max = 8;
  std::size_t tokens_min = 4;
  std::size_t tokens_max = 16;
  std::size_t max_positions = 32;
  std::size_t corpus_size = 5000;
  std::size_t relevant_min = 1;
  std::size_t relevant_max = 2;
  double noise = 0.1;                   // per-coordinate std of teacher and relevant-doc noise
  double distractor_correlation = 0.5;  // fraction of distractors drawn near some topic
  double distractor_spread = 0.5;
  double topic_weight = 0.8;  // share of a trigger's latent taken from its conversation topic
  double token_noise = 1.0;
  double position_scale = 0.5;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  std::string model_name = "synthetic-llm";

  void validate() const;  // throws ConfigError
  CacheKey cache_key() const;
  bool operator==(const WorldConfig&) const = default;
};

nlohmann::json world_config_to_json(const WorldConfig& config);
WorldConfig world_config_from_json(const nlohmann::json& doc);

struct WorldSplits {
  std::vector<std::string> train, val, test;  // trigger ids, generation order
};

struct SyntheticWorld {
  WorldConfig config;
  std::vector<Trace> traces;  // teacher embeddings filled
  CorpusIndex corpus;
  WorldSplits splits;
  // Planted d x d_h map; diagnostics only, not persisted.
  std::vector<double> ground_truth_map;

  const Trace& trace(const std::string& trigger_id) const;
  std::vector<const Trace*> select(const std::vector<std::string>& trigger_ids) const;

 private:
  mutable std::map<std::string, std::size_t> by_id_;
};

SyntheticWorld generate_world(const WorldConfig& config);

// Retrieval with the stored teacher embeddings themselves (the
// generate-then-encode reference) over the given split, default test.
EvalReport teacher_baseline_eval(const SyntheticWorld& world, std::size_t k = 10);
EvalReport teacher_baseline_eval(const SyntheticWorld& world, const std::vector<std::string>& trigger_ids,
                                 std::size_t k = 10);

// Corpus container: "HCRP", u32 version, dims, ids, f32 rows, qrels, CRC32.
inline constexpr std::uint32_t kCorpusFormatVersion = 1;
std::vector<std::uint8_t> encode_corpus(const CorpusIndex& corpus);
CorpusIndex decode_corpus(std::span<const std::uint8_t> bytes, const std::string& context);

// <dir>/world.json, <dir>/corpus.hcrp, <dir>/traces/<digest>/*.htrc
void save_world(const SyntheticWorld& world, const std::filesystem::path& dir);
SyntheticWorld load_world(const std::filesystem::path& dir);

}  // namespace hsproj
