#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsproj/losses.hpp"
#include "hsproj/projection_head.hpp"
#include "hsproj/retrieval_eval.hpp"
#include "hsproj/trace_store.hpp"

namespace hsproj {

struct TrainConfig {
  std::size_t epochs = 80;
  std::size_t batch_size = 16;
  double lr_start = 2e-4;
  double lr_end = 1e-5;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t top_k = 128;
  LossWeights weights;
  std::uint64_t seed = 0;
  bool shuffle = true;
  std::size_t val_interval = 5;         // 0 disables validation snapshots
  std::size_t checkpoint_interval = 5;  // epochs between last.ckpt writes; the final epoch is always written

  void validate() const;  // throws ConfigError
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& doc);

// lr_end + (lr_start - lr_end)/2 * (1 + cos(pi * step / total_steps)).
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_start, double lr_end);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;  // one buffer per parameter, `named()` order

  static AdamState zeros_like(std::span<const NamedParam> params);
  bool operator==(const AdamState&) const = default;
};

// Decoupled weight decay (only where NamedParam::decay), then a bias-corrected
// Adam step from each tensor's grad. Throws NumericError on a non-finite grad.
void adamw_step(std::span<const NamedParam> params, AdamState& state, double lr, const AdamConfig& config);

struct ClipResult {
  double norm = 0.0;       // global L2 norm before clipping
  double clipped = 0.0;    // after
};
ClipResult clip_grad_norm(std::span<const NamedParam> params, double max_norm);
ClipResult clip_grad_norm(std::span<Tensor> grads, double max_norm);

struct Candidates {
  std::vector<std::size_t> indices;
  std::vector<double> scores;
};

// Exact teacher top-K per query; ties by ascending doc index. K > corpus size is a ConfigError.
std::vector<Candidates> precompute_candidates(std::span<const std::vector<double>> teacher_embeddings,
                                              const CorpusIndex& corpus, std::size_t k);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t steps = 0;
  LossBreakdown loss;     // means over the epoch's batches
  double lr_first = 0.0;
  double lr_last = 0.0;
  double grad_norm_mean = 0.0;
  double grad_norm_max = 0.0;
  double clipped_norm_max = 0.0;
  std::optional<double> val_recall;
  bool operator==(const EpochRecord&) const = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<double> learning_rates;  // one per optimizer step
  std::optional<std::size_t> best_epoch;
  std::optional<double> best_val_recall;
  bool operator==(const TrainHistory&) const = default;
};

nlohmann::json epoch_record_to_json(const EpochRecord& record);
EpochRecord epoch_record_from_json(const nlohmann::json& doc);
nlohmann::json history_to_json(const TrainHistory& history);
TrainHistory history_from_json(const nlohmann::json& doc);

struct TrainData {
  std::vector<const Trace*> train;
  std::vector<const Trace*> val;  // may be empty; then best = final
  const CorpusIndex* corpus = nullptr;
};

// With a non-empty dir, train() writes history.jsonl, last.ckpt,
// best.hsph, final.hsph and summary.json there.
struct TrainOutput {
  std::filesystem::path dir;
  bool resume = false;  // continue from dir/last.ckpt when present
  // Stop early, as if interrupted, once this many epochs are done. last.ckpt
  // is written; best/final/summary are not.
  std::optional<std::size_t> stop_after;
};

struct TrainResult {
  MapperParams final_params;
  MapperParams best_params;
  TrainHistory history;
};

TrainResult train(const TrainData& data, const MapperConfig& mapper_config, const TrainConfig& config,
                  const TrainOutput& output = {});

// Embeds traces with a trained mapper (no graph recorded).
std::vector<QueryEmbedding> embed_traces(const MapperParams& params, std::span<const Trace* const> traces);

// Validation Recall@10 on the given traces.
double validation_recall(const MapperParams& params, std::span<const Trace* const> traces,
                         const CorpusIndex& corpus, std::size_t k = 10);

// Checkpoint: HSPH parameter file followed by an "HOPT" section holding the
// optimizer moments, progress counters, history and the best parameters.
struct Checkpoint {
  MapperParams params;
  AdamState optimizer;
  std::size_t epochs_done = 0;
  TrainHistory history;
  std::optional<MapperParams> best;
};

inline constexpr std::uint32_t kOptimizerFormatVersion = 1;
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& context);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace hsproj
