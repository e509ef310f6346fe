#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace hsproj {

using Qrels = std::map<std::string, std::set<std::string>>;

// Exact brute-force index over unit-norm document embeddings.
struct CorpusIndex {
  std::vector<std::string> doc_ids;
  std::size_t dim = 0;
  std::vector<double> embeddings;  // [M x dim], row-major
  Qrels qrels;                     // trigger_id -> relevant doc ids

  std::size_t size() const { return doc_ids.size(); }
  std::span<const double> row(std::size_t i) const { return {embeddings.data() + i * dim, dim}; }
  // Checks shapes, unit rows (+-1e-5), unique ids, qrels referencing known docs.
  void validate() const;
};

struct ScoredDoc {
  std::size_t index;
  double score;
  bool operator==(const ScoredDoc&) const = default;
};

// Top-k by dot product, score descending, ties by ascending doc index.
std::vector<ScoredDoc> topk_search(std::span<const double> query, const CorpusIndex& index, std::size_t k);

struct Ranking {
  std::string trigger_id;
  std::string conversation_id;
  std::vector<ScoredDoc> docs;
};

struct PerTriggerResult {
  std::string trigger_id;
  std::string conversation_id;
  std::vector<ScoredDoc> ranked;
  std::size_t relevant_count = 0;  // 0 = unjudged, excluded from means
  bool hit = false;
  double reciprocal_rank = 0.0;
  double ndcg = 0.0;
};

// Binary-gain metrics of one ranking cut at k.
struct TriggerMetrics {
  bool hit = false;
  double reciprocal_rank = 0.0;
  double ndcg = 0.0;
};
TriggerMetrics score_ranking(std::span<const ScoredDoc> ranked, const std::vector<std::string>& doc_ids,
                             const std::set<std::string>& relevant, std::size_t k);

struct AggregateMetrics {
  double recall = 0.0;
  double mrr = 0.0;
  double ndcg = 0.0;
  std::size_t judged = 0;
  std::size_t excluded = 0;  // triggers with an empty qrels entry
};

// Throws DataError listing every trigger id without a qrels entry.
std::vector<PerTriggerResult> score_rankings(std::span<const Ranking> rankings, const CorpusIndex& index,
                                             std::size_t k = 10);
AggregateMetrics aggregate(std::span<const PerTriggerResult> results);

double recall_at_k(std::span<const Ranking> rankings, const CorpusIndex& index, std::size_t k = 10);
double mrr_at_k(std::span<const Ranking> rankings, const CorpusIndex& index, std::size_t k = 10);
double ndcg_at_k(std::span<const Ranking> rankings, const CorpusIndex& index, std::size_t k = 10);

// Expected Recall@k of a uniformly random ranking, averaged over judged triggers.
double random_chance_recall(const CorpusIndex& index, std::span<const std::string> trigger_ids, std::size_t k = 10);

struct EvalReport;

struct QueryEmbedding {
  std::string trigger_id;
  std::string conversation_id;
  std::vector<double> embedding;
};

// Searches every query (top-k) and scores the rankings into a report.
EvalReport evaluate_embeddings(std::string system, std::span<const QueryEmbedding> queries, const CorpusIndex& index,
                               std::size_t k = 10);

// --- paired statistics ----------------------------------------------------

struct ConfidenceInterval {
  double delta = 0.0;  // mean(ours - baseline)
  double lower = 0.0;
  double upper = 0.0;
};

// Percentile bootstrap over trigger indices; 2.5 / 97.5 percentiles with
// linear interpolation between order statistics.
ConfidenceInterval bootstrap_ci(std::span<const double> ours, std::span<const double> baseline,
                                std::size_t resamples = 1000, std::uint64_t seed = 0);

struct McNemarResult {
  std::size_t b = 0;  // ours-only successes
  std::size_t c = 0;  // baseline-only successes
  double chi2 = 0.0;
  double p = 1.0;
};

// Continuity-corrected statistic, p from the chi-square(1) survival function.
McNemarResult mcnemar(std::size_t b, std::size_t c);
McNemarResult mcnemar(const std::vector<bool>& ours_hits, const std::vector<bool>& base_hits);

// Upper tail of chi-square with `dof` degrees of freedom (regularized Q).
double chi_square_sf(double x, double dof);

struct WinTieLoss {
  std::size_t wins = 0;
  std::size_t ties = 0;
  std::size_t losses = 0;
  double agreement() const;
};
WinTieLoss win_tie_loss(const std::vector<bool>& ours_hits, const std::vector<bool>& base_hits);

struct ConversationRow {
  std::string conversation_id;
  std::size_t triggers = 0;
  double agreement = 0.0;
  double ours_recall = 0.0;
  double baseline_recall = 0.0;
};

struct ConversationAnalysis {
  std::vector<ConversationRow> rows;  // sorted by conversation id
  double mean_agreement = 0.0;        // unweighted over conversations
  std::vector<std::string> failure_concentrated;
};

// Results must be paired: same trigger order in both spans.
ConversationAnalysis per_conversation_analysis(std::span<const PerTriggerResult> ours,
                                               std::span<const PerTriggerResult> baseline,
                                               std::size_t min_triggers = 3, double gap_threshold = 0.25);

// --- reports ------------------------------------------------------------------

struct ComparisonOptions {
  std::size_t resamples = 1000;
  std::uint64_t seed = 0;
  std::size_t min_triggers = 3;
  double gap_threshold = 0.25;
};

struct PairedComparison {
  std::string baseline_name;
  AggregateMetrics baseline;
  ConfidenceInterval recall, mrr, ndcg;
  McNemarResult mcnemar;
  WinTieLoss outcomes;
  ConversationAnalysis conversations;
  double retention = 0.0;  // ours / baseline Recall@k
};

struct EvalReport {
  std::string system;
  std::size_t k = 10;
  AggregateMetrics metrics;
  std::vector<PerTriggerResult> triggers;
  std::vector<std::string> excluded_triggers;
  std::optional<PairedComparison> comparison;
};

EvalReport make_report(std::string system, std::vector<PerTriggerResult> triggers, std::size_t k = 10);

// Fills report.comparison. Both reports must cover the same triggers.
void compare_reports(EvalReport& ours, const EvalReport& baseline, const ComparisonOptions& options = {});

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& doc);
// Human-readable table: rows Baseline / Ours / Delta / 95% CI.
std::string render_table(const EvalReport& report);

}  // namespace hsproj
