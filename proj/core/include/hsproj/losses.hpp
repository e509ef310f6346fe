#pragma once

#include <span>
#include <vector>

#include "hsproj/tensor.hpp"

namespace hsproj {

struct LossWeights {
  double align = 0.5;
  double contra = 0.5;
  double rank = 0.5;
  double tau = 0.05;    // contrastive temperature
  double tau_r = 0.05;  // rank-distillation temperature

  void validate() const;  // throws ConfigError
  bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
  double align = 0.0;
  double contra = 0.0;
  double rank = 0.0;
  double total = 0.0;
  bool operator==(const LossBreakdown&) const = default;
};

// Teacher's frozen top-K candidates for one query.
struct RankTargets {
  Tensor candidates;                  // [K x d], unit rows, no grad
  std::vector<double> teacher_scores;  // s_k = teacher . d_k
};

// 1 - mean_j <pred_j, teacher_j>; both [B x d] with unit rows.
Tensor alignment_loss(const Tensor& pred, const Tensor& teacher);

// In-batch InfoNCE. Row j's logits are <pred_j, teacher_k> / tau over k;
// the positive is k = j. Negatives are the other queries' teacher embeddings.
Tensor contrastive_loss(const Tensor& pred, const Tensor& teacher, double tau);

// KL(softmax(s / tau_r) || softmax(s_hat / tau_r)) with s_hat_k = <pred, d_k>.
// pred: [d]; candidates: [K x d]; teacher_scores: K values. K >= 2.
Tensor rank_distill_loss(const Tensor& pred, const Tensor& candidates, std::span<const double> teacher_scores,
                         double tau_r);

// Mean of the per-query rank loss over a batch.
Tensor rank_distill_loss(std::span<const Tensor> preds, std::span<const RankTargets> targets, double tau_r);

struct CombinedLoss {
  Tensor total;
  LossBreakdown breakdown;
};

// lambda_a * align + lambda_c * contra + lambda_r * rank. Components with a
// zero weight are not evaluated and report 0. `targets` may be empty iff
// weights.rank == 0.
CombinedLoss combined_loss(std::span<const Tensor> preds, const Tensor& teacher, std::span<const RankTargets> targets,
                           const LossWeights& weights);

}  // namespace hsproj
