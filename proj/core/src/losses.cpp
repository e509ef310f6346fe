#include "hsproj/losses.hpp"

#include <algorithm>
#include <cmath>

#include "hsproj/error.hpp"

namespace hsproj {

void LossWeights::validate() const {
  if (align < 0.0 || contra < 0.0 || rank < 0.0) throw ConfigError("loss weights must be non-negative");
  if (align == 0.0 && contra == 0.0 && rank == 0.0) throw ConfigError("at least one loss weight must be positive");
  if (!(tau > 0.0)) throw ConfigError("contrastive temperature tau must be positive");
  if (!(tau_r > 0.0)) throw ConfigError("rank temperature tau_r must be positive");
}

namespace {

void check_batch_pair(const Tensor& pred, const Tensor& teacher, const char* op) {
  if (pred.rank() != 2 || teacher.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected [B x d] batches, got " + shape_string(pred.shape()) + " and " +
                         shape_string(teacher.shape()));
  }
  if (pred.dim(0) != teacher.dim(0)) {
    throw ContractError(std::string(op) + ": batch size mismatch " + std::to_string(pred.dim(0)) + " vs " +
                        std::to_string(teacher.dim(0)));
  }
  if (pred.dim(1) != teacher.dim(1)) {
    throw DimensionError(std::string(op) + ": embedding width mismatch " + shape_string(pred.shape()) + " vs " +
                         shape_string(teacher.shape()));
  }
  if (pred.dim(0) == 0) throw ContractError(std::string(op) + ": empty batch");
}

}  // namespace

Tensor alignment_loss(const Tensor& pred, const Tensor& teacher) {
  check_batch_pair(pred, teacher, "alignment_loss");
  const double batch = static_cast<double>(pred.dim(0));
  return add_scalar(scale(sum(mul(pred, teacher)), -1.0 / batch), 1.0);
}

Tensor contrastive_loss(const Tensor& pred, const Tensor& teacher, double tau) {
  if (!(tau > 0.0)) throw ConfigError("contrastive_loss: tau must be positive");
  check_batch_pair(pred, teacher, "contrastive_loss");
  const std::size_t b = pred.dim(0);
  const Tensor logits = scale(matmul(pred, transpose(teacher)), 1.0 / tau);
  std::vector<double> eye(b * b, 0.0);
  for (std::size_t i = 0; i < b; ++i) eye[i * b + i] = 1.0;
  const Tensor positives = Tensor::from({b, b}, std::move(eye));
  return scale(sum(mul(log_softmax(logits), positives)), -1.0 / static_cast<double>(b));
}

Tensor rank_distill_loss(const Tensor& pred, const Tensor& candidates, std::span<const double> teacher_scores,
                         double tau_r) {
  if (!(tau_r > 0.0)) throw ConfigError("rank_distill_loss: tau_r must be positive");
  if (candidates.rank() != 2) {
    throw DimensionError("rank_distill_loss: candidates must be [K x d], got " + shape_string(candidates.shape()));
  }
  const std::size_t k = candidates.dim(0), d = candidates.dim(1);
  if (k < 2) throw ConfigError("rank_distill_loss: need K >= 2 candidates, got " + std::to_string(k));
  if (teacher_scores.size() != k) {
    throw DimensionError("rank_distill_loss: " + std::to_string(teacher_scores.size()) + " teacher scores for " +
                         std::to_string(k) + " candidates");
  }
  if (pred.numel() != d) {
    throw DimensionError("rank_distill_loss: prediction " + shape_string(pred.shape()) + " vs candidates " +
                         shape_string(candidates.shape()));
  }

  // Teacher distribution q = softmax(s / tau_r), and the constant sum q log q.
  std::vector<double> q(k);
  const double mx = *std::max_element(teacher_scores.begin(), teacher_scores.end()) / tau_r;
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) z += (q[i] = std::exp(teacher_scores[i] / tau_r - mx));
  const double log_z = std::log(z);
  double entropy_term = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    q[i] /= z;
    if (q[i] > 0.0) entropy_term += q[i] * (teacher_scores[i] / tau_r - mx - log_z);
  }

  const Tensor student_scores = reshape(matmul(candidates, reshape(pred, {d, 1})), {1, k});
  const Tensor log_p = log_softmax(scale(student_scores, 1.0 / tau_r));
  const Tensor weights = Tensor::from({1, k}, std::move(q));
  return add_scalar(scale(sum(mul(log_p, weights)), -1.0), entropy_term);
}

Tensor rank_distill_loss(std::span<const Tensor> preds, std::span<const RankTargets> targets, double tau_r) {
  if (preds.empty()) throw ContractError("rank_distill_loss: empty batch");
  if (preds.size() != targets.size()) {
    throw ContractError("rank_distill_loss: " + std::to_string(preds.size()) + " predictions but " +
                        std::to_string(targets.size()) + " candidate sets");
  }
  std::vector<Tensor> per_query;
  per_query.reserve(preds.size());
  for (std::size_t j = 0; j < preds.size(); ++j) {
    per_query.push_back(
        reshape(rank_distill_loss(preds[j], targets[j].candidates, targets[j].teacher_scores, tau_r), {1}));
  }
  return mean(stack_rows(per_query));
}

CombinedLoss combined_loss(std::span<const Tensor> preds, const Tensor& teacher, std::span<const RankTargets> targets,
                           const LossWeights& weights) {
  weights.validate();
  if (weights.rank > 0.0 && targets.empty()) {
    throw ConfigError("combined_loss: rank weight is positive but no candidate sets were supplied");
  }
  const Tensor pred = stack_rows(preds);

  CombinedLoss out;
  std::vector<Tensor> terms;
  if (weights.align > 0.0) {
    const Tensor l = alignment_loss(pred, teacher);
    out.breakdown.align = l.item();
    terms.push_back(scale(l, weights.align));
  }
  if (weights.contra > 0.0) {
    const Tensor l = contrastive_loss(pred, teacher, weights.tau);
    out.breakdown.contra = l.item();
    terms.push_back(scale(l, weights.contra));
  }
  if (weights.rank > 0.0) {
    const Tensor l = rank_distill_loss(preds, targets, weights.tau_r);
    out.breakdown.rank = l.item();
    terms.push_back(scale(l, weights.rank));
  }
  Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  out.total = total;
  out.breakdown.total = weights.align * out.breakdown.align + weights.contra * out.breakdown.contra +
                        weights.rank * out.breakdown.rank;
  return out;
}

}  // namespace hsproj
