#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "hsproj/error.hpp"
#include "hsproj/losses.hpp"
#include "test_util.hpp"

using namespace hsproj;
using hsproj::testing::random_tensor;
using hsproj::testing::random_unit_rows;

namespace {

constexpr double kE = std::numbers::e;

Tensor rows(std::size_t b, std::size_t d, std::vector<double> v) { return Tensor::from({b, d}, std::move(v)); }

std::vector<Tensor> split_rows(const Tensor& m) {
  std::vector<Tensor> out;
  for (std::size_t r = 0; r < m.dim(0); ++r) out.push_back(reshape(slice_rows(m, r, 1), {m.dim(1)}));
  return out;
}

// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
Tensor random_rotation(Rng& rng, std::size_t d) {
  std::vector<std::vector<double>> q;
  while (q.size() < d) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    for (const auto& u : q) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += v[i] * u[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= dot * u[i];
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-6) continue;
    for (auto& x : v) x /= n;
    q.push_back(v);
  }
  std::vector<double> flat;
  for (const auto& r : q) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::from({d, d}, flat);
}

RankTargets targets_for(const Tensor& teacher_row, const Tensor& cands) {
  RankTargets t{cands, {}};
  for (std::size_t k = 0; k < cands.dim(0); ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < cands.dim(1); ++j) s += teacher_row.at(j) * cands.at(k, j);
    t.teacher_scores.push_back(s);
  }
  return t;
}

}  // namespace

TEST(Losses, AlignmentExamples) {
  auto t = rows(2, 2, {1, 0, 0, 1});
  EXPECT_NEAR(alignment_loss(t, t).item(), 0.0, 1e-15);
  EXPECT_NEAR(alignment_loss(scale(t, -1.0), t).item(), 2.0, 1e-15);
  auto p = rows(2, 2, {1, 0, 1, 0});
  EXPECT_NEAR(alignment_loss(p, t).item(), 0.5, 1e-15);
  EXPECT_THROW(alignment_loss(rows(1, 2, {1, 0}), t), ContractError);
}

TEST(Losses, ContrastiveExamples) {
  auto one = rows(1, 3, {0, 1, 0});
  EXPECT_NEAR(contrastive_loss(one, one, 0.05).item(), 0.0, 1e-15);

  auto t = rows(2, 2, {1, 0, 0, 1});
  EXPECT_LE(contrastive_loss(t, t, 0.05).item(), 1e-8);
  EXPECT_NEAR(contrastive_loss(t, t, 0.05).item(), std::log1p(std::exp(-20.0)), 1e-15);

  auto swapped = rows(2, 2, {0, 1, 1, 0});
  EXPECT_NEAR(contrastive_loss(swapped, t, 1.0).item(), std::log(1.0 + kE), 1e-6);
  EXPECT_THROW(contrastive_loss(t, t, 0.0), ConfigError);
  EXPECT_THROW(contrastive_loss(t, t, -1.0), ConfigError);
}

TEST(Losses, RankDistillExamples) {
  auto cands = rows(2, 2, {1, 0, 0, 1});
  const std::vector<double> s{1.0, 0.0};
  // pred = (1, 0) gives s_hat = s.
  EXPECT_NEAR(rank_distill_loss(Tensor::from({2}, {1, 0}), cands, s, 1.0).item(), 0.0, 1e-15);
  // pred = (0, 1) gives s_hat = (0, 1).
  EXPECT_NEAR(rank_distill_loss(Tensor::from({2}, {0, 1}), cands, s, 1.0).item(), (kE - 1) / (kE + 1), 1e-6);
  auto single = rows(1, 2, {1, 0});
  EXPECT_THROW(rank_distill_loss(Tensor::from({2}, {1, 0}), single, std::vector<double>{1.0}, 1.0), ConfigError);
  EXPECT_THROW(rank_distill_loss(Tensor::from({2}, {1, 0}), cands, s, 0.0), ConfigError);
}

TEST(Losses, RankDistillShiftInvariance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto cands = random_unit_rows(rng, 8, 6);
    auto pred = reshape(random_unit_rows(rng, 1, 6), {6});
    std::vector<double> s(8);
    for (auto& v : s) v = rng.uniform(-1, 1);
    const double base = rank_distill_loss(pred, cands, s, 0.05).item();
    auto shifted_s = s;
    const double c = rng.normal();
    for (auto& v : shifted_s) v += c;
    EXPECT_NEAR(rank_distill_loss(pred, cands, shifted_s, 0.05).item(), base, 1e-9);
    // Adding c to every s_hat: append a constant coordinate to pred and cands.
    std::vector<double> pc(pred.data().begin(), pred.data().end());
    pc.push_back(c);
    std::vector<double> cc;
    for (std::size_t k = 0; k < 8; ++k) {
      for (std::size_t j = 0; j < 6; ++j) cc.push_back(cands.at(k, j));
      cc.push_back(1.0);
    }
    EXPECT_NEAR(rank_distill_loss(Tensor::from({7}, pc), Tensor::from({8, 7}, cc), s, 0.05).item(), base, 1e-9);
  }
}

TEST(Losses, RankDistillPositiveWhenOrderDiffers) {
  auto cands = rows(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const std::vector<double> s{0.9, 0.5, 0.1};
  auto reversed = l2_normalize(Tensor::from({3}, {0.1, 0.5, 0.9}));
  EXPECT_GT(rank_distill_loss(reversed, cands, s, 0.05).item(), 0.0);
}

TEST(Losses, AllLossesNonNegative) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::size_t b = 1 + seed % 6;
    auto pred = random_unit_rows(rng, b, 5), teacher = random_unit_rows(rng, b, 5);
    EXPECT_GE(alignment_loss(pred, teacher).item(), 0.0);
    EXPECT_LE(alignment_loss(pred, teacher).item(), 2.0);
    EXPECT_GE(contrastive_loss(pred, teacher, 0.05).item(), 0.0);
    auto cands = random_unit_rows(rng, 7, 5);
    std::vector<double> s(7);
    for (auto& v : s) v = rng.uniform(-1, 1);
    EXPECT_GE(rank_distill_loss(split_rows(pred)[0], cands, s, 0.05).item(), 0.0);
  }
}

TEST(Losses, RotationInvariance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t b = 2 + seed % 5, d = 6;
    auto pred = random_unit_rows(rng, b, d), teacher = random_unit_rows(rng, b, d);
    auto q = random_rotation(rng, d);
    auto rp = matmul(pred, q), rt = matmul(teacher, q);
    EXPECT_NEAR(alignment_loss(rp, rt).item(), alignment_loss(pred, teacher).item(), 1e-6);
    EXPECT_NEAR(contrastive_loss(rp, rt, 0.05).item(), contrastive_loss(pred, teacher, 0.05).item(), 1e-6);
  }
}

TEST(Losses, CombinedArithmetic) {
  Rng rng(4);
  auto teacher = random_unit_rows(rng, 3, 5);
  std::vector<Tensor> preds = split_rows(random_unit_rows(rng, 3, 5));
  auto cands = random_unit_rows(rng, 6, 5);
  std::vector<RankTargets> targets;
  for (const auto& row : split_rows(teacher)) targets.push_back(targets_for(row, cands));

  LossWeights w;
  auto c = combined_loss(preds, teacher, targets, w);
  const auto& br = c.breakdown;
  EXPECT_NEAR(br.total, 0.5 * (br.align + br.contra + br.rank), 1e-12);
  EXPECT_EQ(c.total.item(), br.total);
  auto stacked = stack_rows(preds);
  EXPECT_NEAR(br.align, alignment_loss(stacked, teacher).item(), 1e-12);
  EXPECT_NEAR(br.contra, contrastive_loss(stacked, teacher, 0.05).item(), 1e-12);
  EXPECT_NEAR(br.rank, rank_distill_loss(preds, targets, 0.05).item(), 1e-12);

  // Batch rank loss is the mean of the per-query losses.
  double manual = 0.0;
  for (std::size_t j = 0; j < 3; ++j)
    manual += rank_distill_loss(preds[j], cands, targets[j].teacher_scores, 0.05).item();
  EXPECT_NEAR(br.rank, manual / 3.0, 1e-12);

  w = {1.0, 0.0, 0.0, 0.05, 0.05};
  auto a = combined_loss(preds, teacher, {}, w);
  EXPECT_EQ(a.breakdown.total, alignment_loss(stacked, teacher).item());
  EXPECT_EQ(a.breakdown.contra, 0.0);
  EXPECT_EQ(a.breakdown.rank, 0.0);

  w = {0.0, 0.0, 1.0, 0.05, 0.05};
  EXPECT_THROW(combined_loss(preds, teacher, {}, w), ConfigError);
}

TEST(Losses, WeightTotalFormula) {
  // (0.4, 0.2, 0.1) at lambda 0.5 each.
  EXPECT_NEAR(0.5 * 0.4 + 0.5 * 0.2 + 0.5 * 0.1, 0.35, 1e-15);
  LossWeights w;
  EXPECT_EQ(w.align, 0.5);
  EXPECT_EQ(w.contra, 0.5);
  EXPECT_EQ(w.rank, 0.5);
  EXPECT_EQ(w.tau, 0.05);
  EXPECT_EQ(w.tau_r, 0.05);
}

TEST(Losses, WeightValidation) {
  EXPECT_NO_THROW(LossWeights{}.validate());
  EXPECT_THROW((LossWeights{0, 0, 0, 0.05, 0.05}.validate()), ConfigError);
  EXPECT_THROW((LossWeights{1, 0, 0, 0.0, 0.05}.validate()), ConfigError);
  EXPECT_THROW((LossWeights{1, 0, 0, 0.05, -1}.validate()), ConfigError);
  EXPECT_THROW((LossWeights{-1, 1, 0, 0.05, 0.05}.validate()), ConfigError);
}

TEST(Losses, AlignmentDescentConvergesToTeacher) {
  Rng rng(8);
  auto teacher = random_unit_rows(rng, 1, 8);
  std::vector<double> free(8);
  for (auto& v : free) v = rng.normal();
  for (int step = 0; step < 500; ++step) {
    auto x = Tensor::from({1, 8}, free, true);
    auto loss = alignment_loss(reshape(l2_normalize(reshape(x, {8})), {1, 8}), teacher);
    loss.backward();
    for (std::size_t i = 0; i < 8; ++i) free[i] -= 0.1 * x.grad()[i];
  }
  auto p = l2_normalize(Tensor::from({8}, free));
  double cos = 0.0;
  for (std::size_t i = 0; i < 8; ++i) cos += p.at(i) * teacher.at(0, i);
  EXPECT_GE(cos, 0.999);
}
