#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "../common/small_world.hpp"
#include "hsproj/error.hpp"
#include "hsproj/synthetic_oracle.hpp"
#include "hsproj/trainer.hpp"
#include "test_util.hpp"

using namespace hsproj;
using namespace hsproj::testing;

namespace {

void expect_same_world(const SyntheticWorld& a, const SyntheticWorld& b) {
  EXPECT_EQ(a.config, b.config);
  EXPECT_EQ(a.traces, b.traces);
  EXPECT_EQ(encode_corpus(a.corpus), encode_corpus(b.corpus));
  EXPECT_EQ(a.splits.train, b.splits.train);
  EXPECT_EQ(a.splits.val, b.splits.val);
  EXPECT_EQ(a.splits.test, b.splits.test);
}

// Trains x -> normalize(W mean(H)) on alignment loss with Adam; returns the
// mean alignment loss on the given traces.
double linear_student_alignment(const SyntheticWorld& w, int steps) {
  const std::size_t dh = w.config.d_h, d = w.config.d;
  const auto train = w.select(w.splits.train);
  const auto mean_row = [&](const Trace* t) {
    return masked_mean_pool(t->hidden_tensor(), Mask(t->token_count, true)).detach();
  };
  std::vector<Tensor> means;
  std::vector<Tensor> teachers;
  for (const auto* t : train) {
    means.push_back(reshape(mean_row(t), {1, dh}));
    teachers.push_back(Tensor::from({d}, {t->teacher_embedding->begin(), t->teacher_embedding->end()}));
  }
  Rng rng(1);
  auto weight = random_tensor(rng, {dh, d}, true, 0.1);
  std::vector<NamedParam> params{{"w", weight, false}};
  auto state = AdamState::zeros_like(params);
  const auto teacher = stack_rows(teachers);
  const auto predict = [&](const Tensor& m) { return l2_normalize(reshape(matmul(m, weight), {d})); };
  for (int s = 0; s < steps; ++s) {
    weight.zero_grad();
    std::vector<Tensor> preds;
    for (const auto& m : means) preds.push_back(predict(m));
    alignment_loss(stack_rows(preds), teacher).backward();
    adamw_step(params, state, 0.01, {});
  }
  NoGradGuard guard;
  double loss = 0.0;
  const auto test = w.select(w.splits.test);
  for (const auto* t : test) {
    const auto p = predict(reshape(mean_row(t), {1, dh}));
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += p.at(j) * (*t->teacher_embedding)[j];
    loss += 1.0 - dot;
  }
  return loss / static_cast<double>(test.size());
}

}  // namespace

TEST(World, DefaultsDescribeTheDeskTask) {
  WorldConfig c;
  EXPECT_EQ(c.d_h, 64u);
  EXPECT_EQ(c.d, 32u);
  EXPECT_EQ(c.corpus_size, 5000u);
  EXPECT_EQ(c.noise, 0.1);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(world_config_from_json(world_config_to_json(c)), c);
}

TEST(World, SameSeedBitIdentical) {
  expect_same_world(generate_world(small_world_config(3)), generate_world(small_world_config(3)));
  const auto a = generate_world(small_world_config(3)), b = generate_world(small_world_config(4));
  EXPECT_NE(a.traces[0].hidden_states, b.traces[0].hidden_states);
}

TEST(World, StructureAndInvariants) {
  const auto cfg = small_world_config(1);
  const auto w = generate_world(cfg);
  EXPECT_EQ(w.corpus.size(), cfg.corpus_size);
  EXPECT_EQ(w.corpus.dim, cfg.d);
  EXPECT_NO_THROW(w.corpus.validate());
  std::set<std::string> convs;
  for (const auto& t : w.traces) {
    EXPECT_NO_THROW(t.validate());
    convs.insert(t.conversation_id);
    EXPECT_GE(t.token_count, cfg.tokens_min);
    EXPECT_LE(t.token_count, cfg.tokens_max);
    EXPECT_EQ(t.d_h, cfg.d_h);
    EXPECT_EQ(t.trigger_id.rfind(t.conversation_id + "-t", 0), 0u) << t.trigger_id;
    EXPECT_FALSE(t.query_text.empty());
    ASSERT_TRUE(t.teacher_embedding.has_value());
    double sq = 0.0;
    for (float x : *t.teacher_embedding) sq += double(x) * x;
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
    const auto& rel = w.corpus.qrels.at(t.trigger_id);
    EXPECT_GE(rel.size(), cfg.relevant_min);
    EXPECT_LE(rel.size(), cfg.relevant_max);
  }
  EXPECT_EQ(convs.size(), cfg.num_conversations);
  EXPECT_EQ(*convs.begin(), "c0000");
  for (std::size_t i = 0; i < w.corpus.size(); ++i) {
    double sq = 0.0;
    for (double x : w.corpus.row(i)) sq += x * x;
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
  }
  EXPECT_EQ(w.ground_truth_map.size(), cfg.d * cfg.d_h);
}

TEST(World, ConversationLevelSplit) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto w = generate_world(small_world_config(seed));
    std::map<std::string, int> owner;
    int split = 0;
    std::size_t total = 0;
    for (const auto* ids : {&w.splits.train, &w.splits.val, &w.splits.test}) {
      for (const auto& id : *ids) {
        const auto& conv = w.trace(id).conversation_id;
        const auto [it, inserted] = owner.emplace(conv, split);
        EXPECT_EQ(it->second, split) << conv << " crosses splits";
        ++total;
      }
      ++split;
    }
    EXPECT_EQ(total, w.traces.size());
    EXPECT_FALSE(w.splits.train.empty());
    EXPECT_FALSE(w.splits.test.empty());
  }
}

TEST(World, NoiselessBaselineIsPerfect) {
  auto cfg = small_world_config(2);
  cfg.noise = 0.0;
  const auto w = generate_world(cfg);
  for (const auto& t : w.traces) {
    // Teacher is exactly normalize(G mean H), up to float storage.
    const auto h = t.hidden_tensor();
    std::vector<double> mean(cfg.d_h, 0.0), g(cfg.d, 0.0);
    for (std::size_t i = 0; i < t.token_count; ++i)
      for (std::size_t j = 0; j < cfg.d_h; ++j) mean[j] += h.at(i, j) / t.token_count;
    double sq = 0.0;
    for (std::size_t r = 0; r < cfg.d; ++r) {
      for (std::size_t j = 0; j < cfg.d_h; ++j) g[r] += w.ground_truth_map[r * cfg.d_h + j] * mean[j];
      sq += g[r] * g[r];
    }
    for (std::size_t r = 0; r < cfg.d; ++r) EXPECT_NEAR((*t.teacher_embedding)[r], g[r] / std::sqrt(sq), 1e-5);
  }
  const auto report = teacher_baseline_eval(w);
  EXPECT_EQ(report.metrics.recall, 1.0);
  EXPECT_EQ(teacher_baseline_eval(w, w.splits.train).metrics.recall, 1.0);
}

TEST(World, NoiselessLinearStudentAligns) {
  auto cfg = small_world_config(5);
  cfg.noise = 0.0;
  const auto w = generate_world(cfg);
  EXPECT_LT(linear_student_alignment(w, 400), 0.01);
}

TEST(World, BaselineRecallFallsWithNoise) {
  std::vector<double> mean_recall;
  for (double sigma : {0.0, 0.2, 0.5}) {
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto cfg = small_world_config(seed);
      cfg.noise = sigma;
      cfg.corpus_size = 1000;
      total += teacher_baseline_eval(generate_world(cfg)).metrics.recall;
    }
    mean_recall.push_back(total / 5.0);
  }
  EXPECT_EQ(mean_recall[0], 1.0);
  EXPECT_GT(mean_recall[0], mean_recall[1]);
  EXPECT_GT(mean_recall[1], mean_recall[2]);
}

TEST(World, BaselineSelfComparisonHasZeroDeltas) {
  const auto w = generate_world(small_world_config(0));
  auto report = teacher_baseline_eval(w);
  const auto copy = report;
  compare_reports(report, copy);
  const auto& c = *report.comparison;
  EXPECT_EQ(c.recall.delta, 0.0);
  EXPECT_EQ(c.mrr.delta, 0.0);
  EXPECT_EQ(c.ndcg.delta, 0.0);
  EXPECT_EQ(c.outcomes.agreement(), 1.0);
  EXPECT_EQ(report.triggers.size(), w.splits.test.size());
}

TEST(World, InfeasibleConfigsRejected) {
  auto c = small_world_config();
  c.tokens_max = c.max_positions + 1;
  EXPECT_THROW(generate_world(c), ConfigError);
  c = small_world_config();
  c.d = c.d_h + 1;
  EXPECT_THROW(generate_world(c), ConfigError);
  c = small_world_config();
  c.corpus_size = 10 * c.relevant_max - 1;
  EXPECT_THROW(generate_world(c), ConfigError);
  c = small_world_config();
  c.noise = -0.1;
  EXPECT_THROW(generate_world(c), ConfigError);
  c = small_world_config();
  c.num_conversations = 1;
  EXPECT_THROW(generate_world(c), ConfigError);
}

TEST(World, PersistRoundtrip) {
  TempDir dir("world");
  const auto w = generate_world(small_world_config(6));
  save_world(w, dir.path());
  for (const char* f : {"world.json", "corpus.hcrp"}) EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  EXPECT_EQ(scan(dir / "traces", w.config.cache_key()).size(), w.traces.size());
  expect_same_world(w, load_world(dir.path()));
}

TEST(World, CorpusFileDamageDetected) {
  const auto w = generate_world(small_world_config(6));
  const auto bytes = encode_corpus(w.corpus);
  EXPECT_EQ(encode_corpus(decode_corpus(bytes, "c")), bytes);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_corpus(flipped, "c"), CorruptionError);
  auto version = bytes;
  version[4] = static_cast<std::uint8_t>(kCorpusFormatVersion + 1);
  EXPECT_THROW(decode_corpus(version, "c"), VersionError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_corpus(truncated, "c"), DecodeError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_corpus(magic, "c"), DecodeError);
}

TEST(World, LoadRejectsMissingTraces) {
  TempDir dir("world-missing");
  const auto w = generate_world(small_world_config(6));
  save_world(w, dir.path());
  std::filesystem::remove(trace_path(dir / "traces", w.config.cache_key(), w.splits.test.front()));
  EXPECT_THROW(load_world(dir.path()), DataError);
}
