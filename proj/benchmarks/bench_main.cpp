#include <benchmark/benchmark.h>

#include <unistd.h>

#include <filesystem>

#include "hsproj/projection_head.hpp"
#include "hsproj/retrieval_eval.hpp"
#include "hsproj/synthetic_oracle.hpp"
#include "hsproj/trace_store.hpp"
#include "hsproj/trainer.hpp"

using namespace hsproj;

namespace {

MapperConfig synthetic_mapper() {
  MapperConfig c;
  c.d_h = 64;
  c.d_m = 32;
  c.d = 32;
  c.layers = 2;
  c.heads = 4;
  c.ff_dim = 128;
  c.max_positions = 32;
  return c;
}

const SyntheticWorld& world() {
  static const SyntheticWorld w = [] {
    WorldConfig c;
    c.num_conversations = 120;
    return generate_world(c);
  }();
  return w;
}

}  // namespace

static void BM_MapperForward(benchmark::State& state) {
  const auto params = init_mapper(synthetic_mapper());
  const auto& t = world().traces.front();
  const auto h = t.hidden_tensor();
  const Mask mask(t.token_count, true);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(mapper_forward(params, h, mask));
}
BENCHMARK(BM_MapperForward);

static void BM_TrainStepBatch16(benchmark::State& state) {
  const auto& w = world();
  const auto train_ids = std::vector<std::string>(w.splits.train.begin(), w.splits.train.begin() + 16);
  const TrainData data{w.select(train_ids), {}, &w.corpus};
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.top_k = 128;
  for (auto _ : state) benchmark::DoNotOptimize(train(data, synthetic_mapper(), cfg));
}
BENCHMARK(BM_TrainStepBatch16)->Unit(benchmark::kMillisecond);

static void BM_TopkSearch(benchmark::State& state) {
  const auto& w = world();
  const auto& q = *w.traces.front().teacher_embedding;
  const std::vector<double> query(q.begin(), q.end());
  for (auto _ : state) benchmark::DoNotOptimize(topk_search(query, w.corpus, static_cast<std::size_t>(state.range(0))));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(w.corpus.size()));
}
BENCHMARK(BM_TopkSearch)->Arg(10)->Arg(128);

static void BM_TraceRoundtrip(benchmark::State& state) {
  const auto& t = world().traces.front();
  for (auto _ : state) benchmark::DoNotOptimize(decode_trace(encode_trace(t), "bench"));
}
BENCHMARK(BM_TraceRoundtrip);

static void BM_Scan(benchmark::State& state) {
  const auto root = std::filesystem::temp_directory_path() / ("hsproj-bench-" + std::to_string(::getpid()));
  const CacheKey key{"bench", 2048, 32};
  const auto& traces = world().traces;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    auto t = traces[static_cast<std::size_t>(i) % traces.size()];
    t.trigger_id = "t" + std::to_string(i);
    write_trace(root, key, t);
  }
  for (auto _ : state) benchmark::DoNotOptimize(scan(root, key));
  std::filesystem::remove_all(root);
}
BENCHMARK(BM_Scan)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
