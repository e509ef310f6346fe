#include "hsproj/synthetic_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "hsproj/binary_io.hpp"
#include "hsproj/error.hpp"
#include "hsproj/random.hpp"

namespace hsproj {

namespace {

constexpr char kCorpusMagic[] = "HCRP";
constexpr std::uint64_t kGlobalStream = 0xFFFF'0001;
constexpr std::uint64_t kDistractorStream = 0xFFFF'0002;
constexpr std::uint64_t kSplitStream = 0xFFFF'0003;
constexpr std::uint64_t kDocOrderStream = 0xFFFF'0004;

std::vector<double> normalized(std::vector<double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double n = std::sqrt(sq);
  if (!(n > 0.0)) throw ContractError("synthetic world: degenerate zero vector");
  for (auto& x : v) x /= n;
  return v;
}

// Rounds through float so in-memory worlds equal their on-disk form.
std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

std::vector<double> perturbed(const std::vector<double>& base, double noise, Rng& rng) {
  std::vector<double> out(base);
  if (noise > 0.0)
    for (auto& x : out) x += noise * rng.normal();
  return normalized(std::move(out));
}

std::string conversation_name(std::size_t c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "c%04zu", c);
  return buf;
}

std::string doc_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "doc%06zu", i);
  return buf;
}

}  // namespace

void WorldConfig::validate() const {
  if (d_h == 0 || d == 0) throw ConfigError("world: dimensions must be >= 1");
  if (d > d_h) throw ConfigError("world: d=" + std::to_string(d) + " must not exceed d_h=" + std::to_string(d_h));
  if (num_conversations == 0) throw ConfigError("world: need at least one conversation");
  if (triggers_min == 0 || triggers_min > triggers_max) throw ConfigError("world: bad triggers_per_conversation range");
  if (tokens_min == 0 || tokens_min > tokens_max) throw ConfigError("world: bad token_count range");
  if (tokens_max > max_positions) {
    throw ConfigError("world: token_count up to " + std::to_string(tokens_max) + " exceeds max_positions=" +
                      std::to_string(max_positions));
  }
  if (relevant_min == 0 || relevant_min > relevant_max) throw ConfigError("world: bad relevant_per_query range");
  if (corpus_size < 10 * relevant_max) {
    throw ConfigError("world: corpus_size must be at least 10 x relevant_per_query");
  }
  if (noise < 0.0 || token_noise < 0.0 || distractor_spread < 0.0 || position_scale < 0.0) {
    throw ConfigError("world: noise levels must be non-negative");
  }
  if (distractor_correlation < 0.0 || distractor_correlation > 1.0) {
    throw ConfigError("world: distractor_correlation must lie in [0, 1]");
  }
  if (topic_weight < 0.0 || topic_weight > 1.0) throw ConfigError("world: topic_weight must lie in [0, 1]");
  if (val_fraction < 0.0 || test_fraction <= 0.0 || val_fraction + test_fraction >= 1.0) {
    throw ConfigError("world: split fractions must leave a non-empty training split");
  }
  if (model_name.empty()) throw ConfigError("world: model_name must not be empty");
}

CacheKey WorldConfig::cache_key() const {
  return {model_name, static_cast<std::uint32_t>(max_positions), static_cast<std::uint32_t>(tokens_max)};
}

nlohmann::json world_config_to_json(const WorldConfig& c) {
  return {{"seed", c.seed},
          {"d_h", c.d_h},
          {"d", c.d},
          {"num_conversations", c.num_conversations},
          {"triggers_min", c.triggers_min},
          {"triggers_max", c.triggers_max},
          {"tokens_min", c.tokens_min},
          {"tokens_max", c.tokens_max},
          {"max_positions", c.max_positions},
          {"corpus_size", c.corpus_size},
          {"relevant_min", c.relevant_min},
          {"relevant_max", c.relevant_max},
          {"noise", c.noise},
          {"distractor_correlation", c.distractor_correlation},
          {"distractor_spread", c.distractor_spread},
          {"topic_weight", c.topic_weight},
          {"token_noise", c.token_noise},
          {"position_scale", c.position_scale},
          {"val_fraction", c.val_fraction},
          {"test_fraction", c.test_fraction},
          {"model_name", c.model_name}};
}

WorldConfig world_config_from_json(const nlohmann::json& j) {
  WorldConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.d_h = j.at("d_h").get<std::size_t>();
  c.d = j.at("d").get<std::size_t>();
  c.num_conversations = j.at("num_conversations").get<std::size_t>();
  c.triggers_min = j.at("triggers_min").get<std::size_t>();
  c.triggers_max = j.at("triggers_max").get<std::size_t>();
  c.tokens_min = j.at("tokens_min").get<std::size_t>();
  c.tokens_max = j.at("tokens_max").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  c.corpus_size = j.at("corpus_size").get<std::size_t>();
  c.relevant_min = j.at("relevant_min").get<std::size_t>();
  c.relevant_max = j.at("relevant_max").get<std::size_t>();
  c.noise = j.at("noise").get<double>();
  c.distractor_correlation = j.at("distractor_correlation").get<double>();
  c.distractor_spread = j.at("distractor_spread").get<double>();
  c.topic_weight = j.at("topic_weight").get<double>();
  c.token_noise = j.at("token_noise").get<double>();
  c.position_scale = j.at("position_scale").get<double>();
  c.val_fraction = j.at("val_fraction").get<double>();
  c.test_fraction = j.at("test_fraction").get<double>();
  c.model_name = j.at("model_name").get<std::string>();
  return c;
}

const Trace& SyntheticWorld::trace(const std::string& trigger_id) const {
  if (by_id_.size() != traces.size()) {
    by_id_.clear();
    for (std::size_t i = 0; i < traces.size(); ++i) by_id_[traces[i].trigger_id] = i;
  }
  const auto it = by_id_.find(trigger_id);
  if (it == by_id_.end()) throw DataError("world has no trace " + trigger_id);
  return traces[it->second];
}

std::vector<const Trace*> SyntheticWorld::select(const std::vector<std::string>& trigger_ids) const {
  std::vector<const Trace*> out;
  out.reserve(trigger_ids.size());
  for (const auto& id : trigger_ids) out.push_back(&trace(id));
  return out;
}

SyntheticWorld generate_world(const WorldConfig& config) {
  config.validate();
  const std::size_t dh = config.d_h, d = config.d;
  SyntheticWorld world;
  world.config = config;

  // Planted map G (d x d_h), per-position offsets, conversation topics.
  Rng global(Rng::derive(config.seed, kGlobalStream));
  world.ground_truth_map.resize(d * dh);
  const double g_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (auto& g : world.ground_truth_map) g = g_scale * global.normal();
  std::vector<double> positions(config.max_positions * dh);
  for (auto& p : positions) p = config.position_scale * global.normal();
  std::vector<std::vector<double>> topics(config.num_conversations, std::vector<double>(dh));
  for (auto& t : topics)
    for (auto& x : t) x = global.normal();

  const auto project = [&](const std::vector<double>& v) {
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < dh; ++j) out[i] += world.ground_truth_map[i * dh + j] * v[j];
    return out;
  };

  struct PendingDoc {
    std::vector<double> embedding;
    std::string relevant_to;  // empty for distractors
  };
  std::vector<PendingDoc> docs;
  std::vector<std::size_t> conversation_of_trace;

  const double own_weight = std::sqrt(std::max(0.0, 1.0 - config.topic_weight * config.topic_weight));
  for (std::size_t c = 0; c < config.num_conversations; ++c) {
    Rng rng(Rng::derive(config.seed, c));
    const auto conv = conversation_name(c);
    const auto n_triggers = rng.uniform_int(config.triggers_min, config.triggers_max);
    for (std::size_t t = 0; t < n_triggers; ++t) {
      std::vector<double> latent(dh);
      for (std::size_t j = 0; j < dh; ++j) latent[j] = config.topic_weight * topics[c][j] + own_weight * rng.normal();

      const auto n = rng.uniform_int(config.tokens_min, config.tokens_max);
      Trace trace;
      char id[48];
      std::snprintf(id, sizeof id, "%s-t%02zu", conv.c_str(), t);
      trace.trigger_id = id;
      trace.conversation_id = conv;
      trace.query_text = "synthetic query for " + trace.trigger_id;
      trace.token_count = n;
      trace.d_h = dh;
      trace.hidden_states.resize(n * dh);
      std::vector<double> mean(dh, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < dh; ++j) {
          const auto h = static_cast<float>(latent[j] + config.token_noise * rng.normal() + positions[i * dh + j]);
          trace.hidden_states[i * dh + j] = h;
          mean[j] += h;
        }
      }
      for (auto& m : mean) m /= static_cast<double>(n);

      const auto clean = normalized(project(mean));
      const auto teacher = perturbed(clean, config.noise, rng);
      const auto teacher_f = to_float(teacher);
      trace.teacher_embedding = teacher_f;

      const std::vector<double> teacher_d(teacher_f.begin(), teacher_f.end());
      const auto n_relevant = rng.uniform_int(config.relevant_min, config.relevant_max);
      for (std::size_t r = 0; r < n_relevant; ++r) {
        docs.push_back({config.noise > 0.0 ? perturbed(teacher_d, config.noise, rng) : teacher_d, trace.trigger_id});
      }
      world.traces.push_back(std::move(trace));
      conversation_of_trace.push_back(c);
    }
  }

  if (docs.size() > config.corpus_size) {
    throw ConfigError("world: " + std::to_string(docs.size()) + " relevant documents do not fit corpus_size=" +
                      std::to_string(config.corpus_size));
  }
  {
    Rng rng(Rng::derive(config.seed, kDistractorStream));
    std::vector<std::vector<double>> topic_dirs;
    for (const auto& t : topics) topic_dirs.push_back(normalized(project(t)));
    const double spread = config.distractor_spread / std::sqrt(static_cast<double>(d));
    while (docs.size() < config.corpus_size) {
      std::vector<double> v(d);
      if (rng.uniform() < config.distractor_correlation) {
        const auto& dir = topic_dirs[rng.uniform_int(0, topic_dirs.size() - 1)];
        for (std::size_t j = 0; j < d; ++j) v[j] = dir[j] + spread * rng.normal();
      } else {
        for (auto& x : v) x = rng.normal();
      }
      docs.push_back({normalized(std::move(v)), {}});
    }
  }

  // Shuffle document order so index position carries no information.
  std::vector<std::size_t> order(docs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng(Rng::derive(config.seed, kDocOrderStream)).shuffle(order.begin(), order.end());
  auto& corpus = world.corpus;
  corpus.dim = d;
  corpus.embeddings.reserve(docs.size() * d);
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const auto& doc = docs[order[pos]];
    corpus.doc_ids.push_back(doc_name(pos));
    for (double x : doc.embedding) corpus.embeddings.push_back(static_cast<float>(x));
    if (!doc.relevant_to.empty()) corpus.qrels[doc.relevant_to].insert(corpus.doc_ids.back());
  }

  // Conversation-level split.
  std::vector<std::size_t> convs(config.num_conversations);
  for (std::size_t i = 0; i < convs.size(); ++i) convs[i] = i;
  Rng(Rng::derive(config.seed, kSplitStream)).shuffle(convs.begin(), convs.end());
  const auto total = static_cast<double>(config.num_conversations);
  const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(config.test_fraction * total)));
  const auto n_val = static_cast<std::size_t>(std::llround(config.val_fraction * total));
  if (n_test + n_val >= config.num_conversations) {
    throw ConfigError("world: too few conversations for the requested splits");
  }
  std::vector<int> split_of(config.num_conversations, 0);
  for (std::size_t i = 0; i < n_test; ++i) split_of[convs[i]] = 2;
  for (std::size_t i = n_test; i < n_test + n_val; ++i) split_of[convs[i]] = 1;
  for (std::size_t i = 0; i < world.traces.size(); ++i) {
    const auto& id = world.traces[i].trigger_id;
    switch (split_of[conversation_of_trace[i]]) {
      case 0: world.splits.train.push_back(id); break;
      case 1: world.splits.val.push_back(id); break;
      default: world.splits.test.push_back(id); break;
    }
  }
  return world;
}

EvalReport teacher_baseline_eval(const SyntheticWorld& world, std::size_t k) {
  return teacher_baseline_eval(world, world.splits.test, k);
}

EvalReport teacher_baseline_eval(const SyntheticWorld& world, const std::vector<std::string>& trigger_ids,
                                 std::size_t k) {
  std::vector<QueryEmbedding> queries;
  queries.reserve(trigger_ids.size());
  for (const auto* t : world.select(trigger_ids)) {
    if (!t->teacher_embedding) throw DataError("trace " + t->trigger_id + " has no teacher embedding");
    queries.push_back({t->trigger_id, t->conversation_id,
                       std::vector<double>(t->teacher_embedding->begin(), t->teacher_embedding->end())});
  }
  return evaluate_embeddings("teacher-baseline", queries, world.corpus, k);
}

// --- persistence ----------------------------------------------------------------

std::vector<std::uint8_t> encode_corpus(const CorpusIndex& corpus) {
  ByteWriter w;
  w.put_magic(kCorpusMagic);
  w.put_u32(kCorpusFormatVersion);
  w.put_u32(static_cast<std::uint32_t>(corpus.size()));
  w.put_u32(static_cast<std::uint32_t>(corpus.dim));
  for (const auto& id : corpus.doc_ids) w.put_string(id);
  for (double v : corpus.embeddings) w.put_f32(static_cast<float>(v));
  w.put_u32(static_cast<std::uint32_t>(corpus.qrels.size()));
  for (const auto& [trigger, docs] : corpus.qrels) {
    w.put_string(trigger);
    w.put_u32(static_cast<std::uint32_t>(docs.size()));
    for (const auto& doc : docs) w.put_string(doc);
  }
  w.put_u32(crc32_of(w.bytes()));
  return w.take();
}

CorpusIndex decode_corpus(std::span<const std::uint8_t> bytes, const std::string& context) {
  {
    ByteReader header(bytes, context);
    header.expect_magic(kCorpusMagic);
    const auto version = header.get_u32("format version");
    if (version != kCorpusFormatVersion) {
      throw VersionError(context + ": corpus format version " + std::to_string(version) + ", this build reads " +
                         std::to_string(kCorpusFormatVersion));
    }
  }
  if (bytes.size() < 12) throw CorruptionError(context + ": truncated corpus file");
  const auto payload = bytes.first(bytes.size() - 4);
  ByteReader trailer(bytes.last(4), context);
  if (trailer.get_u32("checksum") != crc32_of(payload)) {
    throw CorruptionError(context + ": checksum mismatch (truncated or corrupted corpus)");
  }
  ByteReader r(payload, context);
  r.expect_magic(kCorpusMagic);
  r.get_u32("format version");
  CorpusIndex c;
  const auto m = r.get_u32("doc count");
  c.dim = r.get_u32("dim");
  c.doc_ids.reserve(m);
  for (std::uint32_t i = 0; i < m; ++i) c.doc_ids.push_back(r.get_string("doc id"));
  c.embeddings.resize(static_cast<std::size_t>(m) * c.dim);
  for (auto& v : c.embeddings) v = r.get_f32("embeddings");
  const auto n_qrels = r.get_u32("qrels count");
  for (std::uint32_t i = 0; i < n_qrels; ++i) {
    auto trigger = r.get_string("qrels trigger");
    const auto n = r.get_u32("qrels size");
    auto& set = c.qrels[std::move(trigger)];
    for (std::uint32_t j = 0; j < n; ++j) set.insert(r.get_string("qrels doc"));
  }
  if (!r.at_end()) throw DecodeError(context + ": trailing bytes in corpus payload");
  c.validate();
  return c;
}

void save_world(const SyntheticWorld& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "hsproj-world";
  manifest["version"] = 1;
  manifest["config"] = world_config_to_json(world.config);
  manifest["cache_digest"] = cache_key_digest(world.config.cache_key());
  manifest["splits"] = {{"train", world.splits.train}, {"val", world.splits.val}, {"test", world.splits.test}};
  manifest["counts"] = {{"traces", world.traces.size()},
                        {"docs", world.corpus.size()},
                        {"train", world.splits.train.size()},
                        {"val", world.splits.val.size()},
                        {"test", world.splits.test.size()}};
  const auto text = manifest.dump(2) + "\n";
  write_file_atomic(dir / "world.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  write_file_atomic(dir / "corpus.hcrp", encode_corpus(world.corpus));
  const auto key = world.config.cache_key();
  for (const auto& t : world.traces) write_trace(dir / "traces", key, t);
}

SyntheticWorld load_world(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "world.json";
  if (!std::filesystem::exists(manifest_path)) throw DataError("no world at " + dir.string() + " (missing world.json)");
  nlohmann::json manifest;
  try {
    std::ifstream in(manifest_path);
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(manifest_path.string() + ": " + e.what());
  }
  SyntheticWorld world;
  try {
    world.config = world_config_from_json(manifest.at("config"));
    const auto& splits = manifest.at("splits");
    world.splits.train = splits.at("train").get<std::vector<std::string>>();
    world.splits.val = splits.at("val").get<std::vector<std::string>>();
    world.splits.test = splits.at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(manifest_path.string() + ": " + e.what());
  }
  world.config.validate();
  const auto corpus_path = dir / "corpus.hcrp";
  world.corpus = decode_corpus(read_file_bytes(corpus_path), corpus_path.string());

  const auto key = world.config.cache_key();
  const auto root = dir / "traces";
  for (const auto* split : {&world.splits.train, &world.splits.val, &world.splits.test}) {
    for (const auto& id : *split) {
      auto t = read_trace(root, key, id);
      if (!t) throw DataError("world " + dir.string() + ": trace " + id + " missing from cache");
      world.traces.push_back(std::move(*t));
    }
  }
  std::sort(world.traces.begin(), world.traces.end(),
            [](const Trace& a, const Trace& b) { return a.trigger_id < b.trigger_id; });
  return world;
}

}  // namespace hsproj
