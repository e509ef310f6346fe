#include "hsproj/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "hsproj/binary_io.hpp"
#include "hsproj/error.hpp"
#include "hsproj/random.hpp"

namespace hsproj {

namespace {

constexpr char kOptimizerMagic[] = "HOPT";
constexpr std::uint64_t kShuffleStream = 0x5348'0000;

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

bool finite(double x) { return std::isfinite(x); }


nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

// Per-trace tensors built once and reused for every epoch.
struct Example {
  const Trace* trace;
  Tensor hidden;
  std::vector<double> teacher;
  RankTargets targets;
};

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr_end > 0.0) || !(lr_start >= lr_end)) throw ConfigError("train: need lr_start >= lr_end > 0");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (!(clip_norm > 0.0)) throw ConfigError("train: clip_norm must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be > 0");
  weights.validate();
  if (weights.rank > 0.0 && top_k < 2) throw ConfigError("train: top_k must be >= 2 when rank weight > 0");
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_start", c.lr_start},
          {"lr_end", c.lr_end},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"top_k", c.top_k},
          {"lambda_align", c.weights.align},
          {"lambda_contra", c.weights.contra},
          {"lambda_rank", c.weights.rank},
          {"tau", c.weights.tau},
          {"tau_r", c.weights.tau_r},
          {"seed", c.seed},
          {"shuffle", c.shuffle},
          {"val_interval", c.val_interval},
          {"checkpoint_interval", c.checkpoint_interval}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.lr_start = j.at("lr_start").get<double>();
  c.lr_end = j.at("lr_end").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.top_k = j.at("top_k").get<std::size_t>();
  c.weights.align = j.at("lambda_align").get<double>();
  c.weights.contra = j.at("lambda_contra").get<double>();
  c.weights.rank = j.at("lambda_rank").get<double>();
  c.weights.tau = j.at("tau").get<double>();
  c.weights.tau_r = j.at("tau_r").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.shuffle = j.at("shuffle").get<bool>();
  c.val_interval = j.at("val_interval").get<std::size_t>();
  c.checkpoint_interval = j.at("checkpoint_interval").get<std::size_t>();
  return c;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_start, double lr_end) {
  if (total_steps == 0) throw ConfigError("cosine_lr: total_steps must be >= 1");
  if (step > total_steps) throw ConfigError("cosine_lr: step past the end of the schedule");
  if (step == 0) return lr_start;
  if (step == total_steps) return lr_end;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(std::numbers::pi * t));
}

// --- optimizer ----------------------------------------------------------------

AdamState AdamState::zeros_like(std::span<const NamedParam> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.numel(), 0.0);
    s.v.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

void adamw_step(std::span<const NamedParam> params, AdamState& state, double lr, const AdamConfig& config) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("adamw_step: optimizer state has " + std::to_string(state.m.size()) + " buffers for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params[i].tensor;
    if (state.m[i].size() != t.numel() || state.v[i].size() != t.numel()) {
      throw ContractError("adamw_step: state shape mismatch for " + params[i].name);
    }
    if (!t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!finite(g)) throw NumericError("adamw_step: non-finite gradient in " + params[i].name);
    }
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto w = t.mutable_data();
    if (params[i].decay && config.weight_decay != 0.0) {
      const double keep = 1.0 - lr * config.weight_decay;
      for (auto& x : w) x *= keep;
    }
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has = t.has_grad();
    const auto g = has ? t.grad() : std::span<const double>{};
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

ClipResult clip_grad_norm(std::span<Tensor> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_grad_norm: max_norm must be > 0");
  double sq = 0.0;
  for (const auto& t : grads)
    if (t.has_grad())
      for (double g : t.grad()) sq += g * g;
  ClipResult r;
  r.norm = std::sqrt(sq);
  r.clipped = r.norm;
  if (r.norm > max_norm) {
    const double factor = max_norm / r.norm;
    double after = 0.0;
    for (auto& t : grads) {
      if (!t.has_grad()) continue;
      for (auto& g : t.mutable_grad()) {
        g *= factor;
        after += g * g;
      }
    }
    r.clipped = std::sqrt(after);
  }
  return r;
}

ClipResult clip_grad_norm(std::span<const NamedParam> params, double max_norm) {
  std::vector<Tensor> tensors;
  tensors.reserve(params.size());
  for (const auto& p : params) tensors.push_back(p.tensor);
  return clip_grad_norm(tensors, max_norm);
}

std::vector<Candidates> precompute_candidates(std::span<const std::vector<double>> teacher_embeddings,
                                              const CorpusIndex& corpus, std::size_t k) {
  if (k > corpus.size()) {
    throw ConfigError("precompute_candidates: K=" + std::to_string(k) + " exceeds corpus size " +
                      std::to_string(corpus.size()));
  }
  std::vector<Candidates> out;
  out.reserve(teacher_embeddings.size());
  for (const auto& q : teacher_embeddings) {
    Candidates c;
    for (const auto& doc : topk_search(q, corpus, k)) {
      c.indices.push_back(doc.index);
      c.scores.push_back(doc.score);
    }
    out.push_back(std::move(c));
  }
  return out;
}

// --- history --------------------------------------------------------------------

nlohmann::json epoch_record_to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"steps", r.steps},
          {"loss_total", r.loss.total},
          {"loss_align", r.loss.align},
          {"loss_contra", r.loss.contra},
          {"loss_rank", r.loss.rank},
          {"lr_first", r.lr_first},
          {"lr_last", r.lr_last},
          {"grad_norm_mean", r.grad_norm_mean},
          {"grad_norm_max", r.grad_norm_max},
          {"clipped_norm_max", r.clipped_norm_max},
          {"val_recall", optional_json(r.val_recall)}};
}

EpochRecord epoch_record_from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.steps = j.at("steps").get<std::size_t>();
  r.loss.total = j.at("loss_total").get<double>();
  r.loss.align = j.at("loss_align").get<double>();
  r.loss.contra = j.at("loss_contra").get<double>();
  r.loss.rank = j.at("loss_rank").get<double>();
  r.lr_first = j.at("lr_first").get<double>();
  r.lr_last = j.at("lr_last").get<double>();
  r.grad_norm_mean = j.at("grad_norm_mean").get<double>();
  r.grad_norm_max = j.at("grad_norm_max").get<double>();
  r.clipped_norm_max = j.at("clipped_norm_max").get<double>();
  if (!j.at("val_recall").is_null()) r.val_recall = j.at("val_recall").get<double>();
  return r;
}

nlohmann::json history_to_json(const TrainHistory& h) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& r : h.epochs) epochs.push_back(epoch_record_to_json(r));
  return {{"epochs", epochs},
          {"learning_rates", h.learning_rates},
          {"best_epoch", h.best_epoch ? nlohmann::json(*h.best_epoch) : nlohmann::json()},
          {"best_val_recall", optional_json(h.best_val_recall)}};
}

TrainHistory history_from_json(const nlohmann::json& j) {
  TrainHistory h;
  for (const auto& r : j.at("epochs")) h.epochs.push_back(epoch_record_from_json(r));
  h.learning_rates = j.at("learning_rates").get<std::vector<double>>();
  if (!j.at("best_epoch").is_null()) h.best_epoch = j.at("best_epoch").get<std::size_t>();
  if (!j.at("best_val_recall").is_null()) h.best_val_recall = j.at("best_val_recall").get<double>();
  return h;
}

// --- checkpoints ------------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  encode_params(c.params, w);
  w.put_magic(kOptimizerMagic);
  w.put_u32(kOptimizerFormatVersion);
  w.put_u64(c.epochs_done);
  w.put_u64(c.optimizer.step);
  w.put_u64(c.optimizer.m.size());
  for (std::size_t i = 0; i < c.optimizer.m.size(); ++i) {
    w.put_u64(c.optimizer.m[i].size());
    for (double x : c.optimizer.m[i]) w.put_f64(x);
    for (double x : c.optimizer.v[i]) w.put_f64(x);
  }
  w.put_string(history_to_json(c.history).dump());
  w.put_u32(c.best ? 1 : 0);
  if (c.best) encode_params(*c.best, w);
  w.put_u32(crc32_of(w.bytes()));
  return w.take();
}

namespace {

void check_optimizer_version(std::uint32_t version, const std::string& context) {
  if (version != kOptimizerFormatVersion) {
    throw VersionError(context + ": optimizer section version " + std::to_string(version) + ", this build reads " +
                       std::to_string(kOptimizerFormatVersion));
  }
}

}  // namespace

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& context) {
  if (bytes.size() < 4) throw CorruptionError(context + ": truncated checkpoint");
  {
    // Decode the parameter header first so foreign versions report as such.
    ByteReader probe(bytes, context);
    decode_params(probe);
    if (!probe.peek_magic(kOptimizerMagic)) throw DecodeError(context + ": parameter file has no optimizer section");
    probe.expect_magic(kOptimizerMagic);
    check_optimizer_version(probe.get_u32("optimizer version"), context);
  }
  const auto payload = bytes.first(bytes.size() - 4);
  ByteReader trailer(bytes.last(4), context);
  if (trailer.get_u32("checksum") != crc32_of(payload)) {
    throw CorruptionError(context + ": checksum mismatch (truncated or corrupted checkpoint)");
  }
  ByteReader r(payload, context);
  Checkpoint c;
  c.params = decode_params(r);
  r.expect_magic(kOptimizerMagic);
  r.get_u32("optimizer version");
  c.epochs_done = r.get_u64("epochs done");
  c.optimizer.step = r.get_u64("optimizer step");
  const auto n = r.get_u64("buffer count");
  const auto named = c.params.named();
  if (n != named.size()) throw DecodeError(context + ": optimizer buffer count does not match parameters");
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto len = r.get_u64("buffer length");
    if (len != named[i].tensor.numel()) throw DecodeError(context + ": optimizer buffer size mismatch");
    std::vector<double> m(len), v(len);
    for (auto& x : m) x = r.get_f64("adam m");
    for (auto& x : v) x = r.get_f64("adam v");
    c.optimizer.m.push_back(std::move(m));
    c.optimizer.v.push_back(std::move(v));
  }
  try {
    c.history = history_from_json(nlohmann::json::parse(r.get_string("history")));
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(context + ": bad history block: " + e.what());
  }
  if (r.get_u32("best flag") != 0) c.best = decode_params(r);
  if (!r.at_end()) throw DecodeError(context + ": trailing bytes in checkpoint");
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path), path.string());
}

// --- training ---------------------------------------------------------------------

std::vector<QueryEmbedding> embed_traces(const MapperParams& params, std::span<const Trace* const> traces) {
  NoGradGuard no_grad;
  std::vector<QueryEmbedding> out;
  out.reserve(traces.size());
  for (const auto* t : traces) {
    const auto e = mapper_forward(params, t->hidden_tensor());
    out.push_back({t->trigger_id, t->conversation_id, std::vector<double>(e.data().begin(), e.data().end())});
  }
  return out;
}

double validation_recall(const MapperParams& params, std::span<const Trace* const> traces, const CorpusIndex& corpus,
                         std::size_t k) {
  const auto queries = embed_traces(params, traces);
  return evaluate_embeddings("validation", queries, corpus, k).metrics.recall;
}

TrainResult train(const TrainData& data, const MapperConfig& mapper_config, const TrainConfig& config,
                  const TrainOutput& output) {
  config.validate();
  mapper_config.validate();
  if (data.train.empty()) throw ConfigError("train: empty training set");
  if (data.corpus == nullptr) throw ConfigError("train: no corpus given");
  const auto& corpus = *data.corpus;
  if (corpus.dim != mapper_config.d) {
    throw DimensionError("train: corpus dim " + std::to_string(corpus.dim) + " vs mapper output d=" +
                         std::to_string(mapper_config.d));
  }

  std::vector<Example> examples;
  examples.reserve(data.train.size());
  for (const auto* t : data.train) {
    if (!t->teacher_embedding) throw DataError("train: trace " + t->trigger_id + " has no teacher embedding");
    if (t->teacher_embedding->size() != mapper_config.d) {
      throw DimensionError("train: trace " + t->trigger_id + " teacher dim " +
                           std::to_string(t->teacher_embedding->size()) + " vs d=" + std::to_string(mapper_config.d));
    }
    examples.push_back({t, t->hidden_tensor(),
                        std::vector<double>(t->teacher_embedding->begin(), t->teacher_embedding->end()), {}});
  }
  if (config.weights.rank > 0.0) {
    std::vector<std::vector<double>> teachers;
    for (const auto& e : examples) teachers.push_back(e.teacher);
    const auto cands = precompute_candidates(teachers, corpus, config.top_k);
    const std::size_t d = corpus.dim;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      std::vector<double> rows;
      rows.reserve(config.top_k * d);
      for (auto idx : cands[i].indices) {
        const auto row = corpus.row(idx);
        rows.insert(rows.end(), row.begin(), row.end());
      }
      examples[i].targets = {Tensor::from({config.top_k, d}, std::move(rows)), cands[i].scores};
    }
  }

  const std::size_t n = examples.size();
  const std::size_t batches = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = config.epochs * batches;
  const AdamConfig adam{config.beta1, config.beta2, config.adam_eps, config.weight_decay};

  const bool persist = !output.dir.empty();
  const auto ckpt_path = output.dir / "last.ckpt";
  if (persist) std::filesystem::create_directories(output.dir);

  TrainResult result;
  AdamState state;
  std::size_t start_epoch = 0;
  std::optional<MapperParams> best;
  if (persist && output.resume && std::filesystem::exists(ckpt_path)) {
    auto ckpt = load_checkpoint(ckpt_path);
    auto stored = ckpt.params.config;
    if (!(stored == mapper_config)) throw ConfigError(ckpt_path.string() + ": checkpoint was written for another mapper config");
    result.final_params = std::move(ckpt.params);
    state = std::move(ckpt.optimizer);
    start_epoch = ckpt.epochs_done;
    result.history = std::move(ckpt.history);
    best = std::move(ckpt.best);
    if (start_epoch > config.epochs) throw ConfigError(ckpt_path.string() + ": checkpoint is past the configured epochs");
  } else {
    result.final_params = init_mapper(mapper_config);
    state = AdamState::zeros_like(result.final_params.named());
  }
  auto& params = result.final_params;
  auto& history = result.history;
  const auto named = params.named();

  // Rewrite the log from the (possibly resumed) history so it never holds epochs past the checkpoint.
  if (persist) {
    std::string log;
    for (const auto& r : history.epochs) log += epoch_record_to_json(r).dump() + "\n";
    write_text(output.dir / "history.jsonl", log);
  }

  const auto last_good = [&] {
    return persist && std::filesystem::exists(ckpt_path) ? "; last good checkpoint: " + ckpt_path.string()
                                                         : std::string("; no checkpoint written yet");
  };

  std::vector<std::size_t> order(n);
  for (std::size_t epoch = start_epoch; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (config.shuffle) Rng(Rng::derive(config.seed ^ kShuffleStream, epoch)).shuffle(order.begin(), order.end());

    EpochRecord rec;
    rec.epoch = epoch + 1;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(n, begin + config.batch_size);
      std::vector<Tensor> preds;
      std::vector<Tensor> teacher_rows;
      std::vector<RankTargets> targets;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& ex = examples[order[i]];
        try {
          preds.push_back(mapper_forward(params, ex.hidden));
        } catch (const NumericError& e) {
          throw NumericError("train: non-finite forward pass at epoch " + std::to_string(epoch + 1) + ", batch " +
                             std::to_string(b + 1) + " (" + e.what() + ")" + last_good());
        }
        teacher_rows.push_back(Tensor::from({ex.teacher.size()}, ex.teacher));
        if (config.weights.rank > 0.0) targets.push_back(ex.targets);
      }
      const Tensor teacher = stack_rows(teacher_rows);
      params.zero_grad();
      auto loss = combined_loss(preds, teacher, targets, config.weights);
      const auto& br = loss.breakdown;
      if (!finite(br.total)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(b + 1) + last_good());
      }
      loss.total.backward();
      const auto clip = clip_grad_norm(named, config.clip_norm);
      const std::size_t step = epoch * batches + b;
      const double lr = cosine_lr(step, std::max<std::size_t>(total_steps - 1, 1), config.lr_start, config.lr_end);
      try {
        adamw_step(named, state, lr, adam);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch + 1) + last_good());
      }

      history.learning_rates.push_back(lr);
      if (b == 0) rec.lr_first = lr;
      rec.lr_last = lr;
      rec.loss.total += br.total;
      rec.loss.align += br.align;
      rec.loss.contra += br.contra;
      rec.loss.rank += br.rank;
      rec.grad_norm_mean += clip.norm;
      rec.grad_norm_max = std::max(rec.grad_norm_max, clip.norm);
      rec.clipped_norm_max = std::max(rec.clipped_norm_max, clip.clipped);
      ++rec.steps;
    }
    const double steps = static_cast<double>(rec.steps);
    rec.loss.total /= steps;
    rec.loss.align /= steps;
    rec.loss.contra /= steps;
    rec.loss.rank /= steps;
    rec.grad_norm_mean /= steps;

    const bool last = epoch + 1 == config.epochs;
    if (!data.val.empty() && ((config.val_interval > 0 && (epoch + 1) % config.val_interval == 0) || last)) {
      try {
        rec.val_recall = validation_recall(params, data.val, corpus);
      } catch (const NumericError& e) {
        throw NumericError("train: non-finite parameters after epoch " + std::to_string(epoch + 1) + " (" + e.what() +
                           ")" + last_good());
      }
      if (!history.best_val_recall || *rec.val_recall > *history.best_val_recall) {
        history.best_val_recall = rec.val_recall;
        history.best_epoch = epoch + 1;
        best = params.clone();
      }
    }
    history.epochs.push_back(rec);

    const bool halt = !last && output.stop_after && epoch + 1 >= *output.stop_after;
    if (persist) {
      std::ofstream(output.dir / "history.jsonl", std::ios::app) << epoch_record_to_json(rec).dump() << "\n";
      if (last || halt || (config.checkpoint_interval > 0 && (epoch + 1) % config.checkpoint_interval == 0)) {
        save_checkpoint({params, state, epoch + 1, history, best}, ckpt_path);
      }
    }
    if (halt) {
      result.best_params = best ? std::move(*best) : params.clone();
      return result;
    }
  }

  result.best_params = best ? std::move(*best) : params.clone();
  if (persist) {
    save_params(result.best_params, output.dir / "best.hsph");
    save_params(params, output.dir / "final.hsph");
    nlohmann::json summary = history_to_json(history);
    summary.erase("learning_rates");
    summary["steps"] = history.learning_rates.size();
    summary["train_triggers"] = n;
    summary["val_triggers"] = data.val.size();
    write_text(output.dir / "summary.json", summary.dump(2) + "\n");
  }
  return result;
}

}  // namespace hsproj
