#include "hsproj_tools/commands.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "hsproj/binary_io.hpp"
#include "hsproj/error.hpp"

namespace hsproj::tools {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

nlohmann::json read_json(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
}

void save_report(const EvalReport& report, const std::filesystem::path& dir, const std::string& stem) {
  std::filesystem::create_directories(dir);
  write_text(dir / (stem + ".json"), report_to_json(report).dump(2) + "\n");
  write_text(dir / (stem + ".txt"), render_table(report));
}

// The split used for status tagging; the training split only if no validation split exists.
const std::vector<std::string>& status_split(const SyntheticWorld& world) {
  return world.splits.val.empty() ? world.splits.train : world.splits.val;
}

std::string fmt(double v, int precision = 3, bool sign = false) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision);
  if (sign) s << std::showpos;
  s << v;
  return s.str();
}

}  // namespace

std::filesystem::path default_cache_root() {
  if (const char* env = std::getenv("HSPROJ_CACHE_ROOT"); env != nullptr && *env != '\0') return env;
  return "hsproj-cache";
}

std::filesystem::path default_world_dir(std::uint64_t seed) {
  return default_cache_root() / ("world-" + std::to_string(seed));
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e)) return kExitData;
  if (dynamic_cast<const Error*>(&e)) return kExitRuntime;
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return kExitRuntime;
  return kExitUnexpected;
}

SyntheticWorld cmd_gen_data(const ExperimentConfig& config, const std::filesystem::path& out_dir, std::ostream& log) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  auto world = generate_world(config.world);
  save_world(world, out_dir);

  RunManifest m;
  m.experiment = config.name;
  m.group = config.group;
  m.seed = config.seed;
  m.world = config.world;
  m.mapper = config.mapper;
  m.train = config.train;
  m.world_dir = out_dir;
  m.out_dir = out_dir;
  m.artifacts = {{"world", (out_dir / "world.json").string()},
                 {"corpus", (out_dir / "corpus.hcrp").string()},
                 {"traces", (out_dir / "traces" / cache_key_digest(config.world.cache_key())).string()}};
  m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto baseline = teacher_baseline_eval(world);
  m.metrics = {{"traces", static_cast<double>(world.traces.size())},
               {"docs", static_cast<double>(world.corpus.size())},
               {"teacher_test_recall", baseline.metrics.recall}};
  save_manifest(m, out_dir / "manifest.json");

  log << "world written to " << out_dir.string() << "\n"
      << "  conversations " << config.world.num_conversations << ", triggers " << world.traces.size() << ", docs "
      << world.corpus.size() << "\n"
      << "  split train/val/test: " << world.splits.train.size() << " / " << world.splits.val.size() << " / "
      << world.splits.test.size() << "\n"
      << "  teacher baseline Recall@10 on test: " << fmt(baseline.metrics.recall) << "\n";
  return world;
}

EvalReport evaluate_params(const MapperParams& params, const SyntheticWorld& world,
                           const std::vector<std::string>& trigger_ids, std::size_t k) {
  const auto traces = world.select(trigger_ids);
  return evaluate_embeddings("projection-head", embed_traces(params, traces), world.corpus, k);
}

TrainRun run_training(const SyntheticWorld& world, const std::filesystem::path& world_dir,
                      const ExperimentConfig& config, const std::filesystem::path& out_dir, std::ostream& log,
                      bool resume) {
  ExperimentConfig cfg = config;
  cfg.world = world.config;
  cfg.mapper.d_h = world.config.d_h;
  cfg.mapper.d = world.config.d;
  cfg.mapper.max_positions = world.config.max_positions;
  cfg.mapper.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  cfg.validate();

  const auto start = std::chrono::steady_clock::now();
  TrainData data{world.select(world.splits.train), world.select(world.splits.val), &world.corpus};
  TrainRun run;
  run.result = train(data, cfg.mapper, cfg.train, {out_dir, resume});

  const auto& split = status_split(world);
  const double chance = random_chance_recall(world.corpus, split);
  const auto& last = run.result.history.epochs.back();
  const double final_val =
      last.val_recall ? *last.val_recall : validation_recall(run.result.final_params, world.select(split), world.corpus);

  run.test_report = evaluate_params(run.result.best_params, world, world.splits.test);
  const auto baseline = teacher_baseline_eval(world);
  compare_reports(run.test_report, baseline, {.seed = cfg.seed});
  save_report(run.test_report, out_dir, "test_report");

  auto& m = run.manifest;
  m.experiment = cfg.name;
  m.group = cfg.group;
  m.seed = cfg.seed;
  m.world = cfg.world;
  m.mapper = cfg.mapper;
  m.train = cfg.train;
  m.world_dir = world_dir;
  m.out_dir = out_dir;
  m.artifacts = {{"best", (out_dir / "best.hsph").string()},
                 {"final", (out_dir / "final.hsph").string()},
                 {"checkpoint", (out_dir / "last.ckpt").string()},
                 {"history", (out_dir / "history.jsonl").string()},
                 {"summary", (out_dir / "summary.json").string()},
                 {"test_report", (out_dir / "test_report.json").string()}};
  m.status = final_val < 2.0 * chance ? RunStatus::kCollapsed : RunStatus::kConverged;
  m.metrics = {{"final_val_recall", final_val},
               {"random_chance_recall", chance},
               {"final_train_loss", last.loss.total},
               {"test_recall", run.test_report.metrics.recall},
               {"test_mrr", run.test_report.metrics.mrr},
               {"test_ndcg", run.test_report.metrics.ndcg},
               {"teacher_test_recall", baseline.metrics.recall},
               {"retention", run.test_report.comparison->retention}};
  if (run.result.history.best_val_recall) m.metrics["best_val_recall"] = *run.result.history.best_val_recall;
  m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  save_manifest(m, out_dir / "manifest.json");

  log << cfg.name << " (seed " << cfg.seed << "): " << to_string(m.status) << ", val Recall@10 " << fmt(final_val)
      << ", test Recall@10 " << fmt(m.metrics["test_recall"]) << " (retention "
      << fmt(100.0 * m.metrics["retention"], 1) << "%), " << fmt(m.wall_clock_seconds, 1) << " s\n";
  return run;
}

TrainRun cmd_train(const std::filesystem::path& world_dir, const ExperimentConfig& config,
                   const std::filesystem::path& out_dir, std::ostream& log, bool resume) {
  const auto world = load_world(world_dir);
  return run_training(world, world_dir, config, out_dir, log, resume);
}

TrainRun cmd_replay(const std::filesystem::path& manifest_path, const std::filesystem::path& out_dir,
                    std::ostream& log) {
  const auto m = load_manifest(manifest_path);
  const auto world = load_world(m.world_dir);
  if (!(world.config == m.world)) {
    throw DataError("world at " + m.world_dir.string() + " no longer matches the manifest's world config");
  }
  ExperimentConfig cfg;
  cfg.name = m.experiment;
  cfg.group = m.group;
  cfg.seed = m.seed;
  cfg.world = m.world;
  cfg.mapper = m.mapper;
  cfg.train = m.train;
  return run_training(world, m.world_dir, cfg, out_dir, log);
}

EvalReport cmd_eval(const EvalOptions& o, std::ostream& log) {
  const auto world = load_world(o.world_dir);
  EvalReport report;
  if (o.checkpoint) {
    const auto params = load_params(*o.checkpoint);
    if (params.config.d_h != world.config.d_h || params.config.d != world.config.d) {
      throw DimensionError(o.checkpoint->string() + ": mapper maps d_h=" + std::to_string(params.config.d_h) +
                           " -> d=" + std::to_string(params.config.d) + " but the world has d_h=" +
                           std::to_string(world.config.d_h) + ", d=" + std::to_string(world.config.d));
    }
    report = evaluate_params(params, world, world.splits.test, o.k);
  } else {
    report = teacher_baseline_eval(world, o.k);
  }
  if (o.baseline_report) {
    const auto baseline = report_from_json(read_json(*o.baseline_report));
    compare_reports(report, baseline, o.comparison);
  } else if (o.vs_teacher) {
    compare_reports(report, teacher_baseline_eval(world, o.k), o.comparison);
  }
  if (!o.out_dir.empty()) save_report(report, o.out_dir, "report");
  log << render_table(report);
  return report;
}

AblationResult cmd_ablate(const std::filesystem::path& world_dir, const AblationMatrix& matrix,
                          const ExperimentConfig& base, const std::filesystem::path& out_dir, std::ostream& log,
                          std::size_t jobs) {
  const auto world = load_world(world_dir);
  return run_ablation(world, world_dir, matrix, base, out_dir, log, jobs);
}

AblationResult run_ablation(const SyntheticWorld& world, const std::filesystem::path& world_dir,
                            const AblationMatrix& matrix, const ExperimentConfig& base,
                            const std::filesystem::path& out_dir, std::ostream& log, std::size_t jobs) {
  AblationResult out;
  for (const auto& run : matrix.runs)
    for (auto seed : matrix.seeds) out.rows.push_back({run.name, run.group, seed, {}, {}, {}, {}});

  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < out.rows.size(); i = next++) {
      auto& row = out.rows[i];
      const auto& run = matrix.runs[i / matrix.seeds.size()];
      const auto dir = out_dir / row.name / ("seed" + std::to_string(row.seed));
      std::ostringstream run_log;
      try {
        const auto cfg = apply_run(base, run, row.seed);
        auto result = run_training(world, world_dir, cfg, dir, run_log);
        row.status = result.manifest.status;
        row.report = std::move(result.test_report);
        row.manifest = dir / "manifest.json";
      } catch (const std::exception& e) {
        row.error = e.what();
        run_log << row.name << " (seed " << row.seed << "): failed: " << e.what() << "\n";
      }
      std::lock_guard lock(log_mutex);
      log << run_log.str() << std::flush;
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(jobs, 1, out.rows.size());
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }

  out.table = render_ablation_table(out.rows);
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "ablation.json", ablation_to_json(out.rows).dump(2) + "\n");
  write_text(out_dir / "ablation.txt", out.table);
  log << out.table;
  return out;
}

std::string render_ablation_table(const std::vector<AblationRow>& rows) {
  struct Line {
    const AblationRow* rep = nullptr;  // representative seed
    std::string name, group;
    std::size_t seeds = 0, failed = 0, collapsed = 0;
  };
  std::vector<Line> lines;
  for (const auto& row : rows) {
    auto it = std::find_if(lines.begin(), lines.end(), [&](const Line& l) { return l.name == row.name; });
    if (it == lines.end()) it = lines.insert(lines.end(), Line{nullptr, row.name, row.group});
    ++it->seeds;
    if (!row.report) ++it->failed;
    if (row.status == RunStatus::kCollapsed) ++it->collapsed;
  }
  for (auto& line : lines) {
    std::vector<const AblationRow*> ok;
    for (const auto& row : rows)
      if (row.name == line.name && row.report) ok.push_back(&row);
    std::sort(ok.begin(), ok.end(), [](const AblationRow* a, const AblationRow* b) {
      return a->report->metrics.recall < b->report->metrics.recall ||
             (a->report->metrics.recall == b->report->metrics.recall && a->seed < b->seed);
    });
    if (!ok.empty()) line.rep = ok[(ok.size() - 1) / 2];
  }
  std::stable_sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) {
    const double ra = a.rep ? a.rep->report->metrics.recall : -1.0;
    const double rb = b.rep ? b.rep->report->metrics.recall : -1.0;
    return ra > rb;
  });

  std::ostringstream os;
  os << std::left << std::setw(6) << "Group" << std::setw(22) << "Experiment" << std::right << std::setw(7) << "R@10"
     << std::setw(9) << "dR@10" << std::setw(18) << "95% CI" << std::setw(7) << "MRR" << std::setw(9) << "dMRR"
     << std::setw(18) << "95% CI" << "  " << std::left << std::setw(10) << "Status" << "Seeds\n";
  for (const auto& line : lines) {
    os << std::left << std::setw(6) << line.group << std::setw(22) << line.name << std::right;
    const bool collapsed = 2 * line.collapsed > line.seeds;
    std::string status = line.rep ? (collapsed ? "collapsed" : "converged") : "failed";
    if (line.rep) {
      const auto& r = *line.rep->report;
      const auto ci = [](const ConfidenceInterval& i) { return "[" + fmt(i.lower, 3, true) + ", " + fmt(i.upper, 3, true) + "]"; };
      os << std::setw(7) << fmt(r.metrics.recall);
      if (r.comparison && !collapsed) {
        os << std::setw(9) << fmt(r.comparison->recall.delta, 3, true) << std::setw(18) << ci(r.comparison->recall);
      } else {
        os << std::setw(27) << (collapsed ? "collapsed" : "-");
      }
      os << std::setw(7) << fmt(r.metrics.mrr);
      if (r.comparison && !collapsed) {
        os << std::setw(9) << fmt(r.comparison->mrr.delta, 3, true) << std::setw(18) << ci(r.comparison->mrr);
      } else {
        os << std::setw(27) << (collapsed ? "collapsed" : "-");
      }
    } else {
      os << std::setw(7) << "-" << std::setw(27) << "-" << std::setw(7) << "-" << std::setw(27) << "-";
    }
    os << "  " << std::left << std::setw(10) << status << (line.seeds - line.failed) << "/" << line.seeds << "\n";
  }
  return os.str();
}

nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& row : rows) {
    nlohmann::json j = {{"name", row.name},
                        {"group", row.group},
                        {"seed", row.seed},
                        {"status", row.status ? to_string(*row.status) : "failed"},
                        {"error", row.error},
                        {"manifest", row.manifest.string()}};
    j["report"] = row.report ? report_to_json(*row.report) : nlohmann::json();
    doc.push_back(std::move(j));
  }
  return {{"format", "hsproj-ablation"}, {"rows", doc}};
}

std::vector<AblationRow> ablation_from_json(const nlohmann::json& doc) {
  try {
    std::vector<AblationRow> rows;
    for (const auto& j : doc.at("rows")) {
      AblationRow row;
      row.name = j.at("name").get<std::string>();
      row.group = j.at("group").get<std::string>();
      row.seed = j.at("seed").get<std::uint64_t>();
      const auto status = j.at("status").get<std::string>();
      if (status != "failed") row.status = run_status_from_string(status);
      row.error = j.at("error").get<std::string>();
      row.manifest = j.at("manifest").get<std::string>();
      if (!j.at("report").is_null()) row.report = report_from_json(j.at("report"));
      rows.push_back(std::move(row));
    }
    return rows;
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(std::string("ablation results: ") + e.what());
  }
}

std::string cmd_report(const std::vector<std::filesystem::path>& paths) {
  if (paths.empty()) throw ConfigError("report: no input files");
  std::string out;
  for (const auto& path : paths) {
    const auto doc = read_json(path);
    out += "== " + path.string() + "\n";
    if (doc.is_object() && doc.value("format", "") == "hsproj-ablation") {
      out += render_ablation_table(ablation_from_json(doc));
    } else {
      out += render_table(report_from_json(doc));
    }
  }
  return out;
}

}  // namespace hsproj::tools
