#include "hsproj/retrieval_eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <boost/math/special_functions/gamma.hpp>

#include "hsproj/error.hpp"
#include "hsproj/random.hpp"

namespace hsproj {

void CorpusIndex::validate() const {
  if (dim == 0) throw ConfigError("corpus index: zero embedding dimension");
  if (embeddings.size() != doc_ids.size() * dim) {
    throw DimensionError("corpus index: " + std::to_string(embeddings.size()) + " values for " +
                         std::to_string(doc_ids.size()) + " docs of dim " + std::to_string(dim));
  }
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < doc_ids.size(); ++i) {
    if (!seen.insert(doc_ids[i]).second) throw DataError("corpus index: duplicate doc id " + doc_ids[i]);
    double sq = 0.0;
    for (double v : row(i)) sq += v * v;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-5) {
      throw DataError("corpus index: doc " + doc_ids[i] + " is not unit-norm (norm " + std::to_string(std::sqrt(sq)) +
                      ")");
    }
  }
  for (const auto& [trigger, docs] : qrels) {
    for (const auto& doc : docs) {
      if (!seen.contains(doc)) throw DataError("qrels for " + trigger + " reference unknown doc " + doc);
    }
  }
}

std::vector<ScoredDoc> topk_search(std::span<const double> query, const CorpusIndex& index, std::size_t k) {
  const std::size_t m = index.size();
  if (k > m) {
    throw ConfigError("topk_search: k=" + std::to_string(k) + " exceeds corpus size " + std::to_string(m));
  }
  if (query.size() != index.dim) {
    throw DimensionError("topk_search: query dim " + std::to_string(query.size()) + " vs index dim " +
                         std::to_string(index.dim));
  }
  std::vector<ScoredDoc> scored(m);
  const double* base = index.embeddings.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = base + i * index.dim;
    double s = 0.0;
    for (std::size_t j = 0; j < index.dim; ++j) s += query[j] * r[j];
    scored[i] = {i, s};
  }
  const auto better = [](const ScoredDoc& a, const ScoredDoc& b) {
    return a.score > b.score || (a.score == b.score && a.index < b.index);
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(), better);
  scored.resize(k);
  return scored;
}

TriggerMetrics score_ranking(std::span<const ScoredDoc> ranked, const std::vector<std::string>& doc_ids,
                             const std::set<std::string>& relevant, std::size_t k) {
  TriggerMetrics m;
  if (relevant.empty()) return m;
  const std::size_t depth = std::min(k, ranked.size());
  double dcg = 0.0;
  for (std::size_t r = 0; r < depth; ++r) {
    if (!relevant.contains(doc_ids.at(ranked[r].index))) continue;
    if (!m.hit) {
      m.hit = true;
      m.reciprocal_rank = 1.0 / static_cast<double>(r + 1);
    }
    dcg += 1.0 / std::log2(static_cast<double>(r + 2));
  }
  double ideal = 0.0;
  const std::size_t ideal_depth = std::min(k, relevant.size());
  for (std::size_t r = 0; r < ideal_depth; ++r) ideal += 1.0 / std::log2(static_cast<double>(r + 2));
  m.ndcg = dcg / ideal;
  return m;
}

std::vector<PerTriggerResult> score_rankings(std::span<const Ranking> rankings, const CorpusIndex& index,
                                             std::size_t k) {
  std::vector<std::string> missing;
  for (const auto& r : rankings)
    if (!index.qrels.contains(r.trigger_id)) missing.push_back(r.trigger_id);
  if (!missing.empty()) {
    std::string msg = "missing qrels entries for " + std::to_string(missing.size()) + " trigger(s):";
    for (const auto& id : missing) msg += " " + id;
    throw DataError(msg);
  }
  std::vector<PerTriggerResult> out;
  out.reserve(rankings.size());
  for (const auto& r : rankings) {
    const auto& relevant = index.qrels.at(r.trigger_id);
    const auto m = score_ranking(r.docs, index.doc_ids, relevant, k);
    PerTriggerResult res;
    res.trigger_id = r.trigger_id;
    res.conversation_id = r.conversation_id;
    res.ranked = r.docs;
    if (res.ranked.size() > k) res.ranked.resize(k);
    res.relevant_count = relevant.size();
    res.hit = m.hit;
    res.reciprocal_rank = m.reciprocal_rank;
    res.ndcg = m.ndcg;
    out.push_back(std::move(res));
  }
  return out;
}

AggregateMetrics aggregate(std::span<const PerTriggerResult> results) {
  AggregateMetrics a;
  for (const auto& r : results) {
    if (r.relevant_count == 0) {
      ++a.excluded;
      continue;
    }
    ++a.judged;
    a.recall += r.hit ? 1.0 : 0.0;
    a.mrr += r.reciprocal_rank;
    a.ndcg += r.ndcg;
  }
  if (a.judged > 0) {
    const double n = static_cast<double>(a.judged);
    a.recall /= n;
    a.mrr /= n;
    a.ndcg /= n;
  }
  return a;
}

double recall_at_k(std::span<const Ranking> rankings, const CorpusIndex& index, std::size_t k) {
  return aggregate(score_rankings(rankings, index, k)).recall;
}

double mrr_at_k(std::span<const Ranking> rankings, const CorpusIndex& index, std::size_t k) {
  return aggregate(score_rankings(rankings, index, k)).mrr;
}

double ndcg_at_k(std::span<const Ranking> rankings, const CorpusIndex& index, std::size_t k) {
  return aggregate(score_rankings(rankings, index, k)).ndcg;
}

double random_chance_recall(const CorpusIndex& index, std::span<const std::string> trigger_ids, std::size_t k) {
  const double m = static_cast<double>(index.size());
  double total = 0.0;
  std::size_t judged = 0;
  for (const auto& id : trigger_ids) {
    const auto it = index.qrels.find(id);
    if (it == index.qrels.end() || it->second.empty()) continue;
    const double r = static_cast<double>(it->second.size());
    // P(no relevant doc among k uniform draws without replacement).
    double miss = 1.0;
    for (std::size_t i = 0; i < k; ++i) miss *= std::max(0.0, (m - r - static_cast<double>(i)) / (m - static_cast<double>(i)));
    total += 1.0 - miss;
    ++judged;
  }
  return judged ? total / static_cast<double>(judged) : 0.0;
}

EvalReport evaluate_embeddings(std::string system, std::span<const QueryEmbedding> queries, const CorpusIndex& index,
                               std::size_t k) {
  std::vector<Ranking> rankings;
  rankings.reserve(queries.size());
  for (const auto& q : queries) rankings.push_back({q.trigger_id, q.conversation_id, topk_search(q.embedding, index, k)});
  return make_report(std::move(system), score_rankings(rankings, index, k), k);
}

// --- statistics ------------------------------------------------------------------

ConfidenceInterval bootstrap_ci(std::span<const double> ours, std::span<const double> baseline, std::size_t resamples,
                                std::uint64_t seed) {
  if (ours.size() != baseline.size()) {
    throw ContractError("bootstrap_ci: paired vectors differ in length (" + std::to_string(ours.size()) + " vs " +
                        std::to_string(baseline.size()) + ")");
  }
  if (ours.empty()) throw ContractError("bootstrap_ci: empty input");
  if (resamples == 0) throw ConfigError("bootstrap_ci: resamples must be >= 1");
  const std::size_t n = ours.size();
  std::vector<double> delta(n);
  for (std::size_t i = 0; i < n; ++i) delta[i] = ours[i] - baseline[i];

  ConfidenceInterval ci;
  ci.delta = std::accumulate(delta.begin(), delta.end(), 0.0) / static_cast<double>(n);

  Rng rng(seed);
  std::vector<double> means(resamples);
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += delta[rng.uniform_int(0, n - 1)];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const auto percentile = [&](double q) {
    const double pos = q * static_cast<double>(resamples - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, resamples - 1);
    const double frac = pos - static_cast<double>(lo);
    return means[lo] + frac * (means[hi] - means[lo]);
  };
  ci.lower = percentile(0.025);
  ci.upper = percentile(0.975);
  return ci;
}

double chi_square_sf(double x, double dof) {
  if (x <= 0.0) return 1.0;
  return boost::math::gamma_q(dof / 2.0, x / 2.0);
}

McNemarResult mcnemar(std::size_t b, std::size_t c) {
  McNemarResult r;
  r.b = b;
  r.c = c;
  if (b + c == 0) return r;
  const double diff = std::abs(static_cast<double>(b) - static_cast<double>(c)) - 1.0;
  r.chi2 = diff * diff / static_cast<double>(b + c);
  r.p = chi_square_sf(r.chi2, 1.0);
  return r;
}

McNemarResult mcnemar(const std::vector<bool>& ours_hits, const std::vector<bool>& base_hits) {
  if (ours_hits.size() != base_hits.size()) throw ContractError("mcnemar: paired vectors differ in length");
  std::size_t b = 0, c = 0;
  for (std::size_t i = 0; i < ours_hits.size(); ++i) {
    if (ours_hits[i] && !base_hits[i]) ++b;
    if (base_hits[i] && !ours_hits[i]) ++c;
  }
  return mcnemar(b, c);
}

double WinTieLoss::agreement() const {
  const auto n = wins + ties + losses;
  return n ? static_cast<double>(ties) / static_cast<double>(n) : 1.0;
}

WinTieLoss win_tie_loss(const std::vector<bool>& ours_hits, const std::vector<bool>& base_hits) {
  if (ours_hits.size() != base_hits.size()) throw ContractError("win_tie_loss: paired vectors differ in length");
  WinTieLoss w;
  for (std::size_t i = 0; i < ours_hits.size(); ++i) {
    if (ours_hits[i] && !base_hits[i]) {
      ++w.wins;
    } else if (base_hits[i] && !ours_hits[i]) {
      ++w.losses;
    } else {
      ++w.ties;
    }
  }
  return w;
}

namespace {

void check_paired(std::span<const PerTriggerResult> ours, std::span<const PerTriggerResult> baseline) {
  if (ours.size() != baseline.size()) {
    throw ContractError("paired results differ in length (" + std::to_string(ours.size()) + " vs " +
                        std::to_string(baseline.size()) + ")");
  }
  for (std::size_t i = 0; i < ours.size(); ++i) {
    if (ours[i].trigger_id != baseline[i].trigger_id) {
      throw ContractError("paired results out of order at position " + std::to_string(i) + ": " +
                          ours[i].trigger_id + " vs " + baseline[i].trigger_id);
    }
  }
}

}  // namespace

ConversationAnalysis per_conversation_analysis(std::span<const PerTriggerResult> ours,
                                               std::span<const PerTriggerResult> baseline, std::size_t min_triggers,
                                               double gap_threshold) {
  check_paired(ours, baseline);
  struct Tally {
    std::size_t triggers = 0, ties = 0, ours_hits = 0, base_hits = 0;
  };
  std::map<std::string, Tally> tallies;
  for (std::size_t i = 0; i < ours.size(); ++i) {
    auto& t = tallies[ours[i].conversation_id];
    ++t.triggers;
    t.ties += ours[i].hit == baseline[i].hit ? 1 : 0;
    t.ours_hits += ours[i].hit ? 1 : 0;
    t.base_hits += baseline[i].hit ? 1 : 0;
  }
  ConversationAnalysis out;
  for (const auto& [id, t] : tallies) {
    const double n = static_cast<double>(t.triggers);
    ConversationRow row{id, t.triggers, static_cast<double>(t.ties) / n, static_cast<double>(t.ours_hits) / n,
                        static_cast<double>(t.base_hits) / n};
    out.mean_agreement += row.agreement;
    if (t.triggers >= min_triggers && row.baseline_recall - row.ours_recall >= gap_threshold) {
      out.failure_concentrated.push_back(id);
    }
    out.rows.push_back(std::move(row));
  }
  out.mean_agreement = out.rows.empty() ? 1.0 : out.mean_agreement / static_cast<double>(out.rows.size());
  return out;
}

// --- reports -----------------------------------------------------------------------

EvalReport make_report(std::string system, std::vector<PerTriggerResult> triggers, std::size_t k) {
  EvalReport r;
  r.system = std::move(system);
  r.k = k;
  r.metrics = aggregate(triggers);
  for (const auto& t : triggers)
    if (t.relevant_count == 0) r.excluded_triggers.push_back(t.trigger_id);
  r.triggers = std::move(triggers);
  return r;
}

void compare_reports(EvalReport& ours, const EvalReport& baseline, const ComparisonOptions& options) {
  check_paired(ours.triggers, baseline.triggers);
  std::vector<const PerTriggerResult*> a, b;
  for (std::size_t i = 0; i < ours.triggers.size(); ++i) {
    if (ours.triggers[i].relevant_count == 0) continue;
    a.push_back(&ours.triggers[i]);
    b.push_back(&baseline.triggers[i]);
  }
  if (a.empty()) throw DataError("compare_reports: no judged triggers to compare");

  const auto column = [](const std::vector<const PerTriggerResult*>& rs, auto field) {
    std::vector<double> out;
    out.reserve(rs.size());
    for (const auto* r : rs) out.push_back(field(*r));
    return out;
  };
  const auto hit = [](const PerTriggerResult& r) { return r.hit ? 1.0 : 0.0; };
  const auto rr = [](const PerTriggerResult& r) { return r.reciprocal_rank; };
  const auto ndcg = [](const PerTriggerResult& r) { return r.ndcg; };

  PairedComparison cmp;
  cmp.baseline_name = baseline.system;
  cmp.baseline = baseline.metrics;
  // Each metric gets its own resampling stream derived from the seed.
  cmp.recall = bootstrap_ci(column(a, hit), column(b, hit), options.resamples, Rng::derive(options.seed, 0));
  cmp.mrr = bootstrap_ci(column(a, rr), column(b, rr), options.resamples, Rng::derive(options.seed, 1));
  cmp.ndcg = bootstrap_ci(column(a, ndcg), column(b, ndcg), options.resamples, Rng::derive(options.seed, 2));

  std::vector<bool> ours_hits, base_hits;
  std::vector<PerTriggerResult> judged_ours, judged_base;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ours_hits.push_back(a[i]->hit);
    base_hits.push_back(b[i]->hit);
    judged_ours.push_back(*a[i]);
    judged_base.push_back(*b[i]);
  }
  cmp.mcnemar = mcnemar(ours_hits, base_hits);
  cmp.outcomes = win_tie_loss(ours_hits, base_hits);
  cmp.conversations =
      per_conversation_analysis(judged_ours, judged_base, options.min_triggers, options.gap_threshold);
  cmp.retention = baseline.metrics.recall > 0.0 ? ours.metrics.recall / baseline.metrics.recall : 0.0;
  ours.comparison = std::move(cmp);
}

namespace {

nlohmann::json metrics_json(const AggregateMetrics& m) {
  return {{"recall", m.recall}, {"mrr", m.mrr}, {"ndcg", m.ndcg}, {"judged", m.judged}, {"excluded", m.excluded}};
}

AggregateMetrics metrics_from(const nlohmann::json& j) {
  AggregateMetrics m;
  m.recall = j.at("recall").get<double>();
  m.mrr = j.at("mrr").get<double>();
  m.ndcg = j.at("ndcg").get<double>();
  m.judged = j.at("judged").get<std::size_t>();
  m.excluded = j.at("excluded").get<std::size_t>();
  return m;
}

nlohmann::json ci_json(const ConfidenceInterval& c) {
  return {{"delta", c.delta}, {"lower", c.lower}, {"upper", c.upper}};
}

ConfidenceInterval ci_from(const nlohmann::json& j) {
  return {j.at("delta").get<double>(), j.at("lower").get<double>(), j.at("upper").get<double>()};
}

}  // namespace

nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json doc;
  doc["system"] = report.system;
  doc["k"] = report.k;
  doc["metrics"] = metrics_json(report.metrics);
  doc["excluded_triggers"] = report.excluded_triggers;
  auto& triggers = doc["triggers"] = nlohmann::json::array();
  for (const auto& t : report.triggers) {
    nlohmann::json ranked = nlohmann::json::array();
    for (const auto& d : t.ranked) ranked.push_back({d.index, d.score});
    triggers.push_back({{"trigger_id", t.trigger_id},
                        {"conversation_id", t.conversation_id},
                        {"relevant_count", t.relevant_count},
                        {"hit", t.hit},
                        {"reciprocal_rank", t.reciprocal_rank},
                        {"ndcg", t.ndcg},
                        {"ranked", std::move(ranked)}});
  }
  if (report.comparison) {
    const auto& c = *report.comparison;
    nlohmann::json conv_rows = nlohmann::json::array();
    for (const auto& r : c.conversations.rows) {
      conv_rows.push_back({{"conversation_id", r.conversation_id},
                           {"triggers", r.triggers},
                           {"agreement", r.agreement},
                           {"ours_recall", r.ours_recall},
                           {"baseline_recall", r.baseline_recall}});
    }
    doc["comparison"] = {
        {"baseline_system", c.baseline_name},
        {"baseline_metrics", metrics_json(c.baseline)},
        {"delta_ci95", {{"recall", ci_json(c.recall)}, {"mrr", ci_json(c.mrr)}, {"ndcg", ci_json(c.ndcg)}}},
        {"mcnemar", {{"b", c.mcnemar.b}, {"c", c.mcnemar.c}, {"chi2", c.mcnemar.chi2}, {"p", c.mcnemar.p}}},
        {"win_tie_loss",
         {{"wins", c.outcomes.wins},
          {"ties", c.outcomes.ties},
          {"losses", c.outcomes.losses},
          {"agreement", c.outcomes.agreement()}}},
        {"conversations",
         {{"rows", std::move(conv_rows)},
          {"mean_agreement", c.conversations.mean_agreement},
          {"failure_concentrated", c.conversations.failure_concentrated}}},
        {"retention_recall", c.retention}};
  }
  return doc;
}

EvalReport report_from_json(const nlohmann::json& doc) {
  try {
    EvalReport r;
    r.system = doc.at("system").get<std::string>();
    r.k = doc.at("k").get<std::size_t>();
    r.metrics = metrics_from(doc.at("metrics"));
    r.excluded_triggers = doc.at("excluded_triggers").get<std::vector<std::string>>();
    for (const auto& t : doc.at("triggers")) {
      PerTriggerResult p;
      p.trigger_id = t.at("trigger_id").get<std::string>();
      p.conversation_id = t.at("conversation_id").get<std::string>();
      p.relevant_count = t.at("relevant_count").get<std::size_t>();
      p.hit = t.at("hit").get<bool>();
      p.reciprocal_rank = t.at("reciprocal_rank").get<double>();
      p.ndcg = t.at("ndcg").get<double>();
      for (const auto& d : t.at("ranked")) p.ranked.push_back({d.at(0).get<std::size_t>(), d.at(1).get<double>()});
      r.triggers.push_back(std::move(p));
    }
    if (doc.contains("comparison")) {
      const auto& c = doc.at("comparison");
      PairedComparison cmp;
      cmp.baseline_name = c.at("baseline_system").get<std::string>();
      cmp.baseline = metrics_from(c.at("baseline_metrics"));
      cmp.recall = ci_from(c.at("delta_ci95").at("recall"));
      cmp.mrr = ci_from(c.at("delta_ci95").at("mrr"));
      cmp.ndcg = ci_from(c.at("delta_ci95").at("ndcg"));
      const auto& m = c.at("mcnemar");
      cmp.mcnemar = {m.at("b").get<std::size_t>(), m.at("c").get<std::size_t>(), m.at("chi2").get<double>(),
                     m.at("p").get<double>()};
      const auto& w = c.at("win_tie_loss");
      cmp.outcomes = {w.at("wins").get<std::size_t>(), w.at("ties").get<std::size_t>(),
                      w.at("losses").get<std::size_t>()};
      const auto& conv = c.at("conversations");
      for (const auto& row : conv.at("rows")) {
        cmp.conversations.rows.push_back({row.at("conversation_id").get<std::string>(),
                                          row.at("triggers").get<std::size_t>(), row.at("agreement").get<double>(),
                                          row.at("ours_recall").get<double>(),
                                          row.at("baseline_recall").get<double>()});
      }
      cmp.conversations.mean_agreement = conv.at("mean_agreement").get<double>();
      cmp.conversations.failure_concentrated = conv.at("failure_concentrated").get<std::vector<std::string>>();
      cmp.retention = c.at("retention_recall").get<double>();
      r.comparison = std::move(cmp);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(std::string("eval report: ") + e.what());
  }
}

std::string render_table(const EvalReport& report) {
  std::ostringstream os;
  os << std::fixed;
  const auto k = std::to_string(report.k);
  os << std::left << std::setw(12) << "" << std::right << std::setw(18) << ("Recall@" + k) << std::setw(18)
     << ("MRR@" + k) << std::setw(18) << ("nDCG@" + k) << '\n';
  const auto row = [&](const std::string& label, const AggregateMetrics& m) {
    os << std::left << std::setw(12) << label << std::right << std::setprecision(3) << std::setw(18) << m.recall
       << std::setw(18) << m.mrr << std::setw(18) << m.ndcg << '\n';
  };
  if (report.comparison) {
    const auto& c = *report.comparison;
    row("Baseline", c.baseline);
    row("Ours", report.metrics);
    const auto pct = [](double v) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(1) << std::showpos << v * 100.0 << '%';
      return s.str();
    };
    const auto ci = [](const ConfidenceInterval& i) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(1) << '[' << i.lower * 100.0 << ", " << i.upper * 100.0 << ']';
      return s.str();
    };
    os << std::left << std::setw(12) << "Delta" << std::right << std::setw(18) << pct(c.recall.delta)
       << std::setw(18) << pct(c.mrr.delta) << std::setw(18) << pct(c.ndcg.delta) << '\n';
    os << std::left << std::setw(12) << "95% CI" << std::right << std::setw(18) << ci(c.recall) << std::setw(18)
       << ci(c.mrr) << std::setw(18) << ci(c.ndcg) << '\n';
    os << std::setprecision(2) << "McNemar: chi2 = " << c.mcnemar.chi2 << ", p = " << std::defaultfloat
       << std::setprecision(2) << c.mcnemar.p << std::fixed << " (b=" << c.mcnemar.b << ", c=" << c.mcnemar.c
       << ")\n";
    os << "Win/tie/loss: " << c.outcomes.wins << '/' << c.outcomes.ties << '/' << c.outcomes.losses
       << std::setprecision(1) << "  (agreement " << c.outcomes.agreement() * 100.0 << "%)\n";
    os << "Per-conversation agreement: " << c.conversations.mean_agreement * 100.0 << "% over "
       << c.conversations.rows.size() << " conversations; failure-concentrated: "
       << c.conversations.failure_concentrated.size() << '\n';
    os << "Retention (Recall@" << k << "): " << c.retention * 100.0 << "% of baseline\n";
  } else {
    row(report.system, report.metrics);
  }
  if (!report.excluded_triggers.empty()) {
    os << "Excluded (no qrels): " << report.excluded_triggers.size() << " trigger(s)\n";
  }
  return os.str();
}

}  // namespace hsproj
