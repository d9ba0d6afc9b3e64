#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "esrs/datapipe.hpp"
#include "esrs/error.hpp"

namespace esrs {

/// Candidate order for one context, best first. A thresholded ranking may
/// hold the virtual NONE answer (index kNone) at rank 1.
struct Ranking {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  std::string id;
  std::vector<std::size_t> order;
  std::vector<double> scores;  // parallel to `order`

  bool has_none() const { return !order.empty() && order.front() == kNone; }
  double top_score() const { return scores.empty() ? 0.0 : scores.front(); }

  bool operator==(const Ranking&) const = default;
};

/// Stable descending sort of scores; ties keep ascending candidate index.
inline Ranking rank(const std::string& id, const std::vector<double>& scores) {
  Ranking r;
  r.id = id;
  r.order.resize(scores.size());
  std::iota(r.order.begin(), r.order.end(), std::size_t{0});
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  for (auto i : r.order) r.scores.push_back(scores[i]);
  return r;
}

inline Ranking rank(const CandidateSet& set, const std::vector<double>& scores) {
  if (scores.size() != set.candidates.size()) {
    throw ContractError("rank: " + std::to_string(scores.size()) + " scores for " +
                        std::to_string(set.candidates.size()) + " candidates in '" + set.id + "'");
  }
  return rank(set.id, scores);
}

/// 1-based ranks of the correct answers, ascending. An empty correct set is
/// answered only by NONE.
inline std::vector<std::size_t> correct_ranks(const Ranking& r, const std::vector<std::size_t>& correct) {
  std::vector<std::size_t> ranks;
  for (std::size_t pos = 0; pos < r.order.size(); ++pos) {
    const std::size_t c = r.order[pos];
    const bool hit = c == Ranking::kNone
                         ? correct.empty()
                         : std::find(correct.begin(), correct.end(), c) != correct.end();
    if (hit) ranks.push_back(pos + 1);
  }
  return ranks;
}

namespace detail {

inline void require_aligned(std::size_t rankings, std::size_t gold) {
  if (rankings != gold) {
    throw ContractError("metric: " + std::to_string(rankings) + " rankings vs " +
                        std::to_string(gold) + " gold sets");
  }
}

}  // namespace detail

using GoldSets = std::vector<std::vector<std::size_t>>;

inline double recall_at_k(const std::vector<Ranking>& rankings, const GoldSets& gold, std::size_t k) {
  if (k == 0) throw ContractError("recall_at_k: k must be at least 1");
  detail::require_aligned(rankings.size(), gold.size());
  if (rankings.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < rankings.size(); ++i) {
    const auto ranks = correct_ranks(rankings[i], gold[i]);
    if (!ranks.empty() && ranks.front() <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

inline double mrr(const std::vector<Ranking>& rankings, const GoldSets& gold) {
  detail::require_aligned(rankings.size(), gold.size());
  if (rankings.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < rankings.size(); ++i) {
    const auto ranks = correct_ranks(rankings[i], gold[i]);
    if (!ranks.empty()) total += 1.0 / static_cast<double>(ranks.front());
  }
  return total / static_cast<double>(rankings.size());
}

inline double average_precision(const Ranking& r, const std::vector<std::size_t>& correct) {
  const auto ranks = correct_ranks(r, correct);
  if (ranks.empty()) return 0.0;
  double ap = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i)
    ap += static_cast<double>(i + 1) / static_cast<double>(ranks[i]);
  return ap / static_cast<double>(ranks.size());
}

inline double mean_average_precision(const std::vector<Ranking>& rankings, const GoldSets& gold) {
  detail::require_aligned(rankings.size(), gold.size());
  if (rankings.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < rankings.size(); ++i) total += average_precision(rankings[i], gold[i]);
  return total / static_cast<double>(rankings.size());
}

/// Puts NONE at rank 1 (score θ) when the top score falls below θ.
inline Ranking apply_threshold(const Ranking& r, double theta) {
  if (r.has_none() || r.order.empty() || r.top_score() >= theta) return r;
  Ranking out = r;
  out.order.insert(out.order.begin(), Ranking::kNone);
  out.scores.insert(out.scores.begin(), theta);
  return out;
}

inline std::vector<Ranking> apply_threshold(const std::vector<Ranking>& rs, double theta) {
  std::vector<Ranking> out;
  out.reserve(rs.size());
  for (const auto& r : rs) out.push_back(apply_threshold(r, theta));
  return out;
}

/// Threshold grid 0.50, 0.51, ..., 0.99.
inline std::vector<double> threshold_grid() {
  std::vector<double> g;
  for (int i = 50; i <= 99; ++i) g.push_back(i / 100.0);
  return g;
}

/// Grid θ maximizing (R@1 + MRR) / 2 with NONE as a virtual candidate;
/// ties go to the smallest θ.
inline double select_threshold(const std::vector<Ranking>& dev, const GoldSets& gold) {
  if (dev.empty()) throw ContractError("select_threshold: no dev cases");
  detail::require_aligned(dev.size(), gold.size());
  double best_theta = 0.5, best = -1.0;
  for (double theta : threshold_grid()) {
    const auto t = apply_threshold(dev, theta);
    const double objective = (recall_at_k(t, gold, 1) + mrr(t, gold)) / 2.0;
    if (objective > best) {
      best = objective;
      best_theta = theta;
    }
  }
  return best_theta;
}

struct EvalReport {
  double r1 = 0, r10 = 0, r50 = 0, mrr = 0, map = 0;
  std::size_t cases = 0;
  std::optional<double> threshold;

  nlohmann::json to_json() const {
    nlohmann::json j{{"R@1", r1}, {"R@10", r10}, {"R@50", r50}, {"MRR", mrr}, {"MAP", map}, {"cases", cases}};
    j["threshold"] = threshold ? nlohmann::json(*threshold) : nlohmann::json(nullptr);
    return j;
  }
};

inline EvalReport evaluate(const std::vector<Ranking>& rankings, const GoldSets& gold,
                           std::optional<double> threshold = std::nullopt) {
  const auto rs = threshold ? apply_threshold(rankings, *threshold) : rankings;
  EvalReport e;
  e.r1 = recall_at_k(rs, gold, 1);
  e.r10 = recall_at_k(rs, gold, 10);
  e.r50 = recall_at_k(rs, gold, 50);
  e.mrr = mrr(rs, gold);
  e.map = mean_average_precision(rs, gold);
  e.cases = rs.size();
  e.threshold = threshold;
  return e;
}

// ---------------------------------------------------------------------------
// Score tables: TSV rows (context_id, candidate_index, score), sorted.

struct ScoreRow {
  std::string id;
  std::size_t index = 0;
  double score = 0.0;

  bool operator==(const ScoreRow&) const = default;
};

struct ScoreTable {
  std::vector<ScoreRow> rows;

  void sort() {
    std::sort(rows.begin(), rows.end(), [](const ScoreRow& a, const ScoreRow& b) {
      return a.id != b.id ? a.id < b.id : a.index < b.index;
    });
  }

  void add(const std::string& id, const std::vector<double>& scores) {
    for (std::size_t i = 0; i < scores.size(); ++i) rows.push_back({id, i, scores[i]});
  }

  /// Scores grouped by context id, candidate order restored.
  std::map<std::string, std::vector<double>> grouped() const {
    std::map<std::string, std::vector<double>> out;
    for (const auto& r : rows) {
      auto& v = out[r.id];
      if (v.size() <= r.index) v.resize(r.index + 1, std::numeric_limits<double>::quiet_NaN());
      v[r.index] = r.score;
    }
    for (const auto& [id, v] : out)
      for (std::size_t i = 0; i < v.size(); ++i)
        if (std::isnan(v[i]))
          throw ContractError("score table misses candidate " + std::to_string(i) + " of '" + id + "'");
    return out;
  }

  bool operator==(const ScoreTable&) const = default;
};

inline void write_score_table(std::ostream& out, ScoreTable t) {
  t.sort();
  char buf[64];
  for (const auto& r : t.rows) {
    std::snprintf(buf, sizeof buf, "%.9g", r.score);
    out << r.id << '\t' << r.index << '\t' << buf << '\n';
  }
}

inline ScoreTable read_score_table(std::istream& in, const std::string& source = "scores") {
  ScoreTable t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos) throw ParseError(source + ": expected 3 tab-separated columns", lineno);
    ScoreRow r;
    r.id = line.substr(0, a);
    try {
      std::size_t used = 0;
      const std::string idx = line.substr(a + 1, b - a - 1), sc = line.substr(b + 1);
      r.index = std::stoul(idx, &used);
      if (used != idx.size()) throw std::invalid_argument(idx);
      r.score = std::stod(sc, &used);
      if (used != sc.size()) throw std::invalid_argument(sc);
    } catch (const std::logic_error&) {
      throw ParseError(source + ": bad index or score", lineno);
    }
    t.rows.push_back(std::move(r));
  }
  t.sort();
  return t;
}

inline void write_score_table_file(const std::string& path, const ScoreTable& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  write_score_table(out, t);
}

inline ScoreTable read_score_table_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path + "'");
  return read_score_table(in, path);
}

/// Per-candidate mean over tables that cover identical candidate sets.
inline ScoreTable ensemble(const std::vector<ScoreTable>& tables) {
  if (tables.empty()) throw ContractError("ensemble: no score tables");
  std::vector<ScoreTable> sorted = tables;
  for (auto& t : sorted) t.sort();
  ScoreTable out;
  out.rows = sorted.front().rows;
  for (std::size_t k = 1; k < sorted.size(); ++k) {
    const auto& rows = sorted[k].rows;
    if (rows.size() != out.rows.size())
      throw ContractError("ensemble: table " + std::to_string(k) + " has a different candidate count");
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].id != out.rows[i].id || rows[i].index != out.rows[i].index)
        throw ContractError("ensemble: table " + std::to_string(k) + " misaligned at '" + rows[i].id + "'");
    }
  }
  // Running mean over sorted values: independent of table order, and exact
  // when every table agrees.
  std::vector<double> v(sorted.size());
  for (std::size_t i = 0; i < out.rows.size(); ++i) {
    for (std::size_t k = 0; k < sorted.size(); ++k) v[k] = sorted[k].rows[i].score;
    std::sort(v.begin(), v.end());
    double mean = v[0];
    for (std::size_t k = 1; k < v.size(); ++k) mean += (v[k] - mean) / static_cast<double>(k + 1);
    out.rows[i].score = mean;
  }
  return out;
}

/// Rankings for every context in a table, in context-id order.
inline std::vector<Ranking> rankings_from(const ScoreTable& t) {
  std::vector<Ranking> out;
  for (const auto& [id, scores] : t.grouped()) out.push_back(rank(id, scores));
  return out;
}

/// Gold sets aligned to `rankings` by id.
inline GoldSets gold_for(const std::vector<Ranking>& rankings, const std::vector<CandidateSet>& sets) {
  std::map<std::string, const CandidateSet*> by_id;
  for (const auto& s : sets) by_id[s.id] = &s;
  GoldSets gold;
  for (const auto& r : rankings) {
    const auto it = by_id.find(r.id);
    if (it == by_id.end()) throw ContractError("no gold candidate set for '" + r.id + "'");
    gold.push_back(it->second->correct);
  }
  return gold;
}

inline nlohmann::json ranking_json(const Ranking& r) {
  nlohmann::json order = nlohmann::json::array();
  for (auto i : r.order) order.push_back(i == Ranking::kNone ? nlohmann::json("NONE") : nlohmann::json(i));
  return {{"id", r.id}, {"order", order}, {"scores", r.scores}};
}

}  // namespace esrs
