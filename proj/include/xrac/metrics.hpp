#pragma once

// Multi-label evaluation: standard F1 (macro, micro), ROC-AUC (macro, micro),
// precision@n and ancestor-closure hierarchical F1.

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xrac/corpus.hpp"
#include "xrac/errors.hpp"

namespace xrac {

using GoldSets = std::vector<std::set<int>>;

struct PredictionRun {
  std::vector<std::string> doc_ids;
  std::vector<std::vector<double>> scores;  // n_docs x n_y in [0, 1]
  double threshold = 0.5;

  std::size_t n_codes() const { return scores.empty() ? 0 : scores.front().size(); }
  // Codes scoring strictly above the threshold.
  std::set<int> predicted(std::size_t doc) const {
    std::set<int> out;
    for (std::size_t i = 0; i < scores[doc].size(); ++i)
      if (scores[doc][i] > threshold) out.insert(static_cast<int>(i));
    return out;
  }
};

namespace detail {
inline void check_run(const PredictionRun& run, const GoldSets& gold) {
  if (run.scores.size() != gold.size()) throw DomainError("metrics: run and gold sizes differ");
  for (const auto& row : run.scores)
    if (row.size() != run.n_codes()) throw DomainError("metrics: ragged score matrix");
}
inline double f1(double tp, double fp, double fn) {
  const double denom = 2.0 * tp + fp + fn;
  return denom > 0 ? 2.0 * tp / denom : 0.0;
}
}  // namespace detail

struct F1Scores {
  double macro = 0.0;
  double micro = 0.0;
};

// A code with no gold and no predicted positives scores 0 in the macro mean.
inline F1Scores micro_macro_f1(const PredictionRun& run, const GoldSets& gold) {
  detail::check_run(run, gold);
  const std::size_t ny = run.n_codes();
  std::vector<double> tp(ny), fp(ny), fn(ny);
  for (std::size_t d = 0; d < gold.size(); ++d) {
    const auto pred = run.predicted(d);
    for (std::size_t i = 0; i < ny; ++i) {
      const bool p = pred.count(static_cast<int>(i)) != 0;
      const bool g = gold[d].count(static_cast<int>(i)) != 0;
      tp[i] += p && g;
      fp[i] += p && !g;
      fn[i] += !p && g;
    }
  }
  F1Scores out;
  double TP = 0, FP = 0, FN = 0;
  for (std::size_t i = 0; i < ny; ++i) {
    out.macro += detail::f1(tp[i], fp[i], fn[i]);
    TP += tp[i];
    FP += fp[i];
    FN += fn[i];
  }
  out.macro = ny ? out.macro / static_cast<double>(ny) : 0.0;
  out.micro = detail::f1(TP, FP, FN);
  return out;
}

// Mean over documents of |top-n ∩ gold| / n; score ties go to the lower code id.
inline double precision_at_n(const PredictionRun& run, const GoldSets& gold, std::size_t n) {
  detail::check_run(run, gold);
  if (n < 1) throw DomainError("precision_at_n: n must be >= 1");
  if (n > run.n_codes()) throw DomainError("precision_at_n: n exceeds the number of codes");
  if (gold.empty()) return 0.0;
  double total = 0.0;
  std::vector<int> order(run.n_codes());
  for (std::size_t d = 0; d < gold.size(); ++d) {
    std::iota(order.begin(), order.end(), 0);
    const auto& s = run.scores[d];
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                      [&](int a, int b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
    std::size_t hits = 0;
    for (std::size_t k = 0; k < n; ++k) hits += gold[d].count(order[k]);
    total += static_cast<double>(hits) / static_cast<double>(n);
  }
  return total / static_cast<double>(gold.size());
}

// Mann-Whitney AUC over (score, is_positive) pairs; tied scores count 1/2.
inline std::optional<double> rank_auc(std::vector<std::pair<double, bool>> pairs) {
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double pos = 0, neg = 0, pos_rank_sum = 0;
  for (std::size_t i = 0; i < pairs.size();) {
    std::size_t j = i;
    while (j < pairs.size() && pairs[j].first == pairs[i].first) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (pairs[k].second) {
        pos += 1;
        pos_rank_sum += avg_rank;
      } else {
        neg += 1;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return (pos_rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

struct AucScores {
  std::optional<double> macro;  // absent when no code has both classes
  double micro = 0.0;
  std::size_t macro_codes = 0;  // codes that entered the macro mean
};

inline AucScores auc(const PredictionRun& run, const GoldSets& gold) {
  detail::check_run(run, gold);
  std::vector<std::pair<double, bool>> pooled;
  AucScores out;
  double macro_sum = 0.0;
  for (std::size_t i = 0; i < run.n_codes(); ++i) {
    std::vector<std::pair<double, bool>> per;
    for (std::size_t d = 0; d < gold.size(); ++d) {
      per.emplace_back(run.scores[d][i], gold[d].count(static_cast<int>(i)) != 0);
      pooled.push_back(per.back());
    }
    if (auto a = rank_auc(std::move(per))) {
      macro_sum += *a;
      ++out.macro_codes;
    }
  }
  auto micro = rank_auc(std::move(pooled));
  if (!micro) throw DomainError("auc: need at least one positive and one negative pair");
  out.micro = *micro;
  if (out.macro_codes) out.macro = macro_sum / static_cast<double>(out.macro_codes);
  return out;
}

// Code plus all of its ancestors.
inline std::set<int> ancestor_closure(const std::set<int>& s, const CodeTable& codes) {
  std::set<int> out;
  for (int c : s)
    for (int p = c; p >= 0 && out.insert(p).second; p = codes.parent_of(p)) {
    }
  return out;
}

inline double hierarchical_set_f1(const PredictionRun& run, const GoldSets& gold, const CodeTable& codes) {
  detail::check_run(run, gold);
  if (run.n_codes() != codes.size()) throw DomainError("hierarchical_set_f1: code table size mismatch");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t d = 0; d < gold.size(); ++d) {
    const auto p = ancestor_closure(run.predicted(d), codes);
    const auto g = ancestor_closure(gold[d], codes);
    for (int c : p) (g.count(c) ? tp : fp) += 1;
    for (int c : g)
      if (!p.count(c)) fn += 1;
  }
  return detail::f1(tp, fp, fn);
}

struct MetricsReport {
  std::optional<double> macro_auc;
  double micro_auc = 0.0;
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
  std::map<std::size_t, double> precision_at;
  double hier_set_f1 = 0.0;
  double threshold = 0.5;
  std::size_t macro_auc_codes = 0;
};

// Precision@n is reported for each requested n that does not exceed n_y.
inline MetricsReport evaluate_run(const PredictionRun& run, const GoldSets& gold, const CodeTable& codes,
                                  const std::vector<std::size_t>& ns = {5, 8, 15}) {
  MetricsReport r;
  r.threshold = run.threshold;
  const auto a = auc(run, gold);
  r.macro_auc = a.macro;
  r.micro_auc = a.micro;
  r.macro_auc_codes = a.macro_codes;
  const auto f = micro_macro_f1(run, gold);
  r.macro_f1 = f.macro;
  r.micro_f1 = f.micro;
  for (std::size_t n : ns)
    if (n <= run.n_codes()) r.precision_at[n] = precision_at_n(run, gold, n);
  r.hier_set_f1 = hierarchical_set_f1(run, gold, codes);
  return r;
}

inline json report_to_json(const MetricsReport& r) {
  json p = json::object();
  for (auto& [n, v] : r.precision_at) p[std::to_string(n)] = v;
  return {{"macro_auc", r.macro_auc ? json(*r.macro_auc) : json(nullptr)},
          {"macro_auc_codes", r.macro_auc_codes},
          {"micro_auc", r.micro_auc},
          {"macro_f1", r.macro_f1},
          {"micro_f1", r.micro_f1},
          {"precision_at", std::move(p)},
          {"hier_set_f1", r.hier_set_f1},
          {"threshold", r.threshold}};
}

// Aligned text table, values in percent, one row per named run.
inline std::string format_metrics_table(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                                        const std::vector<std::size_t>& ns = {5, 8, 15}) {
  std::ostringstream os;
  std::size_t name_w = 5;
  for (const auto& [name, _] : rows) name_w = std::max(name_w, name.size());
  auto pct = [](std::optional<double> v) {
    if (!v) return std::string("-");
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * *v);
    return std::string(buf);
  };
  auto cell = [&](const std::string& s, int w = 7) {
    os << std::setw(w) << s;
  };
  os << std::left << std::setw(static_cast<int>(name_w)) << "Model" << std::right << " |";
  cell("AUC");
  cell("");
  os << " |";
  cell("F1");
  cell("");
  os << " |";
  cell("P@n");
  for (std::size_t i = 1; i < ns.size(); ++i) cell("");
  os << " |";
  cell("Hier F1", 9);
  os << '\n';
  os << std::left << std::setw(static_cast<int>(name_w)) << "" << std::right << " |";
  cell("Macro");
  cell("Micro");
  os << " |";
  cell("Macro");
  cell("Micro");
  os << " |";
  for (std::size_t n : ns) cell(std::to_string(n));
  os << " |";
  cell("Set", 9);
  os << '\n';
  for (const auto& [name, r] : rows) {
    os << std::left << std::setw(static_cast<int>(name_w)) << name << std::right << " |";
    cell(pct(r.macro_auc));
    cell(pct(r.micro_auc));
    os << " |";
    cell(pct(r.macro_f1));
    cell(pct(r.micro_f1));
    os << " |";
    for (std::size_t n : ns) {
      auto it = r.precision_at.find(n);
      cell(it == r.precision_at.end() ? "-" : pct(it->second));
    }
    os << " |";
    cell(pct(r.hier_set_f1), 9);
    os << '\n';
  }
  return os.str();
}

}  // namespace xrac
