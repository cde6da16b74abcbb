#pragma once

// Blinded human-evaluation protocol: paired question sheets, judgment
// ingestion, per-group informativeness counts and inter-group Jaccard
// agreement.

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xrac/corpus.hpp"
#include "xrac/csv.hpp"
#include "xrac/errors.hpp"
#include "xrac/numerics.hpp"
#include "xrac/snippet.hpp"

namespace xrac {

struct SheetRow {
  int question_id = 0;
  std::string code;
  std::string description;
  std::string snippet_label;  // "A" or "B"
  std::string snippet_text;
  std::string doc_id;  // kept in memory only; not part of the sheet file
};

struct BlindEntry {
  int question_id = 0;
  std::string snippet_label;
  ExplainSource model = ExplainSource::Attn;
  bool operator==(const BlindEntry&) const = default;
};

struct QuestionSheet {
  std::vector<SheetRow> rows;  // two per question: A then B
  std::vector<BlindEntry> blind_map;
  std::uint64_t seed = 0;

  std::size_t n_questions() const { return rows.size() / 2; }
  bool has(int question_id, const std::string& label) const {
    return std::any_of(rows.begin(), rows.end(),
                       [&](const SheetRow& r) { return r.question_id == question_id && r.snippet_label == label; });
  }
};

struct SheetBuild {
  QuestionSheet sheet;
  std::vector<std::string> warnings;
};

// Questions are the (doc, code) pairs present in both runs, ordered by
// (doc_id, code). A seeded coin decides which model's snippet is labelled A.
inline SheetBuild build_question_sheet(const std::vector<SnippetRecord>& run_attn,
                                       const std::vector<SnippetRecord>& run_kd, const CodeTable& codes,
                                       std::uint64_t seed) {
  using Key = std::pair<std::string, std::string>;
  auto index = [](const std::vector<SnippetRecord>& run, const char* name) {
    std::map<Key, const SnippetRecord*> out;
    for (const auto& r : run) {
      if (!out.emplace(Key{r.doc_id, r.code}, &r).second) {
        throw ValidationError(std::string(name) + " run has two snippets for (" + r.doc_id + ", " + r.code + ")");
      }
    }
    return out;
  };
  const auto attn = index(run_attn, "ATTN");
  const auto kd = index(run_kd, "KD");
  SheetBuild out;
  out.sheet.seed = seed;
  Rng rng(seed);
  int qid = 0;
  for (const auto& [key, a] : attn) {
    auto it = kd.find(key);
    if (it == kd.end()) continue;
    auto code_id = codes.find(key.second);
    if (!code_id) throw ValidationError("snippet code '" + key.second + "' is not in the code table");
    ++qid;
    const bool attn_first = rng.below(2) == 0;
    const SnippetRecord* first = attn_first ? a : it->second;
    const SnippetRecord* second = attn_first ? it->second : a;
    const std::string& desc = codes[static_cast<std::size_t>(*code_id)].description;
    out.sheet.rows.push_back({qid, key.second, desc, "A", first->text, key.first});
    out.sheet.rows.push_back({qid, key.second, desc, "B", second->text, key.first});
    out.sheet.blind_map.push_back({qid, "A", attn_first ? ExplainSource::Attn : ExplainSource::Kd});
    out.sheet.blind_map.push_back({qid, "B", attn_first ? ExplainSource::Kd : ExplainSource::Attn});
  }
  if (qid == 0) out.warnings.push_back("no (document, code) pair is predicted by both models; sheet is empty");
  return out;
}

inline void write_sheet_csv(std::ostream& out, const QuestionSheet& s) {
  write_csv_row(out, {"question_id", "code", "description", "snippet_label", "snippet_text"});
  for (const auto& r : s.rows)
    write_csv_row(out, {std::to_string(r.question_id), r.code, r.description, r.snippet_label, r.snippet_text});
}

inline void write_blind_csv(std::ostream& out, const QuestionSheet& s) {
  write_csv_row(out, {"question_id", "snippet_label", "model"});
  for (const auto& b : s.blind_map) write_csv_row(out, {std::to_string(b.question_id), b.snippet_label, source_name(b.model)});
}

inline std::string sheet_csv_text(const QuestionSheet& s) {
  std::ostringstream os;
  write_sheet_csv(os, s);
  return os.str();
}

// Identifies a sheet by the bytes of its CSV form.
inline std::string sheet_fingerprint(const QuestionSheet& s) { return hex64(fnv1a(sheet_csv_text(s))); }

namespace detail {
inline int parse_int(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw ParseError("'" + s + "' is not an integer", line);
  }
}
inline std::vector<CsvRow> read_csv_file(const std::string& path, const CsvRow& header) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  auto rows = read_csv(in);
  if (rows.empty() || rows[0] != header) {
    std::string h;
    for (const auto& f : header) h += (h.empty() ? "" : ",") + f;
    throw ParseError("'" + path + "' must start with header " + h, 1);
  }
  rows.erase(rows.begin());
  rows.erase(std::remove_if(rows.begin(), rows.end(), [](const CsvRow& r) { return r.size() == 1 && r[0].empty(); }),
             rows.end());
  return rows;
}
}  // namespace detail

// Reads a sheet and, optionally, its blind map; checks the pairing invariants.
inline QuestionSheet read_question_sheet(const std::string& sheet_path, const std::string& blind_path = "") {
  QuestionSheet s;
  auto rows = detail::read_csv_file(sheet_path, {"question_id", "code", "description", "snippet_label", "snippet_text"});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != 5) throw ParseError("expected 5 fields", i + 2);
    s.rows.push_back({detail::parse_int(rows[i][0], i + 2), rows[i][1], rows[i][2], rows[i][3], rows[i][4], ""});
  }
  if (s.rows.size() % 2 != 0) throw ValidationError("sheet must hold two rows per question");
  for (std::size_t i = 0; i < s.rows.size(); i += 2) {
    const auto &a = s.rows[i], &b = s.rows[i + 1];
    if (a.question_id != b.question_id || a.snippet_label != "A" || b.snippet_label != "B" || a.code != b.code) {
      throw ValidationError("sheet rows for question " + std::to_string(a.question_id) + " are not an A/B pair");
    }
  }
  if (!blind_path.empty()) {
    auto brows = detail::read_csv_file(blind_path, {"question_id", "snippet_label", "model"});
    std::set<std::pair<int, std::string>> seen;
    for (std::size_t i = 0; i < brows.size(); ++i) {
      if (brows[i].size() != 3) throw ParseError("expected 3 fields", i + 2);
      BlindEntry e{detail::parse_int(brows[i][0], i + 2), brows[i][1], parse_source(brows[i][2])};
      if (!s.has(e.question_id, e.snippet_label) || !seen.emplace(e.question_id, e.snippet_label).second) {
        throw ValidationError("blind map entry line " + std::to_string(i + 2) + " does not match the sheet");
      }
      s.blind_map.push_back(e);
    }
    if (s.blind_map.size() != s.rows.size()) throw ValidationError("blind map does not cover every sheet row");
  }
  return s;
}

enum class Judgment { HI, I, IR };

inline const char* judgment_name(Judgment j) {
  switch (j) {
    case Judgment::HI: return "HI";
    case Judgment::I: return "I";
    case Judgment::IR: return "IR";
  }
  return "IR";
}
inline std::optional<Judgment> parse_judgment(const std::string& s) {
  if (s == "HI") return Judgment::HI;
  if (s == "I") return Judgment::I;
  if (s == "IR") return Judgment::IR;
  return std::nullopt;
}

struct AnnotationRecord {
  std::string annotator_id;
  std::string group;
  int question_id = 0;
  std::string snippet_label;
  Judgment judgment = Judgment::IR;
  bool operator==(const AnnotationRecord&) const = default;
};

// Resolved judgments, one per (annotator, question, label), sorted by that key.
struct AnnotationSet {
  std::vector<AnnotationRecord> records;
  std::string sheet_fingerprint;
  bool operator==(const AnnotationSet&) const = default;
};

struct AnnotationReject {
  std::string source;
  std::size_t line = 0;
  std::string reason;
};

struct AnnotationIngest {
  AnnotationSet annotations;
  std::vector<AnnotationReject> rejects;
  std::vector<std::string> warnings;
};

inline const CsvRow& annotation_csv_header() {
  static const CsvRow h{"annotator_id", "question_id", "snippet_label", "judgment"};
  return h;
}

// Incremental ingestion with last-write-wins over (annotator, question, label).
class AnnotationCollector {
 public:
  AnnotationCollector(const QuestionSheet& sheet, std::map<std::string, std::string> group_of,
                      std::string default_group = "")
      : sheet_(sheet), group_of_(std::move(group_of)), default_group_(std::move(default_group)) {}

  void add_csv(std::istream& in, const std::string& source) {
    std::vector<CsvRow> rows;
    try {
      rows = read_csv(in);
    } catch (const ParseError& e) {
      result_.rejects.push_back({source, e.line, e.what()});
      return;
    }
    if (rows.empty() || rows[0] != annotation_csv_header()) {
      result_.rejects.push_back({source, 1, "header must be annotator_id,question_id,snippet_label,judgment"});
      return;
    }
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r.size() == 1 && r[0].empty()) continue;
      if (r.size() != 4) {
        result_.rejects.push_back({source, i + 1, "expected 4 fields"});
        continue;
      }
      int qid = 0;
      try {
        qid = detail::parse_int(r[1], i + 1);
      } catch (const ParseError&) {
        result_.rejects.push_back({source, i + 1, "question_id '" + r[1] + "' is not an integer"});
        continue;
      }
      add(r[0], qid, r[2], r[3], source, i + 1);
    }
  }

  // Returns false (and records a reject) when the row is invalid.
  bool add(const std::string& annotator, int qid, const std::string& label, const std::string& judgment,
           const std::string& source, std::size_t line) {
    auto reject = [&](std::string why) {
      result_.rejects.push_back({source, line, std::move(why)});
      return false;
    };
    if (annotator.empty()) return reject("empty annotator_id");
    if (!sheet_.has(qid, label)) return reject("unknown question/label " + std::to_string(qid) + "/" + label);
    auto j = parse_judgment(judgment);
    if (!j) return reject("unknown judgment '" + judgment + "'");
    std::string group = default_group_;
    if (auto it = group_of_.find(annotator); it != group_of_.end()) group = it->second;
    if (group.empty()) return reject("annotator '" + annotator + "' has no group");
    auto key = std::make_tuple(annotator, qid, label);
    auto [it, inserted] = by_key_.try_emplace(key, AnnotationRecord{annotator, group, qid, label, *j});
    if (!inserted) {
      result_.warnings.push_back("duplicate judgment for (" + annotator + ", " + std::to_string(qid) + ", " + label +
                                 "): " + judgment_name(it->second.judgment) + " replaced by " + judgment_name(*j));
      it->second = AnnotationRecord{annotator, group, qid, label, *j};
    }
    return true;
  }

  AnnotationIngest finish() const {
    AnnotationIngest out = result_;
    out.annotations.sheet_fingerprint = sheet_fingerprint(sheet_);
    for (const auto& [k, rec] : by_key_) out.annotations.records.push_back(rec);
    return out;
  }

 private:
  const QuestionSheet& sheet_;
  std::map<std::string, std::string> group_of_;
  std::string default_group_;
  std::map<std::tuple<std::string, int, std::string>, AnnotationRecord> by_key_;
  AnnotationIngest result_;
};

inline AnnotationIngest ingest_annotations(const QuestionSheet& sheet, const std::vector<std::string>& files,
                                           const std::map<std::string, std::string>& group_of,
                                           const std::string& default_group = "") {
  AnnotationCollector col(sheet, group_of, default_group);
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw ValidationError("cannot open annotations '" + f + "'");
    col.add_csv(in, f);
  }
  return col.finish();
}

inline void write_annotations_csv(std::ostream& out, const AnnotationSet& set) {
  write_csv_row(out, annotation_csv_header());
  for (const auto& r : set.records)
    write_csv_row(out, {r.annotator_id, std::to_string(r.question_id), r.snippet_label, judgment_name(r.judgment)});
}

// Winner among a group's judgments of one snippet; ties go to the less
// informative class (IR, then I, then HI).
inline Judgment majority_judgment(const std::array<int, 3>& counts) {
  Judgment best = Judgment::IR;
  int best_n = counts[2];
  if (counts[1] > best_n) {
    best = Judgment::I;
    best_n = counts[1];
  }
  if (counts[0] > best_n) best = Judgment::HI;
  return best;
}

// (group, question, label) -> majority judgment.
inline std::map<std::tuple<std::string, int, std::string>, Judgment> group_judgments(const AnnotationSet& set) {
  std::map<std::tuple<std::string, int, std::string>, std::array<int, 3>> counts;
  for (const auto& r : set.records) ++counts[{r.group, r.question_id, r.snippet_label}][static_cast<int>(r.judgment)];
  std::map<std::tuple<std::string, int, std::string>, Judgment> out;
  for (const auto& [k, c] : counts) out.emplace(k, majority_judgment(c));
  return out;
}

inline double informativeness_percent(std::size_t hi, std::size_t i, std::size_t ir) {
  const std::size_t total = hi + i + ir;
  return total ? 100.0 * static_cast<double>(hi + i) / static_cast<double>(total) : 0.0;
}

struct InformativenessCounts {
  std::size_t hi = 0, i = 0, ir = 0;
  std::size_t uncovered = 0;  // questions with no judgment from the group
  double percent() const { return informativeness_percent(hi, i, ir); }
};

// [group][model] counts over the questions each group judged.
using InformativenessReport = std::map<std::string, std::map<ExplainSource, InformativenessCounts>>;

inline InformativenessReport informativeness_report(const AnnotationSet& set, const std::vector<BlindEntry>& blind_map,
                                                    std::vector<std::string>* warnings = nullptr) {
  const auto majority = group_judgments(set);
  std::set<std::string> groups;
  for (const auto& r : set.records) groups.insert(r.group);
  InformativenessReport out;
  for (const auto& g : groups) {
    auto& per = out[g];
    per[ExplainSource::Attn];
    per[ExplainSource::Kd];
    for (const auto& b : blind_map) {
      auto it = majority.find({g, b.question_id, b.snippet_label});
      auto& c = per[b.model];
      if (it == majority.end()) {
        ++c.uncovered;
        continue;
      }
      switch (it->second) {
        case Judgment::HI: ++c.hi; break;
        case Judgment::I: ++c.i; break;
        case Judgment::IR: ++c.ir; break;
      }
    }
    if (warnings) {
      for (auto& [model, c] : per) {
        if (c.uncovered) {
          warnings->push_back("group " + g + ": " + std::to_string(c.uncovered) + " " + source_name(model) +
                              " snippets have no judgment and are excluded");
        }
      }
    }
  }
  return out;
}

// |A ∩ B| / |A ∪ B|, 1 when both are empty.
inline double jaccard(const std::set<int>& a, const std::set<int>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t inter = 0;
  for (int x : a) inter += b.count(x);
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

struct JaccardScores {
  double hi = 1.0;
  double i = 1.0;
};

// Each annotation set is treated as one group (all of its annotators).
inline std::map<ExplainSource, JaccardScores> jaccard_agreement(const AnnotationSet& a, const AnnotationSet& b,
                                                                const std::vector<BlindEntry>& blind_map) {
  if (a.sheet_fingerprint != b.sheet_fingerprint) throw ValidationError("annotation sets refer to different sheets");
  auto as_one_group = [](const AnnotationSet& s) {
    AnnotationSet c = s;
    for (auto& r : c.records) r.group = "*";
    return group_judgments(c);
  };
  const auto ma = as_one_group(a);
  const auto mb = as_one_group(b);
  std::map<ExplainSource, JaccardScores> out;
  for (ExplainSource model : {ExplainSource::Attn, ExplainSource::Kd}) {
    std::set<int> a_hi, b_hi, a_i, b_i;
    for (const auto& e : blind_map) {
      if (e.model != model) continue;
      const std::tuple<std::string, int, std::string> key{"*", e.question_id, e.snippet_label};
      if (auto it = ma.find(key); it != ma.end()) {
        if (it->second == Judgment::HI) a_hi.insert(e.question_id);
        if (it->second == Judgment::I) a_i.insert(e.question_id);
      }
      if (auto it = mb.find(key); it != mb.end()) {
        if (it->second == Judgment::HI) b_hi.insert(e.question_id);
        if (it->second == Judgment::I) b_i.insert(e.question_id);
      }
    }
    out[model] = {jaccard(a_hi, b_hi), jaccard(a_i, b_i)};
  }
  return out;
}

// Per model: counts and percent for both groups plus the two Jaccard scores.
inline json agreement_report(const AnnotationSet& group_a, const AnnotationSet& group_b,
                             const std::vector<BlindEntry>& blind_map, std::vector<std::string>* warnings = nullptr) {
  auto rep_a = informativeness_report(group_a, blind_map, warnings);
  auto rep_b = informativeness_report(group_b, blind_map, warnings);
  auto jac = jaccard_agreement(group_a, group_b, blind_map);
  auto counts_json = [](const InformativenessReport& rep, ExplainSource m) {
    InformativenessCounts c;
    for (const auto& [g, per] : rep) {
      auto it = per.find(m);
      if (it == per.end()) continue;
      c.hi += it->second.hi;
      c.i += it->second.i;
      c.ir += it->second.ir;
      c.uncovered += it->second.uncovered;
    }
    return json{{"HI", c.hi}, {"I", c.i}, {"IR", c.ir}, {"uncovered", c.uncovered}, {"percent", c.percent()}};
  };
  json models = json::object();
  for (ExplainSource m : {ExplainSource::Attn, ExplainSource::Kd}) {
    models[source_name(m)] = {{"group_a", counts_json(rep_a, m)},
                              {"group_b", counts_json(rep_b, m)},
                              {"jaccard_HI", jac[m].hi},
                              {"jaccard_I", jac[m].i}};
  }
  return {{"models", std::move(models)}, {"questions", blind_map.size() / 2}};
}

}  // namespace xrac
