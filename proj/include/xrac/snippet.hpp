#pragma once

// Evidence snippets: the n-token window with the highest mean weight, widened
// by m tokens of context on each side and clamped to the document.

#include <algorithm>
#include <cstdio>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "xrac/corpus.hpp"
#include "xrac/csv.hpp"
#include "xrac/errors.hpp"

namespace xrac {

enum class ExplainSource { Attn, Kd };

inline const char* source_name(ExplainSource s) { return s == ExplainSource::Attn ? "ATTN" : "KD"; }
inline ExplainSource parse_source(const std::string& s) {
  if (s == "ATTN") return ExplainSource::Attn;
  if (s == "KD") return ExplainSource::Kd;
  throw ValidationError("unknown explanation source '" + s + "'");
}

struct Snippet {
  std::string doc_id;
  int code_id = 0;
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  std::vector<std::string> tokens;
  double window_score = 0.0;
  ExplainSource source = ExplainSource::Attn;

  std::string text() const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out.push_back(' ');
      out += tokens[i];
    }
    return out;
  }
};

struct SnippetSpan {
  std::size_t core_start = 0;
  std::size_t start = 0;
  std::size_t end = 0;
  double window_score = 0.0;
};

// Ties resolve to the smallest start; a document shorter than n is one window.
inline SnippetSpan locate_snippet(std::span<const double> weights, std::size_t n, std::size_t m) {
  if (n < 1) throw DomainError("extract_snippet: n must be >= 1");
  if (weights.empty()) throw DomainError("extract_snippet: empty weight vector");
  const std::size_t len = weights.size();
  const std::size_t width = std::min(n, len);
  std::size_t best = 0;
  double best_sum = 0.0;
  for (std::size_t j = 0; j + width <= len; ++j) {
    double s = 0.0;
    for (std::size_t k = j; k < j + width; ++k) s += weights[k];
    if (j == 0 || s > best_sum) {
      best = j;
      best_sum = s;
    }
  }
  SnippetSpan span;
  span.core_start = best;
  span.start = best >= m ? best - m : 0;
  span.end = std::min(len, best + width + m);
  span.window_score = best_sum / static_cast<double>(width);
  return span;
}

inline Snippet extract_snippet(std::span<const double> weights, const Document& doc, std::size_t n, std::size_t m,
                               int code_id = 0, ExplainSource source = ExplainSource::Attn) {
  if (weights.size() > doc.words.size()) throw DomainError("extract_snippet: more weights than document tokens");
  SnippetSpan sp = locate_snippet(weights, n, m);
  Snippet s;
  s.doc_id = doc.doc_id;
  s.code_id = code_id;
  s.start = sp.start;
  s.end = sp.end;
  s.window_score = sp.window_score;
  s.source = source;
  s.tokens.assign(doc.words.begin() + static_cast<std::ptrdiff_t>(sp.start),
                  doc.words.begin() + static_cast<std::ptrdiff_t>(sp.end));
  return s;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline const CsvRow& snippet_csv_header() {
  static const CsvRow h{"doc_id", "code", "source", "start", "end", "window_score", "text"};
  return h;
}

inline void write_snippets_csv(std::ostream& out, const std::vector<Snippet>& snippets, const CodeTable& codes) {
  write_csv_row(out, snippet_csv_header());
  for (const auto& s : snippets) {
    write_csv_row(out, {s.doc_id, codes[s.code_id].code, source_name(s.source), std::to_string(s.start),
                        std::to_string(s.end), format_double(s.window_score), s.text()});
  }
}

// Rows of a snippet CSV; code strings stay unresolved so sheets can be built
// without a code table.
struct SnippetRecord {
  std::string doc_id;
  std::string code;
  ExplainSource source = ExplainSource::Attn;
  std::size_t start = 0, end = 0;
  double window_score = 0.0;
  std::string text;
};

inline std::vector<SnippetRecord> read_snippets_csv(std::istream& in) {
  auto rows = read_csv(in);
  if (rows.empty() || rows[0] != snippet_csv_header()) {
    throw ParseError("snippet CSV header must be doc_id,code,source,start,end,window_score,text", 1);
  }
  std::vector<SnippetRecord> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() == 1 && r[0].empty()) continue;
    if (r.size() != 7) throw ParseError("expected 7 fields", i + 1);
    try {
      out.push_back({r[0], r[1], parse_source(r[2]), std::stoul(r[3]), std::stoul(r[4]), std::stod(r[5]), r[6]});
    } catch (const std::logic_error& e) {
      throw ParseError(std::string("bad snippet row: ") + e.what(), i + 1);
    }
  }
  return out;
}

}  // namespace xrac
