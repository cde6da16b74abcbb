#pragma once

// Split-level glue: prediction runs for either model family and the snippet
// runs that feed the question sheet.

#include <string>
#include <vector>

#include "xrac/corpus.hpp"
#include "xrac/distill.hpp"
#include "xrac/explain_attn.hpp"
#include "xrac/metrics.hpp"
#include "xrac/snippet.hpp"
#include "xrac/teacher.hpp"

namespace xrac {

inline PredictionRun teacher_run(const TeacherModel& m, const Corpus& c, const std::vector<std::size_t>& idx,
                                 double threshold = 0.5) {
  check_compatible(m, c);
  PredictionRun run;
  run.threshold = threshold;
  for (std::size_t i : idx) run.doc_ids.push_back(c.documents[i].doc_id);
  run.scores = predict_documents(m, c, idx);
  return run;
}

inline PredictionRun student_run(const StudentModels& s, const Corpus& c, const std::vector<std::size_t>& idx,
                                 double threshold = 0.5) {
  check_compatible(s, c);
  PredictionRun run;
  run.threshold = threshold;
  for (std::size_t i : idx) run.doc_ids.push_back(c.documents[i].doc_id);
  run.scores = student_predict_documents(s, c, idx);
  return run;
}

inline GoldSets gold_sets(const Corpus& c, const std::vector<std::size_t>& idx) {
  GoldSets g;
  for (std::size_t i : idx) g.push_back(c.documents[i].gold_codes);
  return g;
}

// One attention snippet per (document, predicted code); empty documents are skipped.
inline std::vector<Snippet> explain_attn_run(const TeacherModel& m, const Corpus& c,
                                             const std::vector<std::size_t>& idx, std::size_t n, std::size_t ctx,
                                             double threshold = 0.5) {
  check_compatible(m, c);
  const Tensor E = embed_code_titles(m);
  std::vector<Snippet> out;
  for (std::size_t i : idx) {
    const Document& doc = c.documents[i];
    if (doc.tokens.empty()) continue;
    const Tensor U = read_document(doc, m);
    const auto probs = predict_probs(code_attend(E, U), E, m);
    const Tensor W = code_attention_matrix(E, U);
    for (std::size_t code = 0; code < probs.size(); ++code) {
      if (!(probs[code] > threshold)) continue;
      out.push_back(extract_snippet(W.row(code), doc, n, ctx, static_cast<int>(code), ExplainSource::Attn));
    }
  }
  return out;
}

// One student-weight snippet per (document, code predicted by the students).
inline std::vector<Snippet> explain_kd_run(const StudentModels& s, const Corpus& c,
                                           const std::vector<std::size_t>& idx, std::size_t n, std::size_t ctx,
                                           double threshold = 0.5) {
  check_compatible(s, c);
  std::vector<Snippet> out;
  for (std::size_t i : idx) {
    const Document& doc = c.documents[i];
    if (doc.tokens.empty()) continue;
    const auto probs = student_predict(s, doc.bow, s.temperature);
    for (std::size_t code = 0; code < probs.size(); ++code) {
      if (!(probs[code] > threshold)) continue;
      const auto w = project_weights_to_positions(s, code, doc);
      out.push_back(extract_snippet(w, doc, n, ctx, static_cast<int>(code), ExplainSource::Kd));
    }
  }
  return out;
}

inline std::vector<SnippetRecord> to_records(const std::vector<Snippet>& snippets, const CodeTable& codes) {
  std::vector<SnippetRecord> out;
  for (const auto& s : snippets)
    out.push_back({s.doc_id, codes[s.code_id].code, s.source, s.start, s.end, s.window_score, s.text()});
  return out;
}

}  // namespace xrac
