#pragma once

// Attention explainer: per-code softmax weights over document positions,
// recomputed from the code-title embeddings and the reader output.

#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xrac/numerics.hpp"
#include "xrac/teacher.hpp"

namespace xrac {

struct AttentionMap {
  std::string doc_id;
  Tensor rows;  // n_y x n_x, each row a distribution over positions
  std::vector<int> tokens;
};

// Softmax(e_i U_x^T / sqrt(d)) for one code.
inline std::vector<double> attention_scores(const Tensor& E, const Tensor& U, std::size_t code_id) {
  if (code_id >= E.rows()) throw DomainError("attention_scores: code id out of range");
  if (E.cols() != U.cols() || U.rows() == 0) throw DomainError("attention_scores: shape mismatch");
  std::vector<double> scores(U.rows());
  for (std::size_t j = 0; j < U.rows(); ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < U.cols(); ++c) s += E(code_id, c) * U(j, c);
    scores[j] = s;
  }
  return softmax_scaled(scores, E.cols());
}

inline std::vector<double> attention_scores(const Document& doc, const TeacherModel& m, std::size_t code_id) {
  if (code_id >= m.n_codes) throw DomainError("attention_scores: code id out of range");
  if (doc.tokens.empty()) throw DomainError("attention_scores: empty document");
  Tensor e = embed_code_titles(m, {m.title_tokens[code_id]});
  Tensor U = read_document(doc, m);
  return attention_scores(e, U, 0);
}

inline AttentionMap attention_map(const Document& doc, const TeacherModel& m, const Tensor& E) {
  if (doc.tokens.empty()) throw DomainError("attention_map: empty document");
  Tensor U = read_document(doc, m);
  AttentionMap out{doc.doc_id, code_attention_matrix(E, U), {}};
  out.tokens.assign(doc.tokens.begin(), doc.tokens.begin() + static_cast<std::ptrdiff_t>(U.rows()));
  return out;
}

// One JSON object per line: {"doc_id", "code", "weights"}.
inline void write_attention_jsonl(std::ostream& out, const AttentionMap& map, const CodeTable& codes,
                                  const std::vector<int>& code_ids) {
  for (int c : code_ids) {
    auto row = map.rows.row(static_cast<std::size_t>(c));
    json j{{"doc_id", map.doc_id}, {"code", codes[c].code}, {"weights", std::vector<double>(row.begin(), row.end())}};
    out << j.dump() << '\n';
  }
}

}  // namespace xrac
