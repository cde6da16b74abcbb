#pragma once

// Distillation of teacher probabilities into one sparse linear student per
// code: logits of the teacher are regressed on bag-of-words counts with an L1
// penalty, and student outputs are mapped back through expit.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "xrac/corpus.hpp"
#include "xrac/errors.hpp"
#include "xrac/numerics.hpp"
#include "xrac/teacher.hpp"

namespace xrac {

inline constexpr double kPruneBelow = 1e-10;

// Column-compressed sparse matrix; column j lists (row, value) in row order.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(const std::vector<SparseVector>& rows, std::size_t n_cols) : n_rows_(rows.size()), cols_(n_cols) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (auto [j, v] : rows[r]) {
        if (j < 0 || static_cast<std::size_t>(j) >= n_cols) throw DomainError("FeatureMatrix: feature id out of range");
        if (v != 0.0) cols_[static_cast<std::size_t>(j)].emplace_back(static_cast<int>(r), v);
      }
    }
  }
  static FeatureMatrix from_dense(const Tensor& X) {
    std::vector<SparseVector> rows(X.rows());
    for (std::size_t r = 0; r < X.rows(); ++r)
      for (std::size_t c = 0; c < X.cols(); ++c)
        if (X(r, c) != 0.0) rows[r].emplace_back(static_cast<int>(c), X(r, c));
    return FeatureMatrix(rows, X.cols());
  }

  std::size_t rows() const { return n_rows_; }
  std::size_t cols() const { return cols_.size(); }
  const std::vector<std::pair<int, double>>& column(std::size_t j) const { return cols_[j]; }

  std::vector<double> multiply(std::span<const double> w) const {
    std::vector<double> out(n_rows_, 0.0);
    for (std::size_t j = 0; j < cols_.size(); ++j) {
      if (w[j] == 0.0) continue;
      for (auto [r, v] : cols_[j]) out[static_cast<std::size_t>(r)] += v * w[j];
    }
    return out;
  }

 private:
  std::size_t n_rows_ = 0;
  std::vector<std::vector<std::pair<int, double>>> cols_;
};

inline FeatureMatrix bow_matrix(const Corpus& c, const std::vector<std::size_t>& idx) {
  std::vector<SparseVector> rows;
  rows.reserve(idx.size());
  for (std::size_t i : idx) rows.push_back(c.documents[i].bow);
  return FeatureMatrix(rows, c.vocab.size());
}

struct LassoOptions {
  double lambda = 1e-3;
  std::size_t max_iter = 800;
  double tol = 1e-7;
  bool intercept = false;
  bool keep_trace = false;
};

struct LassoFit {
  std::vector<double> weights;
  double intercept = 0.0;
  std::size_t sweeps = 0;
  bool converged = false;
  std::vector<double> objective_trace;  // after every sweep, when requested
};

inline double soft_threshold(double x, double t) {
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return 0.0;
}

// Cyclic coordinate descent (ascending feature id) on
//   ||q - X w - b||^2 + lambda * ||w||_1
// with b fixed at 0 unless opts.intercept. Throws if a sweep increases the
// objective beyond rounding.
inline LassoFit fit_lasso(const FeatureMatrix& X, std::span<const double> q, const LassoOptions& opts) {
  if (q.size() != X.rows()) throw DomainError("fit_lasso: target length differs from row count");
  if (opts.lambda < 0) throw DomainError("fit_lasso: lambda must be >= 0");
  const std::size_t p = X.cols(), n = X.rows();
  std::vector<double> sq(p, 0.0);
  for (std::size_t j = 0; j < p; ++j)
    for (auto [r, v] : X.column(j)) sq[j] += v * v;
  LassoFit fit;
  fit.weights.assign(p, 0.0);
  std::vector<double> resid(q.begin(), q.end());
  auto objective = [&]() {
    double o = 0.0;
    for (double r : resid) o += r * r;
    for (double w : fit.weights) o += opts.lambda * std::abs(w);
    return o;
  };
  double prev = objective();
  const double half_lambda = 0.5 * opts.lambda;
  for (std::size_t sweep = 0; sweep < opts.max_iter; ++sweep) {
    double max_change = 0.0;
    if (opts.intercept && n > 0) {
      double s = 0.0;
      for (double r : resid) s += r;
      const double delta = s / static_cast<double>(n);
      fit.intercept += delta;
      for (double& r : resid) r -= delta;
      max_change = std::abs(delta);
    }
    for (std::size_t j = 0; j < p; ++j) {
      if (sq[j] == 0.0) continue;
      const auto& col = X.column(j);
      double rho = 0.0;
      for (auto [r, v] : col) rho += v * resid[static_cast<std::size_t>(r)];
      const double old = fit.weights[j];
      rho += sq[j] * old;
      const double updated = soft_threshold(rho, half_lambda) / sq[j];
      const double delta = updated - old;
      if (delta == 0.0) continue;
      fit.weights[j] = updated;
      for (auto [r, v] : col) resid[static_cast<std::size_t>(r)] -= v * delta;
      max_change = std::max(max_change, std::abs(delta));
    }
    fit.sweeps = sweep + 1;
    const double obj = objective();
    if (opts.keep_trace) fit.objective_trace.push_back(obj);
    if (obj > prev + 1e-10 * (1.0 + std::abs(prev))) {
      throw EvaluationError("fit_lasso: objective increased during sweep " + std::to_string(sweep));
    }
    prev = obj;
    if (max_change < opts.tol) {
      fit.converged = true;
      break;
    }
  }
  return fit;
}

struct StudentModels {
  std::vector<SparseVector> weights;  // per code, nonzero entries only
  std::vector<double> intercepts;     // empty unless fit with an intercept
  double lambda = 1e-3;
  double temperature = 1.0;
  std::size_t max_iter = 800;
  std::string vocab_hash;
  std::size_t vocab_size = 0;

  std::size_t n_codes() const { return weights.size(); }
  double weight(std::size_t code, int feature) const {
    const auto& row = weights[code];
    auto it = std::lower_bound(row.begin(), row.end(), feature, [](const auto& e, int f) { return e.first < f; });
    return it != row.end() && it->first == feature ? it->second : 0.0;
  }
};

// Q[doc, i] = T * logit(teacher probability).
struct LogitTargets {
  std::vector<std::size_t> docs;  // corpus indices, one per row
  Tensor q;                       // n_docs x n_y
};

inline LogitTargets teacher_logits_from_probs(const std::vector<std::vector<double>>& probs,
                                              std::vector<std::size_t> docs, double temperature) {
  LogitTargets out;
  out.docs = std::move(docs);
  const std::size_t ny = probs.empty() ? 0 : probs.front().size();
  out.q = Tensor(probs.size(), ny);
  for (std::size_t r = 0; r < probs.size(); ++r)
    for (std::size_t i = 0; i < ny; ++i) out.q(r, i) = logit_transform(probs[r][i], temperature);
  return out;
}

inline LogitTargets teacher_logits(const TeacherModel& m, const Corpus& c, double temperature,
                                   const std::vector<std::size_t>& idx) {
  check_compatible(m, c);
  return teacher_logits_from_probs(predict_documents(m, c, idx), idx, temperature);
}
inline LogitTargets teacher_logits(const TeacherModel& m, const Corpus& c, double temperature) {
  return teacher_logits(m, c, temperature, c.train);
}

inline SparseVector prune(const std::vector<double>& w) {
  SparseVector out;
  for (std::size_t j = 0; j < w.size(); ++j)
    if (std::abs(w[j]) >= kPruneBelow) out.emplace_back(static_cast<int>(j), w[j]);
  return out;
}

// One independent lasso fit per code column of Q.
inline StudentModels fit_students(const FeatureMatrix& X, const LogitTargets& Q, double lambda, std::size_t max_iter,
                                  double temperature = 1.0, bool intercept = false) {
  if (!(lambda >= 0)) throw DomainError("fit_students: lambda must be >= 0");
  if (Q.q.rows() != X.rows()) throw DomainError("fit_students: target rows differ from feature rows");
  StudentModels s;
  s.lambda = lambda;
  s.temperature = temperature;
  s.max_iter = max_iter;
  s.vocab_size = X.cols();
  LassoOptions opts;
  opts.lambda = lambda;
  opts.max_iter = max_iter;
  opts.intercept = intercept;
  std::vector<double> target(X.rows());
  for (std::size_t i = 0; i < Q.q.cols(); ++i) {
    for (std::size_t r = 0; r < X.rows(); ++r) target[r] = Q.q(r, i);
    LassoFit fit = fit_lasso(X, target, opts);
    s.weights.push_back(prune(fit.weights));
    if (intercept) s.intercepts.push_back(fit.intercept);
  }
  return s;
}

inline StudentModels fit_students(const Corpus& c, const LogitTargets& Q, double lambda, std::size_t max_iter,
                                  double temperature = 1.0, bool intercept = false) {
  StudentModels s = fit_students(bow_matrix(c, Q.docs), Q, lambda, max_iter, temperature, intercept);
  s.vocab_hash = c.vocab.hash();
  return s;
}

// Raw student outputs q_s,i = <w_i, x_s> (+ b_i).
inline std::vector<double> student_logits(const StudentModels& s, const SparseVector& x) {
  std::vector<double> out(s.n_codes(), 0.0);
  for (std::size_t i = 0; i < s.n_codes(); ++i) {
    const auto& w = s.weights[i];
    double acc = s.intercepts.empty() ? 0.0 : s.intercepts[i];
    std::size_t a = 0, b = 0;
    while (a < w.size() && b < x.size()) {
      if (w[a].first < x[b].first) {
        ++a;
      } else if (w[a].first > x[b].first) {
        ++b;
      } else {
        acc += w[a++].second * x[b++].second;
      }
    }
    out[i] = acc;
  }
  return out;
}

inline std::vector<double> student_predict(const StudentModels& s, const SparseVector& x, double temperature) {
  auto q = student_logits(s, x);
  for (double& v : q) v = expit_transform(v, temperature);
  return q;
}

inline std::vector<std::vector<double>> student_predict_documents(const StudentModels& s, const Corpus& c,
                                                                  const std::vector<std::size_t>& idx) {
  std::vector<std::vector<double>> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(student_predict(s, c.documents[i].bow, s.temperature));
  return out;
}

// Vocabulary-indexed student weights laid onto document positions.
inline std::vector<double> project_weights_to_positions(const StudentModels& s, std::size_t code_id,
                                                        const Document& doc) {
  if (code_id >= s.n_codes()) throw DomainError("project_weights_to_positions: code id out of range");
  std::vector<double> out(doc.tokens.size());
  for (std::size_t j = 0; j < doc.tokens.size(); ++j) out[j] = s.weight(code_id, doc.tokens[j]);
  return out;
}

// Hard-label baseline over the same features: per code, L1-penalized mean
// logistic loss minimized by proximal gradient with step 1/L, where L bounds
// the Lipschitz constant of the smooth part.
inline StudentModels fit_logistic_baseline(const FeatureMatrix& X, const std::vector<std::set<int>>& labels,
                                           std::size_t n_codes, double lambda, std::size_t max_iter) {
  if (labels.size() != X.rows()) throw DomainError("fit_logistic_baseline: label rows differ from feature rows");
  const std::size_t n = X.rows(), p = X.cols();
  // Largest eigenvalue of X^T X by power iteration from the all-ones vector.
  std::vector<double> v(p, 1.0);
  double eig = 0.0;
  for (int it = 0; it < 100; ++it) {
    auto xv = X.multiply(v);
    std::vector<double> w(p, 0.0);
    for (std::size_t j = 0; j < p; ++j)
      for (auto [r, val] : X.column(j)) w[j] += val * xv[static_cast<std::size_t>(r)];
    double norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) break;
    double vnorm = 0.0;
    for (double x : v) vnorm += x * x;
    eig = norm / std::sqrt(vnorm);
    for (std::size_t j = 0; j < p; ++j) v[j] = w[j] / norm;
  }
  const double lipschitz = std::max(eig * 1.01, 1e-12) / (4.0 * static_cast<double>(std::max<std::size_t>(n, 1)));
  const double step = 1.0 / lipschitz;
  StudentModels s;
  s.lambda = lambda;
  s.temperature = 1.0;
  s.max_iter = max_iter;
  s.vocab_size = p;
  std::vector<double> w(p), grad(p);
  for (std::size_t code = 0; code < n_codes; ++code) {
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t it = 0; it < max_iter; ++it) {
      auto z = X.multiply(w);
      for (std::size_t r = 0; r < n; ++r)
        z[r] = (sigmoid(z[r]) - (labels[r].count(static_cast<int>(code)) ? 1.0 : 0.0)) / static_cast<double>(n);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t j = 0; j < p; ++j)
        for (auto [r, val] : X.column(j)) grad[j] += val * z[static_cast<std::size_t>(r)];
      for (std::size_t j = 0; j < p; ++j) w[j] = soft_threshold(w[j] - step * grad[j], step * lambda);
    }
    s.weights.push_back(prune(w));
  }
  return s;
}

inline StudentModels fit_logistic_baseline(const Corpus& c, double lambda, std::size_t max_iter) {
  std::vector<std::set<int>> labels;
  for (std::size_t i : c.train) labels.push_back(c.documents[i].gold_codes);
  StudentModels s = fit_logistic_baseline(bow_matrix(c, c.train), labels, c.codes.size(), lambda, max_iter);
  s.vocab_hash = c.vocab.hash();
  return s;
}

inline void check_compatible(const StudentModels& s, const Corpus& c) {
  if (s.vocab_hash != c.vocab.hash() || s.vocab_size != c.vocab.size()) {
    throw ValidationError("student vocabulary hash does not match corpus");
  }
  if (s.n_codes() != c.codes.size()) throw ValidationError("student code count does not match corpus");
}

inline json students_to_json(const StudentModels& s) {
  json rows = json::array();
  for (std::size_t i = 0; i < s.weights.size(); ++i) {
    json entries = json::array();
    for (auto [f, v] : s.weights[i]) entries.push_back({f, v});
    json row{{"code_id", i}, {"weights", std::move(entries)}};
    if (!s.intercepts.empty()) row["intercept"] = s.intercepts[i];
    rows.push_back(std::move(row));
  }
  return {{"format", "xrac-students-v1"},
          {"lambda", s.lambda},
          {"temperature", s.temperature},
          {"max_iter", s.max_iter},
          {"vocab_hash", s.vocab_hash},
          {"vocab_size", s.vocab_size},
          {"rows", std::move(rows)}};
}

inline StudentModels students_from_json(const json& j) {
  if (j.value("format", "") != "xrac-students-v1") throw ValidationError("not an xrac-students-v1 file");
  StudentModels s;
  s.lambda = j.at("lambda");
  s.temperature = j.at("temperature");
  s.max_iter = j.at("max_iter");
  s.vocab_hash = j.at("vocab_hash");
  s.vocab_size = j.at("vocab_size");
  for (const auto& row : j.at("rows")) {
    SparseVector w;
    for (const auto& e : row.at("weights")) {
      const int f = e.at(0);
      if (f < 0 || static_cast<std::size_t>(f) >= s.vocab_size) throw ValidationError("student feature id out of range");
      w.emplace_back(f, e.at(1).get<double>());
    }
    std::sort(w.begin(), w.end());
    s.weights.push_back(std::move(w));
    if (row.contains("intercept")) s.intercepts.push_back(row.at("intercept"));
  }
  if (!s.intercepts.empty() && s.intercepts.size() != s.weights.size()) {
    throw ValidationError("intercepts present for only some students");
  }
  return s;
}

// Loads students and refuses a vocabulary other than the corpus's.
inline StudentModels load_students(const std::string& path, const Corpus& c) {
  StudentModels s = students_from_json(read_json_file(path));
  check_compatible(s, c);
  return s;
}

}  // namespace xrac
