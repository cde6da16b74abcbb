#pragma once

// Desk-scale teacher: code-title CNN embedder, transformer reader, code
// attention coder, per-code sigmoid head, and the two prior-matching
// discriminators that regularize V_x and U_x during augmented training.

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "xrac/corpus.hpp"
#include "xrac/errors.hpp"
#include "xrac/numerics.hpp"

namespace xrac {

enum class TrainMode { BceOnly, Augmented };

inline const char* train_mode_name(TrainMode m) { return m == TrainMode::BceOnly ? "bce_only" : "augmented"; }
inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "bce_only") return TrainMode::BceOnly;
  if (s == "augmented") return TrainMode::Augmented;
  throw DomainError("unknown training mode '" + s + "' (expected bce_only or augmented)");
}

struct TeacherConfig {
  std::size_t d = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 1;
  std::size_t cnn_kernel = 3;
  std::size_t ffn_mult = 2;
  std::size_t max_seq_len = 512;
  double alpha = 0.5;
  double beta = 0.8;
  double learning_rate = 1e-2;
  double disc_learning_rate = 1e-2;
  double momentum = 0.9;
  double grad_clip = 5.0;  // global L2 norm; 0 disables
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  std::uint64_t seed = 7;
  bool log_steps = true;

  void validate() const {
    if (d < 4 || d % 2 != 0) throw DomainError("TeacherConfig: d must be even and >= 4");
    if (n_heads != 1) throw DomainError("TeacherConfig: only single-head attention is supported");
    if (cnn_kernel < 1 || cnn_kernel % 2 == 0) throw DomainError("TeacherConfig: cnn_kernel must be odd");
    if (alpha < 0 || beta < 0) throw DomainError("TeacherConfig: alpha and beta must be >= 0");
    if (batch_size < 1 || max_seq_len < 1 || ffn_mult < 1) throw DomainError("TeacherConfig: sizes must be >= 1");
    if (!(learning_rate > 0) || !(disc_learning_rate > 0)) throw DomainError("TeacherConfig: learning rates must be > 0");
  }
};

inline void to_json(json& j, const TeacherConfig& c) {
  j = json{{"d", c.d},
           {"n_layers", c.n_layers},
           {"n_heads", c.n_heads},
           {"cnn_kernel", c.cnn_kernel},
           {"ffn_mult", c.ffn_mult},
           {"max_seq_len", c.max_seq_len},
           {"alpha", c.alpha},
           {"beta", c.beta},
           {"learning_rate", c.learning_rate},
           {"disc_learning_rate", c.disc_learning_rate},
           {"momentum", c.momentum},
           {"grad_clip", c.grad_clip},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"seed", c.seed},
           {"log_steps", c.log_steps}};
}
inline void from_json(const json& j, TeacherConfig& c) {
  c.d = j.at("d");
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.cnn_kernel = j.at("cnn_kernel");
  c.ffn_mult = j.at("ffn_mult");
  c.max_seq_len = j.at("max_seq_len");
  c.alpha = j.at("alpha");
  c.beta = j.at("beta");
  c.learning_rate = j.at("learning_rate");
  c.disc_learning_rate = j.at("disc_learning_rate");
  c.momentum = j.at("momentum");
  c.grad_clip = j.at("grad_clip");
  c.batch_size = j.at("batch_size");
  c.epochs = j.at("epochs");
  c.seed = j.at("seed");
  c.log_steps = j.value("log_steps", true);
}

// d -> d/2 -> 1 with tanh between and a sigmoid output.
struct Discriminator {
  Parameter w1, b1, w2, b2;
  std::vector<Parameter*> parameters() { return {&w1, &b1, &w2, &b2}; }
  std::vector<const Parameter*> parameters() const { return {&w1, &b1, &w2, &b2}; }
};

struct ReaderLayer {
  Parameter wq, wk, wv, wo;
  Parameter ln1_gamma, ln1_beta;
  Parameter ff1, ff1_bias, ff2, ff2_bias;
  Parameter ln2_gamma, ln2_beta;
  std::vector<Parameter*> parameters() {
    return {&wq, &wk, &wv, &wo, &ln1_gamma, &ln1_beta, &ff1, &ff1_bias, &ff2, &ff2_bias, &ln2_gamma, &ln2_beta};
  }
};

struct StepLog {
  std::size_t epoch = 0, step = 0;
  double bce = 0, cpm = 0, tpm = 0, total = 0;
};

struct LossLog {
  double initial_train_bce = 0.0;
  double final_train_bce = 0.0;
  std::vector<StepLog> epochs;  // per-epoch means (step field = steps in epoch)
  std::vector<StepLog> steps;
};

struct TeacherModel {
  TeacherConfig config;
  TrainMode mode = TrainMode::BceOnly;
  std::string vocab_hash;
  std::size_t vocab_size = 0;
  std::size_t n_codes = 0;
  std::vector<std::vector<int>> title_tokens;  // per code, never empty

  Parameter token_embeddings, position_embeddings;
  std::vector<ReaderLayer> reader;
  Parameter title_conv, title_conv_bias;
  Parameter output_bias;  // n_y x 1
  Discriminator d_cpm, d_tpm;
  LossLog log;

  std::vector<Parameter*> generator_parameters() {
    std::vector<Parameter*> out{&token_embeddings, &position_embeddings};
    for (auto& l : reader)
      for (Parameter* p : l.parameters()) out.push_back(p);
    out.insert(out.end(), {&title_conv, &title_conv_bias, &output_bias});
    return out;
  }
  std::vector<Parameter*> discriminator_parameters() {
    auto a = d_cpm.parameters();
    auto b = d_tpm.parameters();
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }
  std::vector<Parameter*> all_parameters() {
    auto a = generator_parameters();
    auto b = discriminator_parameters();
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }
  std::vector<const Parameter*> all_parameters() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<TeacherModel*>(this)->all_parameters()) out.push_back(p);
    return out;
  }
};

// Description token ids per code. Empty descriptions become a single UNK and
// are reported through `flagged`.
inline std::vector<std::vector<int>> title_token_ids(const CodeTable& codes, const Vocabulary& vocab,
                                                     std::vector<std::string>* flagged = nullptr) {
  std::vector<std::vector<int>> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    for (const auto& w : tokenize(codes[i].description)) out[i].push_back(vocab.id_of(w));
    if (out[i].empty()) {
      out[i].push_back(kUnkId);
      if (flagged) flagged->push_back(codes[i].code);
    }
  }
  return out;
}

namespace detail {

inline Tensor xavier(Rng& rng, std::vector<std::size_t> shape, std::size_t fan_in, std::size_t fan_out) {
  Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.data) v = rng.uniform(-a, a);
  return t;
}
inline Tensor gaussian(Rng& rng, std::vector<std::size_t> shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = stddev * rng.normal();
  return t;
}

inline Discriminator init_discriminator(Rng& rng, const std::string& prefix, std::size_t d) {
  const std::size_t h = d / 2;
  Discriminator D;
  D.w1 = Parameter(prefix + ".w1", xavier(rng, {d, h}, d, h));
  D.b1 = Parameter(prefix + ".b1", Tensor(1, h));
  D.w2 = Parameter(prefix + ".w2", xavier(rng, {h, 1}, h, 1));
  D.b2 = Parameter(prefix + ".b2", Tensor(1, 1));
  return D;
}

}  // namespace detail

// Seeded initialization; the same (corpus vocabulary, codes, config) always
// yields byte-identical parameters.
inline TeacherModel init_teacher(const Corpus& corpus, const TeacherConfig& cfg) {
  cfg.validate();
  TeacherModel m;
  m.config = cfg;
  m.vocab_hash = corpus.vocab.hash();
  m.vocab_size = corpus.vocab.size();
  m.n_codes = corpus.codes.size();
  m.title_tokens = title_token_ids(corpus.codes, corpus.vocab);
  const std::size_t d = cfg.d, dff = cfg.ffn_mult * cfg.d;
  Rng rng = Rng(cfg.seed).fork(0);
  m.token_embeddings = Parameter("token_embeddings", detail::gaussian(rng, {m.vocab_size, d}, 1.0));
  for (std::size_t j = 0; j < d; ++j) m.token_embeddings.value(kPadId, j) = 0.0;
  m.position_embeddings = Parameter("position_embeddings", detail::gaussian(rng, {cfg.max_seq_len, d}, 0.1));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "reader." + std::to_string(l) + ".";
    ReaderLayer L;
    L.wq = Parameter(p + "wq", detail::xavier(rng, {d, d}, d, d));
    L.wk = Parameter(p + "wk", detail::xavier(rng, {d, d}, d, d));
    L.wv = Parameter(p + "wv", detail::xavier(rng, {d, d}, d, d));
    L.wo = Parameter(p + "wo", detail::xavier(rng, {d, d}, d, d));
    L.ln1_gamma = Parameter(p + "ln1_gamma", Tensor(1, d, 1.0));
    L.ln1_beta = Parameter(p + "ln1_beta", Tensor(1, d));
    L.ff1 = Parameter(p + "ff1", detail::xavier(rng, {d, dff}, d, dff));
    L.ff1_bias = Parameter(p + "ff1_bias", Tensor(1, dff));
    L.ff2 = Parameter(p + "ff2", detail::xavier(rng, {dff, d}, dff, d));
    L.ff2_bias = Parameter(p + "ff2_bias", Tensor(1, d));
    L.ln2_gamma = Parameter(p + "ln2_gamma", Tensor(1, d, 1.0));
    L.ln2_beta = Parameter(p + "ln2_beta", Tensor(1, d));
    m.reader.push_back(std::move(L));
  }
  const std::size_t k = cfg.cnn_kernel;
  m.title_conv = Parameter("title_conv", detail::xavier(rng, {k, d, d}, k * d, d));
  m.title_conv_bias = Parameter("title_conv_bias", Tensor(1, d));
  m.output_bias = Parameter("output_bias", Tensor(m.n_codes, 1));
  m.d_cpm = detail::init_discriminator(rng, "d_cpm", d);
  m.d_tpm = detail::init_discriminator(rng, "d_tpm", d);
  return m;
}

// Tape handles for every model parameter. Trainable parameters accumulate
// gradients; frozen ones enter the tape as constants.
struct BoundDiscriminator {
  Var w1, b1, w2, b2;
};
struct BoundLayer {
  Var wq, wk, wv, wo, ln1_gamma, ln1_beta, ff1, ff1_bias, ff2, ff2_bias, ln2_gamma, ln2_beta;
};
struct BoundTeacher {
  Var tokens, positions, conv, conv_bias, out_bias;
  std::vector<BoundLayer> layers;
};

namespace detail {
inline Var bind(Tape& t, Parameter& p, bool trainable) { return trainable ? t.param(p) : t.constant(p.value); }
inline Var bind(Tape& t, const Parameter& p) { return t.constant(p.value); }
}  // namespace detail

inline BoundTeacher bind_teacher(Tape& t, TeacherModel& m, bool trainable) {
  using detail::bind;
  BoundTeacher b;
  b.tokens = bind(t, m.token_embeddings, trainable);
  b.positions = bind(t, m.position_embeddings, trainable);
  for (auto& L : m.reader) {
    b.layers.push_back({bind(t, L.wq, trainable), bind(t, L.wk, trainable), bind(t, L.wv, trainable),
                        bind(t, L.wo, trainable), bind(t, L.ln1_gamma, trainable), bind(t, L.ln1_beta, trainable),
                        bind(t, L.ff1, trainable), bind(t, L.ff1_bias, trainable), bind(t, L.ff2, trainable),
                        bind(t, L.ff2_bias, trainable), bind(t, L.ln2_gamma, trainable),
                        bind(t, L.ln2_beta, trainable)});
  }
  b.conv = bind(t, m.title_conv, trainable);
  b.conv_bias = bind(t, m.title_conv_bias, trainable);
  b.out_bias = bind(t, m.output_bias, trainable);
  return b;
}
inline BoundTeacher bind_teacher(Tape& t, const TeacherModel& m) {
  return bind_teacher(t, const_cast<TeacherModel&>(m), false);
}
inline BoundDiscriminator bind_discriminator(Tape& t, Discriminator& D, bool trainable) {
  using detail::bind;
  return {bind(t, D.w1, trainable), bind(t, D.b1, trainable), bind(t, D.w2, trainable), bind(t, D.b2, trainable)};
}
inline BoundDiscriminator bind_discriminator(Tape& t, const Discriminator& D) {
  return bind_discriminator(t, const_cast<Discriminator&>(D), false);
}

// ---- taped forward pieces -------------------------------------------------

// E_t: per code, conv (same padding) over description embeddings, then a
// global max-pool over positions.
inline Var tape_code_titles(Tape& t, const BoundTeacher& b, const std::vector<std::vector<int>>& titles) {
  std::vector<Var> rows;
  rows.reserve(titles.size());
  for (const auto& ids : titles) {
    Var x = t.gather_rows(b.tokens, ids);
    rows.push_back(t.max_pool_rows(t.conv1d_same(x, b.conv, b.conv_bias)));
  }
  return t.vstack(rows);
}

// U_x: token + position embeddings through the post-norm encoder stack.
inline Var tape_read(Tape& t, const BoundTeacher& b, std::span<const int> tokens, std::size_t d) {
  if (tokens.empty()) throw DomainError("read_document: empty document");
  std::vector<int> pos(tokens.size());
  std::iota(pos.begin(), pos.end(), 0);
  if (pos.size() > t.value(b.positions).rows()) throw DomainError("read_document: longer than max_seq_len");
  Var x = t.add(t.gather_rows(b.tokens, tokens), t.gather_rows(b.positions, pos));
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  for (const auto& L : b.layers) {
    Var q = t.matmul(x, L.wq);
    Var k = t.matmul(x, L.wk);
    Var v = t.matmul(x, L.wv);
    Var attn = t.softmax_rows(t.scale(t.matmul_nt(q, k), inv));
    Var h = t.matmul(t.matmul(attn, v), L.wo);
    x = t.layer_norm_rows(t.add(x, h), L.ln1_gamma, L.ln1_beta);
    Var f = t.add_row(t.matmul(t.gelu(t.add_row(t.matmul(x, L.ff1), L.ff1_bias)), L.ff2), L.ff2_bias);
    x = t.layer_norm_rows(t.add(x, f), L.ln2_gamma, L.ln2_beta);
  }
  return x;
}

// Softmax(E_t U_x^T / sqrt(d)), row-wise over tokens.
inline Var tape_code_attention(Tape& t, Var E, Var U) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(t.value(E).cols()));
  return t.softmax_rows(t.scale(t.matmul_nt(E, U), inv));
}

inline Var tape_code_attend(Tape& t, Var E, Var U) { return t.matmul(tape_code_attention(t, E, U), U); }

// Per-code logits <v_i, e_i> / sqrt(d) + b_i, shape n_y x 1.
inline Var tape_logits(Tape& t, const BoundTeacher& b, Var V, Var E) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(t.value(E).cols()));
  return t.add(t.scale(t.row_dot(V, E), inv), b.out_bias);
}

inline Var tape_discriminator(Tape& t, const BoundDiscriminator& D, Var X) {
  Var h = t.tanh(t.add_row(t.matmul(X, D.w1), D.b1));
  return t.sigmoid(t.add_row(t.matmul(h, D.w2), D.b2));
}

struct TapedPriorLoss {
  Var per_row;  // n x 1 of l^i
  Var mean;     // scalar L
};

// l^i = -(log D(prior_i) + log(1 - D(x_i))), averaged over rows.
inline TapedPriorLoss tape_prior_matching(Tape& t, const BoundDiscriminator& D, Var X, Tensor prior) {
  Var dp = tape_discriminator(t, D, t.constant(std::move(prior)));
  Var dx = tape_discriminator(t, D, X);
  Var l = t.scale(t.add(t.log_clamped(dp), t.log_clamped(t.affine(dx, -1.0, 1.0))), -1.0);
  return {l, t.mean(l)};
}

// Non-saturating generator objective: mean_i -log D(x_i).
inline Var tape_generator_term(Tape& t, const BoundDiscriminator& D, Var X) {
  return t.scale(t.mean(t.log_clamped(tape_discriminator(t, D, X))), -1.0);
}

// ---- value-level operations ----------------------------------------------

inline Tensor embed_code_titles(const TeacherModel& m, const std::vector<std::vector<int>>& titles) {
  Tape t;
  BoundTeacher b = bind_teacher(t, m);
  return t.value(tape_code_titles(t, b, titles));
}
inline Tensor embed_code_titles(const TeacherModel& m) { return embed_code_titles(m, m.title_tokens); }

inline Tensor read_document(std::span<const int> tokens, const TeacherModel& m) {
  Tape t;
  BoundTeacher b = bind_teacher(t, m);
  return t.value(tape_read(t, b, tokens, m.config.d));
}
inline Tensor read_document(const Document& doc, const TeacherModel& m) {
  const std::size_t n = std::min(doc.tokens.size(), m.config.max_seq_len);
  return read_document(std::span<const int>(doc.tokens.data(), n), m);
}

inline Tensor code_attention_matrix(const Tensor& E, const Tensor& U) {
  if (E.cols() != U.cols()) throw DomainError("code_attend: embedding widths differ");
  Tape t;
  return t.value(tape_code_attention(t, t.constant(E), t.constant(U)));
}

inline Tensor code_attend(const Tensor& E, const Tensor& U) {
  if (E.cols() != U.cols()) throw DomainError("code_attend: embedding widths differ");
  Tape t;
  return t.value(tape_code_attend(t, t.constant(E), t.constant(U)));
}

inline std::vector<double> predict_probs(const Tensor& V, const Tensor& E, const TeacherModel& m) {
  if (V.shape != E.shape || V.rows() != m.output_bias.value.size()) throw DomainError("predict_probs: shape mismatch");
  const double inv = 1.0 / std::sqrt(static_cast<double>(E.cols()));
  std::vector<double> out(V.rows());
  for (std::size_t i = 0; i < V.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < V.cols(); ++c) s += V(i, c) * E(i, c);
    out[i] = sigmoid(s * inv + m.output_bias.value.data[i]);
  }
  return out;
}

inline Tensor discriminator_forward(const Discriminator& D, const Tensor& X) {
  Tape t;
  return t.value(tape_discriminator(t, bind_discriminator(t, D), t.constant(X)));
}

// Uniform prior on [0, 1)^dim.
class PriorSampler {
 public:
  PriorSampler(Rng rng, std::size_t dim) : rng_(std::move(rng)), dim_(dim) {}
  Tensor sample(std::size_t n) {
    Tensor t(n, dim_);
    for (double& v : t.data) v = rng_.uniform();
    return t;
  }
  std::size_t dim() const { return dim_; }

 private:
  Rng rng_;
  std::size_t dim_;
};

struct PriorLoss {
  double total = 0.0;
  std::vector<double> per_row;
};

inline PriorLoss prior_matching_loss(const Tensor& X, const Discriminator& D, PriorSampler& prior) {
  if (X.cols() != prior.dim() || X.rows() == 0) throw DomainError("prior_matching_loss: shape mismatch");
  Tape t;
  auto res = tape_prior_matching(t, bind_discriminator(t, D), t.constant(X), prior.sample(X.rows()));
  return {t.scalar(res.mean), t.value(res.per_row).data};
}
// CPM over rows of V_x (one prior vector per code).
inline PriorLoss cpm_loss(const Tensor& V, const Discriminator& D, PriorSampler& prior) {
  return prior_matching_loss(V, D, prior);
}
// TPM over rows of U_x (one prior vector per token).
inline PriorLoss tpm_loss(const Tensor& U, const Discriminator& D, PriorSampler& prior) {
  return prior_matching_loss(U, D, prior);
}

inline double total_loss(double bce, double cpm, double tpm, double alpha, double beta) {
  return bce + alpha * cpm + beta * tpm;
}

// Teacher probabilities for one document given precomputed E_t. Empty
// documents are read as a single UNK token.
inline std::vector<double> predict_document(const TeacherModel& m, const Tensor& E, const Document& doc) {
  static const std::vector<int> kUnkOnly{kUnkId};
  Tensor U = doc.tokens.empty() ? read_document(kUnkOnly, m) : read_document(doc, m);
  return predict_probs(code_attend(E, U), E, m);
}

inline std::vector<std::vector<double>> predict_documents(const TeacherModel& m, const Corpus& c,
                                                          const std::vector<std::size_t>& idx) {
  Tensor E = embed_code_titles(m);
  std::vector<std::vector<double>> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(predict_document(m, E, c.documents[i]));
  return out;
}

inline void check_compatible(const TeacherModel& m, const Corpus& c) {
  if (m.vocab_hash != c.vocab.hash()) throw ValidationError("teacher vocabulary hash does not match corpus");
  if (m.n_codes != c.codes.size()) throw ValidationError("teacher code count does not match corpus");
}

// Mean per-document BCE over the non-empty, labelled documents of idx.
inline double evaluate_bce(const TeacherModel& m, const Corpus& c, const std::vector<std::size_t>& idx) {
  Tensor E = embed_code_titles(m);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i : idx) {
    const Document& d = c.documents[i];
    if (d.tokens.empty() || d.gold_codes.empty()) continue;
    auto p = predict_document(m, E, d);
    double s = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double q = std::clamp(p[k], 1e-15, 1.0 - 1e-15);
      s -= d.gold_codes.count(static_cast<int>(k)) ? std::log(q) : std::log1p(-q);
    }
    total += s / static_cast<double>(p.size());
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

// Thrown when a training loss turns non-finite; `dump` describes the batch.
struct TrainingDiverged : EvaluationError {
  TrainingDiverged(const std::string& what, json d) : EvaluationError(what), dump(std::move(d)) {}
  json dump;
};

namespace detail {

class MomentumSgd {
 public:
  MomentumSgd(std::vector<Parameter*> params, double lr, double momentum, double clip)
      : params_(std::move(params)), lr_(lr), mu_(momentum), clip_(clip) {
    for (Parameter* p : params_) velocity_.emplace_back(p->value.shape);
  }
  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }
  void step() {
    double scale = 1.0;
    if (clip_ > 0) {
      double sq = 0.0;
      for (Parameter* p : params_)
        for (double g : p->grad.data) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > clip_) scale = clip_ / norm;
    }
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Parameter& p = *params_[k];
      Tensor& v = velocity_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        v.data[i] = mu_ * v.data[i] + scale * p.grad.data[i];
        p.value.data[i] -= lr_ * v.data[i];
      }
    }
  }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> velocity_;
  double lr_, mu_, clip_;
};

inline Tensor label_column(const Document& d, std::size_t n_codes) {
  Tensor y(n_codes, 1);
  for (int c : d.gold_codes) y.data[static_cast<std::size_t>(c)] = 1.0;
  return y;
}

}  // namespace detail

struct TrainOptions {
  // Optional per-epoch hook (epoch index, epoch means); used for progress output.
  std::function<void(const StepLog&)> on_epoch;
};

// Mini-batch training. In augmented mode each batch performs one
// discriminator step on alpha*L_C + beta*L_T (V_x, U_x held fixed), then one
// model step on L_BCE + alpha*(-log D_cpm(v)) + beta*(-log D_tpm(u)) against
// the updated discriminators. Logged totals are the loss as written:
// L_BCE + alpha*L_C + beta*L_T.
inline TeacherModel train_teacher(const Corpus& corpus, const TeacherConfig& cfg, TrainMode mode,
                                  const TrainOptions& opts = {}) {
  TeacherModel m = init_teacher(corpus, cfg);
  m.mode = mode;
  std::vector<std::size_t> pool;
  for (std::size_t i : corpus.train) {
    const Document& d = corpus.documents[i];
    if (!d.tokens.empty() && !d.gold_codes.empty()) pool.push_back(i);
  }
  if (pool.empty()) throw ValidationError("train_teacher: no labelled, non-empty training documents");
  m.log.initial_train_bce = evaluate_bce(m, corpus, corpus.train);
  if (cfg.epochs == 0) {
    m.log.final_train_bce = m.log.initial_train_bce;
    return m;
  }

  Rng batch_rng = Rng(cfg.seed).fork(1);
  PriorSampler prior(Rng(cfg.seed).fork(2), cfg.d);
  detail::MomentumSgd gen_opt(m.generator_parameters(), cfg.learning_rate, cfg.momentum, cfg.grad_clip);
  detail::MomentumSgd disc_opt(m.discriminator_parameters(), cfg.disc_learning_rate, cfg.momentum, cfg.grad_clip);
  const bool augmented = mode == TrainMode::Augmented;
  std::size_t global_step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = pool;
    batch_rng.shuffle(order);
    StepLog epoch_sum;
    epoch_sum.epoch = epoch;
    std::size_t n_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      gen_opt.zero_grad();
      disc_opt.zero_grad();

      Tape tape;
      BoundTeacher b = bind_teacher(tape, m, true);
      Var E = tape_code_titles(tape, b, m.title_tokens);
      std::vector<Var> us, vs, bces;
      for (std::size_t k = start; k < end; ++k) {
        const Document& d = corpus.documents[order[k]];
        const std::size_t n = std::min(d.tokens.size(), cfg.max_seq_len);
        Var U = tape_read(tape, b, std::span<const int>(d.tokens.data(), n), cfg.d);
        Var V = tape_code_attend(tape, E, U);
        us.push_back(U);
        vs.push_back(V);
        bces.push_back(tape.bce_with_logits(tape_logits(tape, b, V, E), detail::label_column(d, m.n_codes)));
      }
      Var bce = tape.scale(tape.sum(tape.vstack(bces)), inv_b);
      StepLog s;
      s.epoch = epoch;
      s.step = global_step;
      s.bce = tape.scalar(bce);
      Var objective = bce;

      if (augmented) {
        Tape dt;
        BoundDiscriminator dc = bind_discriminator(dt, m.d_cpm, true);
        BoundDiscriminator dtp = bind_discriminator(dt, m.d_tpm, true);
        std::vector<Var> lcs, lts;
        for (std::size_t k = 0; k < us.size(); ++k) {
          const Tensor& V = tape.value(vs[k]);
          const Tensor& U = tape.value(us[k]);
          lcs.push_back(tape_prior_matching(dt, dc, dt.constant(V), prior.sample(V.rows())).mean);
          lts.push_back(tape_prior_matching(dt, dtp, dt.constant(U), prior.sample(U.rows())).mean);
        }
        Var lc = dt.scale(dt.sum(dt.vstack(lcs)), inv_b);
        Var lt = dt.scale(dt.sum(dt.vstack(lts)), inv_b);
        s.cpm = dt.scalar(lc);
        s.tpm = dt.scalar(lt);
        if (cfg.alpha > 0 || cfg.beta > 0) {
          dt.backward(dt.add(dt.scale(lc, cfg.alpha), dt.scale(lt, cfg.beta)));
          disc_opt.step();
        }
        if (cfg.alpha > 0) {
          BoundDiscriminator D = bind_discriminator(tape, m.d_cpm, false);
          std::vector<Var> gs;
          for (Var V : vs) gs.push_back(tape_generator_term(tape, D, V));
          objective = tape.add(objective, tape.scale(tape.sum(tape.vstack(gs)), cfg.alpha * inv_b));
        }
        if (cfg.beta > 0) {
          BoundDiscriminator D = bind_discriminator(tape, m.d_tpm, false);
          std::vector<Var> gs;
          for (Var U : us) gs.push_back(tape_generator_term(tape, D, U));
          objective = tape.add(objective, tape.scale(tape.sum(tape.vstack(gs)), cfg.beta * inv_b));
        }
      }
      s.total = total_loss(s.bce, s.cpm, s.tpm, cfg.alpha, cfg.beta);
      if (!std::isfinite(s.total) || !std::isfinite(tape.scalar(objective))) {
        json dump{{"epoch", epoch}, {"step", global_step}, {"bce", s.bce}, {"cpm", s.cpm}, {"tpm", s.tpm}};
        json docs = json::array();
        for (std::size_t k = start; k < end; ++k) {
          docs.push_back({{"doc_id", corpus.documents[order[k]].doc_id},
                          {"bce", tape.scalar(bces[k - start])}});
        }
        dump["batch"] = std::move(docs);
        throw TrainingDiverged("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(global_step),
                               std::move(dump));
      }
      tape.backward(objective);
      gen_opt.step();

      if (cfg.log_steps) m.log.steps.push_back(s);
      epoch_sum.bce += s.bce;
      epoch_sum.cpm += s.cpm;
      epoch_sum.tpm += s.tpm;
      epoch_sum.total += s.total;
      ++n_steps;
      ++global_step;
    }
    const double inv = 1.0 / static_cast<double>(n_steps);
    epoch_sum.bce *= inv;
    epoch_sum.cpm *= inv;
    epoch_sum.tpm *= inv;
    epoch_sum.total *= inv;
    epoch_sum.step = n_steps;
    m.log.epochs.push_back(epoch_sum);
    if (opts.on_epoch) opts.on_epoch(epoch_sum);
  }
  m.log.final_train_bce = evaluate_bce(m, corpus, corpus.train);
  return m;
}

// ---- persistence ----------------------------------------------------------

inline json tensor_to_json(const Tensor& t) { return {{"shape", t.shape}, {"values", t.data}}; }
inline Tensor tensor_from_json(const json& j) {
  Tensor t;
  t.shape = j.at("shape").get<std::vector<std::size_t>>();
  t.data = j.at("values").get<std::vector<double>>();
  if (Tensor::numel(t.shape) != t.data.size()) throw ValidationError("tensor shape does not match value count");
  return t;
}

inline json step_to_json(const StepLog& s) {
  return {{"epoch", s.epoch}, {"step", s.step}, {"bce", s.bce}, {"cpm", s.cpm}, {"tpm", s.tpm}, {"total", s.total}};
}
inline StepLog step_from_json(const json& j) {
  return {j.at("epoch"), j.at("step"), j.at("bce"), j.at("cpm"), j.at("tpm"), j.at("total")};
}

inline json teacher_to_json(const TeacherModel& m) {
  json params = json::array();
  for (const Parameter* p : m.all_parameters()) params.push_back({{"name", p->name}, {"tensor", tensor_to_json(p->value)}});
  json epochs = json::array(), steps = json::array();
  for (const auto& s : m.log.epochs) epochs.push_back(step_to_json(s));
  for (const auto& s : m.log.steps) steps.push_back(step_to_json(s));
  return {{"format", "xrac-teacher-v1"},
          {"config", m.config},
          {"mode", train_mode_name(m.mode)},
          {"vocab_hash", m.vocab_hash},
          {"vocab_size", m.vocab_size},
          {"n_codes", m.n_codes},
          {"title_tokens", m.title_tokens},
          {"parameters", std::move(params)},
          {"loss_log",
           {{"initial_train_bce", m.log.initial_train_bce},
            {"final_train_bce", m.log.final_train_bce},
            {"epochs", std::move(epochs)},
            {"steps", std::move(steps)}}}};
}

inline TeacherModel teacher_from_json(const json& j) {
  if (j.value("format", "") != "xrac-teacher-v1") throw ValidationError("not an xrac-teacher-v1 file");
  TeacherModel m;
  TeacherConfig cfg = j.at("config").get<TeacherConfig>();
  // Rebuild the parameter skeleton from a throwaway corpus of the right sizes.
  Corpus shape;
  std::vector<std::string> toks{kPadToken, kUnkToken};
  const std::size_t vsize = j.at("vocab_size");
  for (std::size_t i = 2; i < vsize; ++i) toks.push_back("t" + std::to_string(i));
  shape.vocab = Vocabulary(toks, std::vector<std::int64_t>(vsize, 0));
  std::vector<CodeEntry> entries(j.at("n_codes").get<std::size_t>());
  for (std::size_t i = 0; i < entries.size(); ++i) entries[i].code = "c" + std::to_string(i);
  shape.codes = CodeTable(std::move(entries));
  m = init_teacher(shape, cfg);
  m.mode = parse_train_mode(j.at("mode"));
  m.vocab_hash = j.at("vocab_hash");
  m.title_tokens = j.at("title_tokens").get<std::vector<std::vector<int>>>();
  std::unordered_map<std::string, const json*> by_name;
  for (const auto& p : j.at("parameters")) by_name[p.at("name").get<std::string>()] = &p.at("tensor");
  for (Parameter* p : m.all_parameters()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw ValidationError("teacher file lacks parameter '" + p->name + "'");
    Tensor t = tensor_from_json(*it->second);
    if (t.shape != p->value.shape) throw ValidationError("parameter '" + p->name + "' has the wrong shape");
    p->value = std::move(t);
    p->grad = Tensor(p->value.shape);
  }
  const json& lj = j.at("loss_log");
  m.log.initial_train_bce = lj.at("initial_train_bce");
  m.log.final_train_bce = lj.at("final_train_bce");
  for (const auto& s : lj.at("epochs")) m.log.epochs.push_back(step_from_json(s));
  for (const auto& s : lj.at("steps")) m.log.steps.push_back(step_from_json(s));
  return m;
}

inline TeacherModel load_teacher(const std::string& path) { return teacher_from_json(read_json_file(path)); }

}  // namespace xrac
