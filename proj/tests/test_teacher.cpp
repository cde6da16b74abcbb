#include <gtest/gtest.h>

#include <cmath>

#include "xrac/teacher.hpp"

using namespace xrac;

namespace {

Corpus tiny_corpus(std::size_t n_codes = 5, std::size_t doc_len = 12, std::size_t n_docs = 40) {
  PlantedSpec s;
  s.n_docs = n_docs;
  s.n_codes = n_codes;
  s.doc_len = doc_len;
  s.vocab_noise_size = 30;
  s.codes_per_doc_mean = 2.0;
  return generate_planted_corpus(s, 5);
}

TeacherConfig tiny_config() {
  TeacherConfig c;
  c.d = 8;
  c.n_layers = 1;
  c.max_seq_len = 16;
  c.batch_size = 4;
  c.epochs = 2;
  c.learning_rate = 0.05;
  return c;
}

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t(r, c);
  for (double& v : t.data) v = rng.normal();
  return t;
}

// Independent scalar forward of the discriminator.
double disc_oracle(const Discriminator& D, std::span<const double> x) {
  const std::size_t h = D.w1.value.cols();
  double out = D.b2.value.data[0];
  for (std::size_t j = 0; j < h; ++j) {
    double a = D.b1.value.data[j];
    for (std::size_t i = 0; i < x.size(); ++i) a += x[i] * D.w1.value(i, j);
    out += std::tanh(a) * D.w2.value(j, 0);
  }
  return 1.0 / (1.0 + std::exp(-out));
}

void zero_discriminator(Discriminator& D) {
  for (Parameter* p : D.parameters()) std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
}

}  // namespace

TEST(TeacherConfig, Validation) {
  TeacherConfig c;
  EXPECT_NO_THROW(c.validate());
  c.d = 7;
  EXPECT_THROW(c.validate(), DomainError);
  c = {};
  c.n_heads = 2;
  EXPECT_THROW(c.validate(), DomainError);
  c = {};
  c.alpha = -0.1;
  EXPECT_THROW(c.validate(), DomainError);
  EXPECT_THROW(parse_train_mode("joint"), DomainError);
  EXPECT_EQ(parse_train_mode("augmented"), TrainMode::Augmented);
}

TEST(InitTeacher, DeterministicUnderSeed) {
  Corpus c = tiny_corpus();
  TeacherConfig cfg = tiny_config();
  EXPECT_EQ(teacher_to_json(init_teacher(c, cfg)).dump(), teacher_to_json(init_teacher(c, cfg)).dump());
  TeacherConfig other = cfg;
  other.seed = 8;
  EXPECT_NE(teacher_to_json(init_teacher(c, cfg)).dump(), teacher_to_json(init_teacher(c, other)).dump());
  TeacherModel m = init_teacher(c, cfg);
  for (std::size_t j = 0; j < cfg.d; ++j) EXPECT_EQ(m.token_embeddings.value(kPadId, j), 0.0);
}

TEST(EmbedCodeTitles, MatchesBruteForceConvAndPool) {
  Corpus c = tiny_corpus();
  TeacherModel m = init_teacher(c, tiny_config());
  const std::size_t d = m.config.d, k = m.config.cnn_kernel;
  const std::vector<std::vector<int>> titles{{3}, {4, 5}, {6, 7, 8, 9}, {5, 4}};
  Tensor E = embed_code_titles(m, titles);
  const Tensor& W = m.title_conv.value;  // {k, d, d}
  for (std::size_t r = 0; r < titles.size(); ++r) {
    const auto& ids = titles[r];
    for (std::size_t o = 0; o < d; ++o) {
      double best = -INFINITY;
      for (std::size_t pos = 0; pos < ids.size(); ++pos) {
        double s = m.title_conv_bias.value.data[o];
        for (std::size_t tap = 0; tap < k; ++tap) {
          const long src = static_cast<long>(pos) + static_cast<long>(tap) - static_cast<long>(k / 2);
          if (src < 0 || src >= static_cast<long>(ids.size())) continue;
          for (std::size_t i = 0; i < d; ++i)
            s += m.token_embeddings.value(static_cast<std::size_t>(ids[static_cast<std::size_t>(src)]), i) *
                 W.data[(tap * d + i) * d + o];
        }
        best = std::max(best, s);
      }
      EXPECT_NEAR(E(r, o), best, 1e-12);
    }
  }
  // Reversing a two-token title changes which taps see which token.
  bool differs = false;
  for (std::size_t o = 0; o < d; ++o) differs = differs || std::abs(E(1, o) - E(3, o)) > 1e-12;
  EXPECT_TRUE(differs);
}

TEST(EmbedCodeTitles, IdenticalDescriptionsGiveIdenticalRows) {
  Corpus c = tiny_corpus();
  TeacherModel m = init_teacher(c, tiny_config());
  Tensor E = embed_code_titles(m, {{3, 4}, {3, 4}});
  for (std::size_t j = 0; j < E.cols(); ++j) EXPECT_EQ(E(0, j), E(1, j));
}

TEST(TitleTokens, EmptyDescriptionBecomesUnkAndIsFlagged) {
  CodeTable codes({{0, "A", "", std::nullopt}, {0, "B", "condition x", std::nullopt}});
  Vocabulary v({kPadToken, kUnkToken, "condition"}, {0, 0, 1});
  std::vector<std::string> flagged;
  auto t = title_token_ids(codes, v, &flagged);
  EXPECT_EQ(t[0], (std::vector<int>{kUnkId}));
  EXPECT_EQ(t[1], (std::vector<int>{2, kUnkId}));
  EXPECT_EQ(flagged, (std::vector<std::string>{"A"}));
}

TEST(ReadDocument, ZeroLayersIsTokenPlusPosition) {
  Corpus c = tiny_corpus();
  TeacherConfig cfg = tiny_config();
  cfg.n_layers = 0;
  TeacherModel m = init_teacher(c, cfg);
  const Document& d = c.documents[0];
  Tensor U = read_document(d, m);
  for (std::size_t p = 0; p < U.rows(); ++p)
    for (std::size_t j = 0; j < cfg.d; ++j)
      EXPECT_EQ(U(p, j), m.token_embeddings.value(d.tokens[p], j) + m.position_embeddings.value(p, j));
}

TEST(ReadDocument, SingleTokenAttendsToItself) {
  Corpus c = tiny_corpus();
  TeacherModel m = init_teacher(c, tiny_config());
  const std::vector<int> tok{3};
  Tape t;
  BoundTeacher b = bind_teacher(t, m);
  const auto& L = b.layers[0];
  Var x = t.add(t.gather_rows(b.tokens, tok), t.gather_rows(b.positions, std::vector<int>{0}));
  Var attn = t.softmax_rows(t.scale(t.matmul_nt(t.matmul(x, L.wq), t.matmul(x, L.wk)), 0.5));
  EXPECT_EQ(t.value(attn).data, (std::vector<double>{1.0}));
  // With attention fixed to 1 the layer reduces to x + x Wv Wo, which an
  // eager evaluation must reproduce.
  Tensor U = read_document(tok, m);
  Tape o;
  BoundTeacher ob = bind_teacher(o, m);
  const auto& OL = ob.layers[0];
  Var ox = o.add(o.gather_rows(ob.tokens, tok), o.gather_rows(ob.positions, std::vector<int>{0}));
  Var h = o.layer_norm_rows(o.add(ox, o.matmul(o.matmul(ox, OL.wv), OL.wo)), OL.ln1_gamma, OL.ln1_beta);
  Var f = o.add_row(o.matmul(o.gelu(o.add_row(o.matmul(h, OL.ff1), OL.ff1_bias)), OL.ff2), OL.ff2_bias);
  Var out = o.layer_norm_rows(o.add(h, f), OL.ln2_gamma, OL.ln2_beta);
  for (std::size_t j = 0; j < U.cols(); ++j) EXPECT_NEAR(U(0, j), o.value(out)(0, j), 1e-12);
}

TEST(ReadDocument, DeterministicAndRejectsEmpty) {
  Corpus c = tiny_corpus();
  TeacherModel m = init_teacher(c, tiny_config());
  EXPECT_EQ(read_document(c.documents[1], m), read_document(c.documents[1], m));
  EXPECT_THROW(read_document(std::vector<int>{}, m), DomainError);
}

TEST(CodeAttend, SingleTokenAndConstantRows) {
  Rng rng(1);
  Tensor E = random_tensor(rng, 3, 4);
  Tensor U = random_tensor(rng, 1, 4);
  Tensor V = code_attend(E, U);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(V(r, c), U(0, c), 1e-15);

  Tensor same(5, 4);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c) same(r, c) = U(0, c);
  V = code_attend(E, same);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(V(r, c), U(0, c), 1e-12);
}

TEST(CodeAttend, MatchesNaiveDoubleLoop) {
  Rng rng(2);
  Tensor E = random_tensor(rng, 3, 4), U = random_tensor(rng, 5, 4);
  Tensor V = code_attend(E, U);
  Tensor W = code_attention_matrix(E, U);
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> s(5);
    double mx = -INFINITY, z = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      for (std::size_t c = 0; c < 4; ++c) s[j] += E(i, c) * U(j, c);
      s[j] /= 2.0;
      mx = std::max(mx, s[j]);
    }
    for (double& v : s) z += (v = std::exp(v - mx));
    double row_sum = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_NEAR(W(i, j), s[j] / z, 1e-12);
      row_sum += W(i, j);
    }
    EXPECT_NEAR(row_sum, 1.0, 1e-12);
    for (std::size_t c = 0; c < 4; ++c) {
      double acc = 0;
      for (std::size_t j = 0; j < 5; ++j) acc += s[j] / z * U(j, c);
      EXPECT_NEAR(V(i, c), acc, 1e-12);
    }
  }
}

TEST(PredictProbs, OrthogonalSaturatedAndOracle) {
  Corpus c = tiny_corpus(2);
  TeacherModel m = init_teacher(c, tiny_config());
  Tensor E(2, 8), V(2, 8);
  E(0, 0) = 1.0;
  V(0, 1) = 3.0;
  E(1, 2) = 1.0;
  V(1, 2) = 1.0;
  auto p = predict_probs(V, E, m);
  EXPECT_EQ(p[0], 0.5);
  m.output_bias.value.data[1] = 20.0;
  p = predict_probs(V, E, m);
  EXPECT_GT(p[1], 0.999999);

  Rng rng(3);
  E = random_tensor(rng, 2, 8);
  V = random_tensor(rng, 2, 8);
  m.output_bias.value.data = {0.3, -1.2};
  p = predict_probs(V, E, m);
  for (std::size_t i = 0; i < 2; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 8; ++j) s += V(i, j) * E(i, j);
    EXPECT_NEAR(p[i], 1.0 / (1.0 + std::exp(-(s / std::sqrt(8.0) + m.output_bias.value.data[i]))), 1e-12);
  }
}

TEST(PriorLosses, ConstantHalfDiscriminator) {
  Corpus c = tiny_corpus();
  TeacherModel m = init_teacher(c, tiny_config());
  zero_discriminator(m.d_cpm);
  PriorSampler prior(Rng(1), 8);
  Rng rng(4);
  Tensor V = random_tensor(rng, 5, 8);
  PriorLoss l = cpm_loss(V, m.d_cpm, prior);
  EXPECT_NEAR(l.total, 2 * std::log(2.0), 1e-12);
  for (double v : l.per_row) EXPECT_NEAR(v, 2 * std::log(2.0), 1e-12);
  Tensor one = random_tensor(rng, 1, 8);
  PriorLoss single = tpm_loss(one, m.d_cpm, prior);
  EXPECT_EQ(single.total, single.per_row[0]);
}

TEST(PriorLosses, MatchDirectTwoTermFormula) {
  Corpus c = tiny_corpus();
  TeacherModel m = init_teacher(c, tiny_config());
  Rng rng(5);
  for (Parameter* p : m.d_tpm.parameters())
    for (double& v : p->value.data) v = rng.normal();
  Tensor U = random_tensor(rng, 7, 8);
  PriorSampler a(Rng(9), 8), b(Rng(9), 8);
  PriorLoss l = tpm_loss(U, m.d_tpm, a);
  Tensor P = b.sample(7);
  double mean = 0;
  for (std::size_t r = 0; r < 7; ++r) {
    const double dp = disc_oracle(m.d_tpm, P.row(r));
    const double dx = disc_oracle(m.d_tpm, U.row(r));
    const double lr = -(std::log(std::max(dp, kProbEps)) + std::log(std::max(1 - dx, kProbEps)));
    EXPECT_NEAR(l.per_row[r], lr, 1e-12);
    mean += lr / 7;
  }
  EXPECT_NEAR(l.total, mean, 1e-12);
}

TEST(PriorSampler, UnitCubeAndReproducible) {
  PriorSampler a(Rng(3), 6), b(Rng(3), 6);
  Tensor x = a.sample(50), y = b.sample(50);
  EXPECT_EQ(x, y);
  for (double v : x.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Discriminator, OutputsStrictlyInsideUnitInterval) {
  Corpus c = tiny_corpus();
  TeacherModel m = init_teacher(c, tiny_config());
  Rng rng(6);
  Tensor X = random_tensor(rng, 40, 8);
  for (double& v : X.data) v *= 5;
  for (double v : discriminator_forward(m.d_cpm, X).data) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(TotalLoss, Arithmetic) {
  const double l2 = 2 * std::log(2.0);
  EXPECT_NEAR(total_loss(1.0, l2, l2, 0.5, 0.8), 2.802182669455858, 1e-12);
  EXPECT_EQ(total_loss(0.7, 3.0, 4.0, 0.0, 0.0), 0.7);
  EXPECT_EQ(total_loss(0.0, 1.25, 9.0, 1.0, 0.0), 1.25);
}

TEST(FullLoss, GradCheckWithBothDiscriminators) {
  Corpus c = tiny_corpus(5, 12);
  TeacherConfig cfg = tiny_config();
  cfg.n_layers = 2;
  TeacherModel m = init_teacher(c, cfg);
  Rng rng(7);
  for (Parameter* p : m.discriminator_parameters())
    for (double& v : p->value.data) v = 0.5 * rng.normal();
  for (double& v : m.output_bias.value.data) v = 0.2 * rng.normal();
  const Document& d = c.documents[0];
  ASSERT_EQ(d.tokens.size(), 12u);
  const Tensor y = detail::label_column(d, m.n_codes);
  PriorSampler prior(Rng(11), cfg.d);
  const Tensor pc = prior.sample(5), pt = prior.sample(12);
  auto build = [&](Tape& t) {
    BoundTeacher b = bind_teacher(t, m, true);
    BoundDiscriminator dc = bind_discriminator(t, m.d_cpm, true);
    BoundDiscriminator dt = bind_discriminator(t, m.d_tpm, true);
    Var E = tape_code_titles(t, b, m.title_tokens);
    Var U = tape_read(t, b, d.tokens, cfg.d);
    Var V = tape_code_attend(t, E, U);
    Var bce = t.bce_with_logits(tape_logits(t, b, V, E), y);
    Var lc = tape_prior_matching(t, dc, V, pc).mean;
    Var lt = tape_prior_matching(t, dt, U, pt).mean;
    return t.add(bce, t.add(t.scale(lc, cfg.alpha), t.scale(lt, cfg.beta)));
  };
  auto params = m.all_parameters();
  auto r = grad_check(build, params);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "]";
}

TEST(TrainTeacher, ZeroEpochsReturnsInitialization) {
  Corpus c = tiny_corpus();
  TeacherConfig cfg = tiny_config();
  cfg.epochs = 0;
  TeacherModel trained = train_teacher(c, cfg, TrainMode::Augmented);
  TeacherModel init = init_teacher(c, cfg);
  auto a = trained.all_parameters();
  auto b = init.all_parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
}

TEST(TrainTeacher, AugmentedWithZeroWeightsMatchesBceOnlyBitwise) {
  Corpus c = tiny_corpus();
  TeacherConfig cfg = tiny_config();
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  TeacherModel a = train_teacher(c, cfg, TrainMode::BceOnly);
  TeacherModel b = train_teacher(c, cfg, TrainMode::Augmented);
  auto pa = a.generator_parameters();
  auto pb = b.generator_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value.data, pb[i]->value.data) << pa[i]->name;
  ASSERT_EQ(a.log.steps.size(), b.log.steps.size());
  for (std::size_t s = 0; s < a.log.steps.size(); ++s) EXPECT_EQ(a.log.steps[s].bce, b.log.steps[s].bce);
}

TEST(TrainTeacher, LoggedTotalIsRecomposedExactly) {
  Corpus c = tiny_corpus();
  TeacherConfig cfg = tiny_config();
  TeacherModel m = train_teacher(c, cfg, TrainMode::Augmented);
  ASSERT_GE(m.log.steps.size(), 10u);
  for (const auto& s : m.log.steps) {
    EXPECT_GT(s.cpm, 0.0);
    EXPECT_GT(s.tpm, 0.0);
    EXPECT_EQ(s.total, s.bce + 0.5 * s.cpm + 0.8 * s.tpm);
  }
}

TEST(TrainTeacher, LearnsAndIsReproducible) {
  Corpus c = tiny_corpus(3, 12, 120);
  TeacherConfig cfg = tiny_config();
  cfg.epochs = 6;
  cfg.learning_rate = 0.1;
  TeacherModel a = train_teacher(c, cfg, TrainMode::BceOnly);
  EXPECT_LT(a.log.final_train_bce, a.log.initial_train_bce);
  TeacherModel b = train_teacher(c, cfg, TrainMode::BceOnly);
  EXPECT_EQ(teacher_to_json(a).dump(), teacher_to_json(b).dump());
}

TEST(TrainTeacher, DivergenceIsReportedWithBatchDump) {
  Corpus c = tiny_corpus();
  TeacherConfig cfg = tiny_config();
  cfg.learning_rate = 1e300;
  cfg.grad_clip = 0;
  try {
    train_teacher(c, cfg, TrainMode::BceOnly);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_TRUE(e.dump.contains("batch"));
    EXPECT_FALSE(e.dump["batch"].empty());
  }
}

TEST(TrainTeacher, NoLabelledDocumentsIsAnError) {
  Corpus c = tiny_corpus();
  for (auto& d : c.documents) d.gold_codes.clear();
  EXPECT_THROW(train_teacher(c, tiny_config(), TrainMode::BceOnly), ValidationError);
}

TEST(TeacherJson, RoundTripPreservesPredictions) {
  Corpus c = tiny_corpus();
  TeacherModel m = train_teacher(c, tiny_config(), TrainMode::Augmented);
  json j = teacher_to_json(m);
  TeacherModel back = teacher_from_json(j);
  EXPECT_EQ(teacher_to_json(back).dump(), j.dump());
  EXPECT_EQ(predict_documents(back, c, c.test), predict_documents(m, c, c.test));
  EXPECT_EQ(back.log.steps.size(), m.log.steps.size());
}

TEST(TeacherJson, IncompatibleCorpusIsRefused) {
  Corpus c = tiny_corpus();
  TeacherModel m = init_teacher(c, tiny_config());
  Corpus other = tiny_corpus(4);
  EXPECT_THROW(check_compatible(m, other), ValidationError);
  EXPECT_THROW(teacher_from_json(json{{"format", "xrac-students-v1"}}), ValidationError);
}

TEST(PredictDocument, EmptyDocumentIsReadAsUnknown) {
  Corpus c = tiny_corpus();
  TeacherModel m = init_teacher(c, tiny_config());
  Document empty;
  Tensor E = embed_code_titles(m);
  auto p = predict_document(m, E, empty);
  Document unk;
  unk.tokens = {kUnkId};
  EXPECT_EQ(p, predict_document(m, E, unk));
}
