#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 data or
// validation error.

#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xrac/annotation_server.hpp"
#include "xrac/config.hpp"
#include "xrac/corpus.hpp"
#include "xrac/distill.hpp"
#include "xrac/evalsheet.hpp"
#include "xrac/metrics.hpp"
#include "xrac/pipeline.hpp"
#include "xrac/teacher.hpp"

namespace xrac {

namespace cli_detail {

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out << text;
  if (!out) throw ValidationError("failed writing '" + path + "'");
}

// Resolved configuration next to each output, as <output>.runconfig.json.
inline void write_provenance(const std::string& output, const std::string& command, const RunConfig& cfg) {
  json j{{"command", command}, {"config", config_to_json(cfg)}};
  write_text_file(output + ".runconfig.json", j.dump(1) + "\n");
}

// Flags that map onto config keys; collected during parsing and applied after
// the config file so that flags win.
class ConfigFlags {
 public:
  void add(CLI::App* app, std::initializer_list<const char*> keys) {
    for (const char* key : keys) {
      std::string flag = std::string("--") + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      app->add_option_function<std::string>(
          flag, [this, key = std::string(key)](const std::string& v) { overrides_.emplace_back(key, v); },
          "override config key '" + std::string(key) + "'");
    }
  }
  void add_set(CLI::App* app) {
    app->add_option_function<std::vector<std::string>>(
           "--set",
           [this](const std::vector<std::string>& kvs) {
             for (const auto& kv : kvs) {
               auto eq = kv.find('=');
               if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected key=value, got " + kv);
               overrides_.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
             }
           },
           "override any config key (key=value)")
        ->take_all();
  }
  const std::vector<std::pair<std::string, std::string>>& overrides() const { return overrides_; }

 private:
  std::vector<std::pair<std::string, std::string>> overrides_;
};

inline std::string model_format(const json& j) { return j.value("format", ""); }

struct Ctx {
  RunConfig cfg;
  bool json_out = false;
  std::ostream& out;
  std::ostream& err;
};

inline const std::vector<std::size_t>& split_indices(const Corpus& c, const RunConfig& cfg) {
  return c.indices(*parse_split(cfg.split));
}

inline void print_summary(Ctx& ctx, const json& j, const std::string& text) {
  if (ctx.json_out) {
    ctx.out << j.dump(1) << '\n';
  } else {
    ctx.out << text;
  }
}

inline void cmd_gen_synth(Ctx& ctx, const std::string& out_path) {
  Corpus c = generate_planted_corpus(ctx.cfg.planted, ctx.cfg.seed);
  write_json_file(out_path, corpus_to_json(c));
  write_provenance(out_path, "gen-synth", ctx.cfg);
  std::ostringstream os;
  os << "wrote " << c.documents.size() << " documents, " << c.codes.size() << " codes, vocab " << c.vocab.size()
     << " to " << out_path << '\n';
  print_summary(ctx,
                {{"output", out_path},
                 {"documents", c.documents.size()},
                 {"codes", c.codes.size()},
                 {"vocab", c.vocab.size()}},
                os.str());
}

inline void cmd_ingest(Ctx& ctx, const std::string& notes, const std::string& codes, const std::string& out_path) {
  IngestConfig ic;
  ic.max_seq_len = ctx.cfg.teacher.max_seq_len;
  ic.min_freq = ctx.cfg.min_freq;
  ic.split_seed = ctx.cfg.split_seed;
  IngestResult r = ingest_corpus(notes, codes, ic);
  for (const auto& rej : r.rejects)
    ctx.err << "reject line " << rej.line << " doc " << rej.doc_id << " code " << rej.code << ": " << rej.reason << '\n';
  for (const auto& d : r.empty_docs) ctx.err << "warning: document " << d << " has no tokens after tokenization\n";
  write_json_file(out_path, corpus_to_json(r.corpus));
  write_provenance(out_path, "ingest", ctx.cfg);
  std::ostringstream os;
  os << "wrote " << r.corpus.documents.size() << " documents (" << r.rejects.size() << " rejected code references) to "
     << out_path << '\n';
  print_summary(ctx,
                {{"output", out_path},
                 {"documents", r.corpus.documents.size()},
                 {"rejects", r.rejects.size()},
                 {"empty_docs", r.empty_docs.size()}},
                os.str());
}

inline void cmd_train(Ctx& ctx, const std::string& corpus_path, const std::string& out_path) {
  Corpus c = load_corpus(corpus_path);
  TrainOptions opts;
  opts.on_epoch = [&](const StepLog& s) {
    ctx.err << "epoch " << s.epoch << " bce " << s.bce << " cpm " << s.cpm << " tpm " << s.tpm << " total " << s.total
            << '\n';
  };
  TeacherModel m;
  try {
    m = train_teacher(c, ctx.cfg.teacher, ctx.cfg.mode, opts);
  } catch (const TrainingDiverged& e) {
    write_json_file(out_path + ".diverged.json", e.dump);
    throw;
  }
  write_json_file(out_path, teacher_to_json(m));
  write_provenance(out_path, "train", ctx.cfg);
  std::ostringstream os;
  os << "trained " << train_mode_name(ctx.cfg.mode) << " teacher: train BCE " << m.log.initial_train_bce << " -> "
     << m.log.final_train_bce << ", wrote " << out_path << '\n';
  print_summary(ctx,
                {{"output", out_path},
                 {"mode", train_mode_name(ctx.cfg.mode)},
                 {"initial_train_bce", m.log.initial_train_bce},
                 {"final_train_bce", m.log.final_train_bce}},
                os.str());
}

inline void cmd_distill(Ctx& ctx, const std::string& model_path, const std::string& corpus_path,
                        const std::string& out_path, const std::string& baseline_path) {
  Corpus c = load_corpus(corpus_path);
  TeacherModel m = load_teacher(model_path);
  check_compatible(m, c);
  const auto Q = teacher_logits(m, c, ctx.cfg.temperature);
  StudentModels s = fit_students(c, Q, ctx.cfg.lambda, ctx.cfg.max_iter, ctx.cfg.temperature);
  write_json_file(out_path, students_to_json(s));
  write_provenance(out_path, "distill", ctx.cfg);
  std::size_t nnz = 0;
  for (const auto& w : s.weights) nnz += w.size();
  json summary{{"output", out_path}, {"students", s.n_codes()}, {"nonzero_weights", nnz}};
  std::ostringstream os;
  os << "fit " << s.n_codes() << " students (" << nnz << " nonzero weights), wrote " << out_path << '\n';
  if (!baseline_path.empty()) {
    StudentModels b = fit_logistic_baseline(c, ctx.cfg.lambda, ctx.cfg.max_iter);
    write_json_file(baseline_path, students_to_json(b));
    write_provenance(baseline_path, "distill", ctx.cfg);
    summary["baseline"] = baseline_path;
    os << "wrote hard-label baseline to " << baseline_path << '\n';
  }
  print_summary(ctx, summary, os.str());
}

inline void cmd_explain(Ctx& ctx, const std::string& method, const std::string& model_path,
                        const std::string& corpus_path, const std::string& out_path, const std::string& weights_path) {
  Corpus c = load_corpus(corpus_path);
  const auto& idx = split_indices(c, ctx.cfg);
  const json mj = read_json_file(model_path);
  std::vector<Snippet> snippets;
  if (method == "attn") {
    if (model_format(mj) != "xrac-teacher-v1") throw ValidationError("--method attn needs a teacher model file");
    TeacherModel m = teacher_from_json(mj);
    snippets = explain_attn_run(m, c, idx, ctx.cfg.snippet_n, ctx.cfg.snippet_m, ctx.cfg.threshold);
    if (!weights_path.empty()) {
      std::ofstream wout(weights_path, std::ios::binary);
      if (!wout) throw ValidationError("cannot write '" + weights_path + "'");
      const Tensor E = embed_code_titles(m);
      for (std::size_t i : idx) {
        const Document& doc = c.documents[i];
        if (doc.tokens.empty()) continue;
        const auto probs = predict_document(m, E, doc);
        std::vector<int> predicted;
        for (std::size_t k = 0; k < probs.size(); ++k)
          if (probs[k] > ctx.cfg.threshold) predicted.push_back(static_cast<int>(k));
        write_attention_jsonl(wout, attention_map(doc, m, E), c.codes, predicted);
      }
    }
  } else {
    if (model_format(mj) != "xrac-students-v1") throw ValidationError("--method kd needs a students model file");
    StudentModels s = students_from_json(mj);
    snippets = explain_kd_run(s, c, idx, ctx.cfg.snippet_n, ctx.cfg.snippet_m, ctx.cfg.threshold);
  }
  std::ostringstream csv;
  write_snippets_csv(csv, snippets, c.codes);
  write_text_file(out_path, csv.str());
  write_provenance(out_path, "explain", ctx.cfg);
  std::ostringstream os;
  os << "wrote " << snippets.size() << " snippets to " << out_path << '\n';
  print_summary(ctx, {{"output", out_path}, {"snippets", snippets.size()}, {"method", method}}, os.str());
}

inline void cmd_evaluate(Ctx& ctx, const std::string& corpus_path, const std::vector<std::string>& runs) {
  Corpus c = load_corpus(corpus_path);
  const auto& idx = split_indices(c, ctx.cfg);
  const GoldSets gold = gold_sets(c, idx);
  std::vector<std::pair<std::string, MetricsReport>> rows;
  json out = json::object();
  for (const auto& spec : runs) {
    const auto eq = spec.find('=');
    const std::string name = eq == std::string::npos ? spec : spec.substr(0, eq);
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    const json mj = read_json_file(path);
    PredictionRun run;
    if (model_format(mj) == "xrac-teacher-v1") {
      run = teacher_run(teacher_from_json(mj), c, idx, ctx.cfg.threshold);
    } else if (model_format(mj) == "xrac-students-v1") {
      run = student_run(students_from_json(mj), c, idx, ctx.cfg.threshold);
    } else {
      throw ValidationError("'" + path + "' is neither a teacher nor a students file");
    }
    MetricsReport r = evaluate_run(run, gold, c.codes);
    out[name] = report_to_json(r);
    rows.emplace_back(name, r);
  }
  print_summary(ctx, {{"split", ctx.cfg.split}, {"documents", idx.size()}, {"runs", out}}, format_metrics_table(rows));
}

inline void cmd_sheet(Ctx& ctx, const std::string& attn_path, const std::string& kd_path,
                      const std::string& corpus_path, const std::string& code_table_path, const std::string& out_path,
                      const std::string& blind_path) {
  auto read_run = [](const std::string& p) {
    std::ifstream in(p);
    if (!in) throw ValidationError("cannot open '" + p + "'");
    return read_snippets_csv(in);
  };
  CodeTable codes = !code_table_path.empty() ? load_code_table_csv(code_table_path) : load_corpus(corpus_path).codes;
  SheetBuild b = build_question_sheet(read_run(attn_path), read_run(kd_path), codes, ctx.cfg.seed);
  for (const auto& w : b.warnings) ctx.err << "warning: " << w << '\n';
  std::ostringstream sheet, blind;
  write_sheet_csv(sheet, b.sheet);
  write_blind_csv(blind, b.sheet);
  write_text_file(out_path, sheet.str());
  write_text_file(blind_path, blind.str());
  write_provenance(out_path, "sheet", ctx.cfg);
  std::ostringstream os;
  os << "wrote " << b.sheet.n_questions() << " questions to " << out_path << " (blind map " << blind_path << ")\n";
  print_summary(ctx, {{"output", out_path}, {"blind", blind_path}, {"questions", b.sheet.n_questions()}}, os.str());
}

inline void cmd_serve(Ctx& ctx, const std::string& sheet_path, const std::string& store, const std::string& host,
                      int port, const std::string& static_dir) {
  QuestionSheet sheet = read_question_sheet(sheet_path);
  AnnotationServer server(std::move(sheet), resolve_store_path(store), static_dir);
  const int bound = server.bind(host, port);
  ctx.err << "serving " << sheet_path << " on http://" << host << ":" << bound << " (store "
          << resolve_store_path(store) << ")\n";
  server.listen();
}

inline void cmd_agree(Ctx& ctx, const std::string& sheet_path, const std::string& blind_path,
                      const std::vector<std::string>& group_a, const std::vector<std::string>& group_b,
                      const std::string& out_path) {
  QuestionSheet sheet = read_question_sheet(sheet_path, blind_path);
  auto ingest = [&](const std::vector<std::string>& files, const std::string& group) {
    AnnotationIngest r = ingest_annotations(sheet, files, {}, group);
    for (const auto& rej : r.rejects) ctx.err << "reject " << rej.source << ":" << rej.line << ": " << rej.reason << '\n';
    for (const auto& w : r.warnings) ctx.err << "warning: " << w << '\n';
    return r.annotations;
  };
  const AnnotationSet a = ingest(group_a, "A");
  const AnnotationSet b = ingest(group_b, "B");
  std::vector<std::string> warnings;
  json report = agreement_report(a, b, sheet.blind_map, &warnings);
  for (const auto& w : warnings) ctx.err << "warning: " << w << '\n';
  if (!out_path.empty()) {
    write_text_file(out_path, report.dump(1) + "\n");
    write_provenance(out_path, "agree", ctx.cfg);
  }
  ctx.out << report.dump(1) << '\n';
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"xrac: explainable medical code prediction"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  bool json_out = false;
  app.add_option("--config", config_path, "flat key = value config file")->check(CLI::ExistingFile);
  app.add_flag("--json", json_out, "machine-readable JSON on stdout");
  ConfigFlags flags;

  std::string out_path, corpus_path, model_path, notes_path, codes_path, method = "attn", weights_path, baseline_path;
  std::string attn_path, kd_path, blind_path, code_table_path, sheet_path, store = "annotations.csv";
  std::string host = "127.0.0.1", static_dir;
  int port = 8080;
  std::vector<std::string> runs, group_a, group_b;

  auto* gen = app.add_subcommand("gen-synth", "generate a planted-signal corpus");
  gen->add_option("-o,--output", out_path, "corpus JSON")->required();
  flags.add(gen, {"docs", "codes", "doc_len", "noise_vocab", "codes_per_doc", "zipf", "max_seq_len", "seed"});

  auto* ing = app.add_subcommand("ingest", "ingest JSONL notes and a code table");
  ing->add_option("--notes", notes_path, "notes JSONL")->required()->check(CLI::ExistingFile);
  ing->add_option("--codes", codes_path, "code table CSV")->required()->check(CLI::ExistingFile);
  ing->add_option("-o,--output", out_path, "corpus JSON")->required();
  flags.add(ing, {"max_seq_len", "min_freq", "split_seed"});

  auto* train = app.add_subcommand("train", "train the teacher");
  train->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  train->add_option("-o,--output", out_path, "teacher JSON")->required();
  flags.add(train, {"mode", "epochs", "lr", "disc_lr", "d", "layers", "alpha", "beta", "batch_size", "momentum",
                    "grad_clip", "max_seq_len", "seed"});

  auto* distill = app.add_subcommand("distill", "fit lasso students on teacher logits");
  distill->add_option("--model", model_path, "teacher JSON")->required()->check(CLI::ExistingFile);
  distill->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  distill->add_option("-o,--output", out_path, "students JSON")->required();
  distill->add_option("--baseline", baseline_path, "also fit the hard-label logistic baseline");
  flags.add(distill, {"lambda", "temperature", "max_iter"});

  auto* explain = app.add_subcommand("explain", "extract evidence snippets for predicted codes");
  explain->add_option("--method", method)->check(CLI::IsMember({"attn", "kd"}));
  explain->add_option("--model", model_path, "teacher JSON (attn) or students JSON (kd)")
      ->required()
      ->check(CLI::ExistingFile);
  explain->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  explain->add_option("-o,--output", out_path, "snippet CSV")->required();
  explain->add_option("--weights-out", weights_path, "attention weights JSONL (attn only)");
  flags.add(explain, {"split", "n", "m", "threshold"});

  auto* evaluate = app.add_subcommand("evaluate", "score one or more runs side by side");
  evaluate->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--run", runs, "NAME=model.json (teacher or students); repeatable")->required();
  flags.add(evaluate, {"split", "threshold"});

  auto* sheet = app.add_subcommand("sheet", "build a blinded question sheet");
  sheet->add_option("--attn", attn_path, "ATTN snippet CSV")->required()->check(CLI::ExistingFile);
  sheet->add_option("--kd", kd_path, "KD snippet CSV")->required()->check(CLI::ExistingFile);
  auto* sheet_src = sheet->add_option_group("codes");
  sheet_src->add_option("--corpus", corpus_path)->check(CLI::ExistingFile);
  sheet_src->add_option("--code-table", code_table_path)->check(CLI::ExistingFile);
  sheet_src->require_option(1);
  sheet->add_option("-o,--output", out_path, "sheet CSV")->required();
  sheet->add_option("--blind", blind_path, "blind map CSV (keep private)")->required();
  flags.add(sheet, {"seed"});

  auto* serve = app.add_subcommand("serve", "run the annotation HTTP service");
  serve->add_option("--sheet", sheet_path)->required()->check(CLI::ExistingFile);
  serve->add_option("--store", store, "append-only judgment CSV");
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--static", static_dir, "UI bundle directory served at /")->check(CLI::ExistingDirectory);

  auto* agree = app.add_subcommand("agree", "informativeness counts and inter-group agreement");
  agree->add_option("--sheet", sheet_path)->required()->check(CLI::ExistingFile);
  agree->add_option("--blind", blind_path)->required()->check(CLI::ExistingFile);
  agree->add_option("--group-a", group_a, "annotation CSVs of group A")->required();
  agree->add_option("--group-b", group_b, "annotation CSVs of group B")->required();
  agree->add_option("-o,--output", out_path, "also write the report here");

  for (auto* sub : {gen, ing, train, distill, explain, evaluate, sheet, serve, agree}) flags.add_set(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  Ctx ctx{RunConfig{}, json_out, out, err};
  try {
    if (!config_path.empty())
      for (const auto& [k, v] : read_config_file(config_path)) ctx.cfg.set(k, v);
    for (const auto& [k, v] : flags.overrides()) ctx.cfg.set(k, v);
    ctx.cfg.teacher.validate();
    for (const auto& [name, val] : std::vector<std::pair<std::string, std::string>>{
             {"output", out_path}, {"corpus", corpus_path}, {"model", model_path}, {"notes", notes_path},
             {"codes", codes_path}, {"attn", attn_path}, {"kd", kd_path}, {"blind", blind_path},
             {"code_table", code_table_path}, {"sheet", sheet_path}, {"baseline", baseline_path}}) {
      if (!val.empty()) ctx.cfg.paths[name] = val;
    }
    if (gen->parsed()) cmd_gen_synth(ctx, out_path);
    else if (ing->parsed()) cmd_ingest(ctx, notes_path, codes_path, out_path);
    else if (train->parsed()) cmd_train(ctx, corpus_path, out_path);
    else if (distill->parsed()) cmd_distill(ctx, model_path, corpus_path, out_path, baseline_path);
    else if (explain->parsed()) cmd_explain(ctx, method, model_path, corpus_path, out_path, weights_path);
    else if (evaluate->parsed()) cmd_evaluate(ctx, corpus_path, runs);
    else if (sheet->parsed()) cmd_sheet(ctx, attn_path, kd_path, corpus_path, code_table_path, out_path, blind_path);
    else if (serve->parsed()) cmd_serve(ctx, sheet_path, store, host, port, static_dir);
    else if (agree->parsed()) cmd_agree(ctx, sheet_path, blind_path, group_a, group_b, out_path);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace xrac
