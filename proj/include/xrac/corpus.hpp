#pragma once

// Notes, code tables, vocabulary and the two document views: the token id
// sequence read by the teacher and the bag-of-words counts fed to students.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xrac/csv.hpp"
#include "xrac/errors.hpp"
#include "xrac/numerics.hpp"

namespace xrac {

using json = nlohmann::json;

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kUnkToken = "<unk>";

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

// Lowercase, non-alphanumerics to spaces, whitespace split, pure-numeric
// tokens dropped.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  bool has_alpha = false;
  auto flush = [&]() {
    if (!cur.empty() && has_alpha) out.push_back(cur);
    cur.clear();
    has_alpha = false;
  };
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
      has_alpha = has_alpha || std::isalpha(c);
    } else {
      flush();
    }
  }
  flush();
  return out;
}

struct CodeEntry {
  int code_id = 0;
  std::string code;
  std::string description;
  std::optional<std::string> parent;
};

class CodeTable {
 public:
  CodeTable() = default;

  // Entries get dense ids in insertion order. Parents must name entries of
  // the table and must not form a cycle.
  explicit CodeTable(std::vector<CodeEntry> entries) : entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      entries_[i].code_id = static_cast<int>(i);
      if (!index_.emplace(entries_[i].code, static_cast<int>(i)).second) {
        throw ValidationError("duplicate code '" + entries_[i].code + "'");
      }
    }
    parent_id_.assign(entries_.size(), -1);
    for (const auto& e : entries_) {
      if (!e.parent) continue;
      auto it = index_.find(*e.parent);
      if (it == index_.end()) {
        throw ValidationError("code '" + e.code + "' has unknown parent '" + *e.parent + "'");
      }
      parent_id_[e.code_id] = it->second;
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      std::size_t steps = 0;
      for (int p = parent_id_[i]; p >= 0; p = parent_id_[p]) {
        if (++steps > entries_.size()) throw ValidationError("cycle in parent links at '" + entries_[i].code + "'");
      }
    }
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<CodeEntry>& entries() const { return entries_; }
  const CodeEntry& operator[](std::size_t i) const { return entries_[i]; }
  std::optional<int> find(const std::string& code) const {
    auto it = index_.find(code);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  int parent_of(int id) const { return parent_id_[id]; }
  bool has_hierarchy() const {
    return std::any_of(parent_id_.begin(), parent_id_.end(), [](int p) { return p >= 0; });
  }
  bool operator==(const CodeTable& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto &a = entries_[i], &b = o.entries_[i];
      if (a.code != b.code || a.description != b.description || a.parent != b.parent) return false;
    }
    return true;
  }

 private:
  std::vector<CodeEntry> entries_;
  std::unordered_map<std::string, int> index_;
  std::vector<int> parent_id_;
};

// CSV with header `code,description,parent`.
inline CodeTable load_code_table_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open code table '" + path + "'");
  auto rows = read_csv(in);
  if (rows.empty()) throw ParseError("empty code table", 1);
  const std::vector<std::string> expected{"code", "description", "parent"};
  if (rows[0] != expected) throw ParseError("code table header must be code,description,parent", 1);
  std::vector<CodeEntry> entries;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() == 1 && r[0].empty()) continue;
    if (r.size() != 3) throw ParseError("expected 3 fields", i + 1);
    if (r[0].empty()) throw ParseError("empty code", i + 1);
    CodeEntry e;
    e.code = r[0];
    e.description = r[1];
    if (!r[2].empty()) e.parent = r[2];
    entries.push_back(std::move(e));
  }
  return CodeTable(std::move(entries));
}

class Vocabulary {
 public:
  Vocabulary() : tokens_{kPadToken, kUnkToken}, freqs_{0, 0} { reindex(); }
  Vocabulary(std::vector<std::string> tokens, std::vector<std::int64_t> freqs)
      : tokens_(std::move(tokens)), freqs_(std::move(freqs)) {
    if (tokens_.size() < 2 || tokens_[0] != kPadToken || tokens_[1] != kUnkToken || freqs_.size() != tokens_.size()) {
      throw ValidationError("vocabulary must start with <pad>, <unk> and carry one frequency per token");
    }
    reindex();
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::int64_t frequency(int id) const { return freqs_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::int64_t>& frequencies() const { return freqs_; }
  int id_of(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnkId : it->second;
  }
  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }

  // Order-sensitive hash over the token list.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens_) {
      h = fnv1a(t, h);
      h = fnv1a(std::string_view("\x1f", 1), h);
    }
    return hex64(h);
  }
  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_ && freqs_ == o.freqs_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
        throw ValidationError("duplicate vocabulary token '" + tokens_[i] + "'");
      }
    }
  }
  std::vector<std::string> tokens_;
  std::vector<std::int64_t> freqs_;
  std::unordered_map<std::string, int> index_;
};

// Sorted (feature id, value) pairs.
using SparseVector = std::vector<std::pair<int, double>>;

enum class Split { Train, Validation, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "val";
    case Split::Test: return "test";
  }
  return "train";
}
inline std::optional<Split> parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val" || s == "validation") return Split::Validation;
  if (s == "test") return Split::Test;
  return std::nullopt;
}

struct Document {
  std::string doc_id;
  std::vector<std::string> words;  // full tokenization
  std::vector<int> tokens;         // x_t: ids of the first max_seq_len words
  SparseVector bow;                // x_s: counts over all words
  std::set<int> gold_codes;
  Split split = Split::Train;
  bool empty() const { return words.empty(); }
};

struct Corpus {
  std::vector<Document> documents;
  std::vector<std::size_t> train, validation, test;
  Vocabulary vocab;
  CodeTable codes;
  std::size_t max_seq_len = 512;

  const std::vector<std::size_t>& indices(Split s) const {
    switch (s) {
      case Split::Train: return train;
      case Split::Validation: return validation;
      case Split::Test: return test;
    }
    return train;
  }
  void rebuild_splits() {
    train.clear();
    validation.clear();
    test.clear();
    for (std::size_t i = 0; i < documents.size(); ++i) {
      switch (documents[i].split) {
        case Split::Train: train.push_back(i); break;
        case Split::Validation: validation.push_back(i); break;
        case Split::Test: test.push_back(i); break;
      }
    }
  }
};

inline SparseVector vectorize_bow(const Document& doc, const Vocabulary& vocab) {
  std::map<int, double> counts;
  for (const auto& w : doc.words) counts[vocab.id_of(w)] += 1.0;
  return SparseVector(counts.begin(), counts.end());
}

// Train-split frequencies; ids by descending frequency, ties lexicographic.
inline Vocabulary build_vocab(const Corpus& corpus, int min_freq) {
  if (min_freq < 1) throw DomainError("build_vocab: min_freq must be >= 1");
  if (corpus.train.empty()) throw ValidationError("build_vocab: empty training split");
  std::unordered_map<std::string, std::int64_t> freq;
  for (std::size_t i : corpus.train)
    for (const auto& w : corpus.documents[i].words) ++freq[w];
  std::vector<std::pair<std::string, std::int64_t>> kept;
  for (auto& [tok, f] : freq)
    if (f >= min_freq && tok != kPadToken && tok != kUnkToken) kept.emplace_back(tok, f);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens{kPadToken, kUnkToken};
  std::vector<std::int64_t> freqs{0, 0};
  for (auto& [tok, f] : kept) {
    tokens.push_back(tok);
    freqs.push_back(f);
  }
  return Vocabulary(std::move(tokens), std::move(freqs));
}

// Installs a vocabulary and recomputes both views of every document.
inline void apply_vocab(Corpus& corpus, Vocabulary vocab) {
  corpus.vocab = std::move(vocab);
  for (auto& d : corpus.documents) {
    const std::size_t n = std::min(d.words.size(), corpus.max_seq_len);
    d.tokens.resize(n);
    for (std::size_t j = 0; j < n; ++j) d.tokens[j] = corpus.vocab.id_of(d.words[j]);
    d.bow = vectorize_bow(d, corpus.vocab);
  }
}

struct IngestConfig {
  std::size_t max_seq_len = 512;
  int min_freq = 1;
  std::uint64_t split_seed = 0;
};

struct IngestReject {
  std::size_t line = 0;
  std::string doc_id;
  std::string code;
  std::string reason;
};

struct IngestResult {
  Corpus corpus;
  std::vector<IngestReject> rejects;
  std::vector<std::string> empty_docs;
};

// 80/10/10 by a seeded hash of the document id.
inline Split hashed_split(const std::string& doc_id, std::uint64_t seed) {
  const std::uint64_t h = fnv1a(doc_id, fnv1a(std::to_string(seed)));
  const std::uint64_t b = h % 10;
  return b < 8 ? Split::Train : (b == 8 ? Split::Validation : Split::Test);
}

inline IngestResult ingest_corpus(std::istream& notes, CodeTable codes, const IngestConfig& cfg) {
  if (cfg.max_seq_len < 1) throw DomainError("max_seq_len must be >= 1");
  IngestResult res;
  Corpus& c = res.corpus;
  c.codes = std::move(codes);
  c.max_seq_len = cfg.max_seq_len;
  std::string line;
  std::size_t line_no = 0;
  std::unordered_set<std::string> seen_ids;
  while (std::getline(notes, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("text") ||
        !j["text"].is_string()) {
      throw ParseError("note needs string fields 'id' and 'text'", line_no);
    }
    Document d;
    d.doc_id = j["id"].get<std::string>();
    if (!seen_ids.insert(d.doc_id).second) throw ParseError("duplicate note id '" + d.doc_id + "'", line_no);
    d.words = tokenize(j["text"].get<std::string>());
    if (j.contains("codes")) {
      if (!j["codes"].is_array()) throw ParseError("'codes' must be an array", line_no);
      for (const auto& cj : j["codes"]) {
        if (!cj.is_string()) throw ParseError("codes must be strings", line_no);
        const auto code = cj.get<std::string>();
        if (auto id = c.codes.find(code)) {
          d.gold_codes.insert(*id);
        } else {
          res.rejects.push_back({line_no, d.doc_id, code, "unknown code"});
        }
      }
    }
    if (j.contains("split") && !j["split"].is_null()) {
      auto s = j["split"].is_string() ? parse_split(j["split"].get<std::string>()) : std::nullopt;
      if (!s) throw ParseError("split must be train, val or test", line_no);
      d.split = *s;
    } else {
      d.split = hashed_split(d.doc_id, cfg.split_seed);
    }
    if (d.words.empty()) res.empty_docs.push_back(d.doc_id);
    c.documents.push_back(std::move(d));
  }
  c.rebuild_splits();
  apply_vocab(c, build_vocab(c, cfg.min_freq));
  return res;
}

inline IngestResult ingest_corpus(const std::string& notes_path, const std::string& codes_path,
                                  const IngestConfig& cfg) {
  CodeTable codes = load_code_table_csv(codes_path);
  std::ifstream in(notes_path);
  if (!in) throw ValidationError("cannot open notes file '" + notes_path + "'");
  return ingest_corpus(in, std::move(codes), cfg);
}

struct PlantedSpec {
  std::size_t n_docs = 2000;
  std::size_t n_codes = 20;
  std::size_t vocab_noise_size = 200;
  std::size_t trigger_per_code = 1;
  std::size_t doc_len = 60;
  double codes_per_doc_mean = 3.0;
  // Code-frequency skew: weight of the code at rank r is 1 / (r + 1)^zipf.
  double zipf = 0.0;
  std::size_t max_seq_len = 512;
  std::string noise_prefix = "w";
  std::string trigger_prefix = "trigger";
};

inline std::string planted_trigger(const PlantedSpec& spec, std::size_t code) {
  std::ostringstream os;
  os << spec.trigger_prefix;
  os.width(3);
  os.fill('0');
  os << code;
  os << 'x';
  return os.str();
}

// Code i is carried by a document iff its trigger token occurs in it; every
// other position is uniform noise.
inline Corpus generate_planted_corpus(const PlantedSpec& spec, std::uint64_t seed) {
  if (spec.n_docs < 1 || spec.n_codes < 1 || spec.vocab_noise_size < 1 || spec.doc_len < 1 ||
      spec.codes_per_doc_mean < 1.0 || spec.max_seq_len < 1) {
    throw DomainError("generate_planted_corpus: sizes must be >= 1");
  }
  if (spec.trigger_per_code != 1) throw DomainError("generate_planted_corpus: trigger_per_code must be 1");
  std::vector<std::string> noise(spec.vocab_noise_size), triggers(spec.n_codes);
  for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = spec.noise_prefix + std::to_string(i);
  std::unordered_set<std::string> pool;
  for (const auto& w : noise) pool.insert(w);
  for (std::size_t i = 0; i < spec.n_codes; ++i) {
    triggers[i] = planted_trigger(spec, i);
    if (tokenize(triggers[i]) != std::vector<std::string>{triggers[i]} || !pool.insert(triggers[i]).second) {
      throw ValidationError("trigger token '" + triggers[i] + "' collides with the noise vocabulary");
    }
  }
  for (const auto& w : noise) {
    if (tokenize(w) != std::vector<std::string>{w}) throw ValidationError("noise token '" + w + "' is not a single token");
  }

  std::vector<CodeEntry> entries;
  for (std::size_t i = 0; i < spec.n_codes; ++i) {
    std::ostringstream code;
    code << 'C';
    code.width(3);
    code.fill('0');
    code << i;
    entries.push_back({0, code.str(), "condition " + triggers[i], std::nullopt});
  }

  std::vector<double> weight(spec.n_codes);
  for (std::size_t i = 0; i < spec.n_codes; ++i) weight[i] = 1.0 / std::pow(static_cast<double>(i + 1), spec.zipf);

  Rng rng(seed);
  Corpus c;
  c.codes = CodeTable(std::move(entries));
  c.max_seq_len = spec.max_seq_len;
  const std::size_t n_train = spec.n_docs * 8 / 10;
  const std::size_t n_val = spec.n_docs * 9 / 10 - n_train;
  for (std::size_t d = 0; d < spec.n_docs; ++d) {
    // Knuth Poisson for the number of extra codes.
    std::size_t k = 1;
    if (spec.codes_per_doc_mean > 1.0) {
      const double limit = std::exp(-(spec.codes_per_doc_mean - 1.0));
      double prod = rng.uniform();
      while (prod > limit) {
        ++k;
        prod *= rng.uniform();
      }
    }
    k = std::min({k, spec.n_codes, spec.doc_len});
    std::vector<double> w = weight;
    std::set<int> chosen;
    for (std::size_t t = 0; t < k; ++t) {
      double total = 0.0;
      for (double v : w) total += v;
      double u = rng.uniform() * total;
      std::size_t pick = 0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] == 0.0) continue;
        pick = i;
        if (u < w[i]) break;
        u -= w[i];
      }
      chosen.insert(static_cast<int>(pick));
      w[pick] = 0.0;
    }
    std::vector<std::size_t> positions(spec.doc_len);
    std::iota(positions.begin(), positions.end(), 0);
    rng.shuffle(positions);
    Document doc;
    doc.words.resize(spec.doc_len);
    for (auto& word : doc.words) word = noise[rng.below(noise.size())];
    std::size_t slot = 0;
    for (int code : chosen) doc.words[positions[slot++]] = triggers[code];
    doc.gold_codes = chosen;
    std::ostringstream id;
    id << "doc";
    id.width(5);
    id.fill('0');
    id << d;
    doc.doc_id = id.str();
    doc.split = d < n_train ? Split::Train : (d < n_train + n_val ? Split::Validation : Split::Test);
    c.documents.push_back(std::move(doc));
  }
  c.rebuild_splits();
  apply_vocab(c, build_vocab(c, 1));
  return c;
}

inline json corpus_to_json(const Corpus& c) {
  json codes = json::array();
  for (const auto& e : c.codes.entries()) {
    codes.push_back({{"code", e.code},
                     {"description", e.description},
                     {"parent", e.parent ? json(*e.parent) : json(nullptr)}});
  }
  json docs = json::array();
  for (const auto& d : c.documents) {
    docs.push_back({{"id", d.doc_id},
                    {"split", split_name(d.split)},
                    {"codes", std::vector<int>(d.gold_codes.begin(), d.gold_codes.end())},
                    {"words", d.words}});
  }
  return {{"format", "xrac-corpus-v1"},
          {"max_seq_len", c.max_seq_len},
          {"vocab", {{"tokens", c.vocab.tokens()}, {"freqs", c.vocab.frequencies()}, {"hash", c.vocab.hash()}}},
          {"codes", std::move(codes)},
          {"documents", std::move(docs)}};
}

inline Corpus corpus_from_json(const json& j) {
  if (j.value("format", "") != "xrac-corpus-v1") throw ValidationError("not an xrac-corpus-v1 file");
  Corpus c;
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  std::vector<CodeEntry> entries;
  for (const auto& e : j.at("codes")) {
    CodeEntry ce;
    ce.code = e.at("code").get<std::string>();
    ce.description = e.at("description").get<std::string>();
    if (!e.at("parent").is_null()) ce.parent = e.at("parent").get<std::string>();
    entries.push_back(std::move(ce));
  }
  c.codes = CodeTable(std::move(entries));
  for (const auto& dj : j.at("documents")) {
    Document d;
    d.doc_id = dj.at("id").get<std::string>();
    auto s = parse_split(dj.at("split").get<std::string>());
    if (!s) throw ValidationError("bad split for document '" + d.doc_id + "'");
    d.split = *s;
    for (int code : dj.at("codes").get<std::vector<int>>()) {
      if (code < 0 || static_cast<std::size_t>(code) >= c.codes.size()) {
        throw ValidationError("document '" + d.doc_id + "' references unknown code id");
      }
      d.gold_codes.insert(code);
    }
    d.words = dj.at("words").get<std::vector<std::string>>();
    c.documents.push_back(std::move(d));
  }
  c.rebuild_splits();
  Vocabulary vocab(j.at("vocab").at("tokens").get<std::vector<std::string>>(),
                   j.at("vocab").at("freqs").get<std::vector<std::int64_t>>());
  apply_vocab(c, std::move(vocab));
  return c;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("'" + path + "': " + e.what());
  }
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out << j.dump(1) << '\n';
}

inline Corpus load_corpus(const std::string& path) { return corpus_from_json(read_json_file(path)); }

}  // namespace xrac
