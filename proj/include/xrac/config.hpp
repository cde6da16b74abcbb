#pragma once

// Run configuration: defaults, a flat `key = value` file, then flag overrides.

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "xrac/corpus.hpp"
#include "xrac/errors.hpp"
#include "xrac/teacher.hpp"

namespace xrac {

struct RunConfig {
  TeacherConfig teacher;
  TrainMode mode = TrainMode::BceOnly;
  double lambda = 1e-3;
  double temperature = 1.0;
  std::size_t max_iter = 800;
  std::size_t snippet_n = 4;
  std::size_t snippet_m = 5;
  double threshold = 0.5;
  std::uint64_t seed = 7;
  int min_freq = 1;
  std::uint64_t split_seed = 0;
  std::string split = "test";
  PlantedSpec planted;
  // Input and output paths given on the command line, by flag name.
  std::map<std::string, std::string> paths;

  void set(const std::string& key, const std::string& value);
};

namespace detail {
template <class T>
T parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    T out{};
    if constexpr (std::is_floating_point_v<T>) {
      out = static_cast<T>(std::stod(v, &used));
    } else if constexpr (std::is_signed_v<T>) {
      out = static_cast<T>(std::stoll(v, &used));
    } else {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
      out = static_cast<T>(std::stoull(v, &used));
    }
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::logic_error&) {
    throw ValidationError("config key '" + key + "': cannot parse '" + v + "'");
  }
}
inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}
}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  using detail::parse_number;
  auto& t = teacher;
  if (key == "alpha") t.alpha = parse_number<double>(key, value);
  else if (key == "beta") t.beta = parse_number<double>(key, value);
  else if (key == "d") t.d = parse_number<std::size_t>(key, value);
  else if (key == "layers") t.n_layers = parse_number<std::size_t>(key, value);
  else if (key == "heads") t.n_heads = parse_number<std::size_t>(key, value);
  else if (key == "cnn_kernel") t.cnn_kernel = parse_number<std::size_t>(key, value);
  else if (key == "ffn_mult") t.ffn_mult = parse_number<std::size_t>(key, value);
  else if (key == "max_seq_len") {
    t.max_seq_len = parse_number<std::size_t>(key, value);
    planted.max_seq_len = t.max_seq_len;
  } else if (key == "lr") t.learning_rate = parse_number<double>(key, value);
  else if (key == "disc_lr") t.disc_learning_rate = parse_number<double>(key, value);
  else if (key == "momentum") t.momentum = parse_number<double>(key, value);
  else if (key == "grad_clip") t.grad_clip = parse_number<double>(key, value);
  else if (key == "batch_size") t.batch_size = parse_number<std::size_t>(key, value);
  else if (key == "epochs") t.epochs = parse_number<std::size_t>(key, value);
  else if (key == "mode") {
    try {
      mode = parse_train_mode(value);
    } catch (const DomainError& e) {
      throw ValidationError(e.what());
    }
  } else if (key == "lambda") lambda = parse_number<double>(key, value);
  else if (key == "temperature") temperature = parse_number<double>(key, value);
  else if (key == "max_iter") max_iter = parse_number<std::size_t>(key, value);
  else if (key == "n") snippet_n = parse_number<std::size_t>(key, value);
  else if (key == "m") snippet_m = parse_number<std::size_t>(key, value);
  else if (key == "threshold") threshold = parse_number<double>(key, value);
  else if (key == "seed") {
    seed = parse_number<std::uint64_t>(key, value);
    t.seed = seed;
  } else if (key == "min_freq") min_freq = parse_number<int>(key, value);
  else if (key == "split_seed") split_seed = parse_number<std::uint64_t>(key, value);
  else if (key == "split") {
    if (!parse_split(value)) throw ValidationError("config key 'split': expected train, val or test");
    split = value;
  } else if (key == "docs") planted.n_docs = parse_number<std::size_t>(key, value);
  else if (key == "codes") planted.n_codes = parse_number<std::size_t>(key, value);
  else if (key == "doc_len") planted.doc_len = parse_number<std::size_t>(key, value);
  else if (key == "noise_vocab") planted.vocab_noise_size = parse_number<std::size_t>(key, value);
  else if (key == "codes_per_doc") planted.codes_per_doc_mean = parse_number<double>(key, value);
  else if (key == "zipf") planted.zipf = parse_number<double>(key, value);
  else throw ValidationError("unknown config key '" + key + "'");
}

// Lines of `key = value`; blank lines and lines starting with '#' are skipped.
inline std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path + "'");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", no);
    out.emplace_back(detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
  }
  return out;
}

inline json config_to_json(const RunConfig& c) {
  return {{"teacher", c.teacher},
          {"mode", train_mode_name(c.mode)},
          {"lambda", c.lambda},
          {"temperature", c.temperature},
          {"max_iter", c.max_iter},
          {"n", c.snippet_n},
          {"m", c.snippet_m},
          {"threshold", c.threshold},
          {"seed", c.seed},
          {"min_freq", c.min_freq},
          {"split_seed", c.split_seed},
          {"split", c.split},
          {"planted",
           {{"docs", c.planted.n_docs},
            {"codes", c.planted.n_codes},
            {"doc_len", c.planted.doc_len},
            {"noise_vocab", c.planted.vocab_noise_size},
            {"codes_per_doc", c.planted.codes_per_doc_mean},
            {"zipf", c.planted.zipf},
            {"max_seq_len", c.planted.max_seq_len}}},
          {"paths", c.paths}};
}

}  // namespace xrac
