#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sesom/errors.hpp"
#include "sesom/numerics.hpp"
#include "sesom/tasks.hpp"

namespace sesom {

// Flat experiment configuration, one struct per TOML section. Defaults are
// the desk-scale setup every test and report in this repo uses.
struct BackboneSection {
  int dim = 32;
  int max_source_length = 64;
  std::string checkpoint;  // empty means pretrain inside the run
  double learning_rate = 5e-3;
  int epochs = 20;
  int batch_size = 32;
  std::uint64_t seed = 11;
};

struct PromptSection {
  int length = 5;
  std::string init = "vocab_rows";  // or "gaussian"
  double learning_rate = 0.3;
  int epochs = 10;
  int batch_size = 32;
  double weight_decay = 0.01;
  std::uint64_t seed = 101;
  std::string dir;  // empty means train sources inside the run
};

struct AdaptSection {
  bool enabled = true;
  double learning_rate = 0.05;
  int epochs = 5;
  int batch_size = 32;
  double weight_decay = 0.01;
};

struct GSection {
  int dx = 32;
  int dl = 32;
  int dp = 32;
  double dropout = 0.0;
  std::string activation = "relu";
  double learning_rate = 0.05;
  int epochs = 300;
  int batch_size = 16;
  double weight_decay = 0.01;
};

struct RunSection {
  std::string method = "sesom";
  int shots = 32;
  int n_seeds = 20;
  std::uint64_t seed_offset = 0;
  std::string out_dir = "out";
  int top_sources = 0;  // 0 means use all sources
  int pseudo_pool = 512;
  int case_samples = 8;
};

struct DataSection {
  int n_target = 2064;
  int n_source_train = 256;
  int n_pretrain = 720;
  std::uint64_t seed = 500;
};

struct ExperimentConfig {
  SuiteConfig suite;
  DataSection data;
  BackboneSection backbone;
  PromptSection prompts;
  AdaptSection adapt;
  GSection g;
  RunSection run;
};

inline const std::set<std::string>& method_names() {
  static const std::set<std::string> names = {
      "sesom",      "uniform",      "majority_vote",
      "fixed_weight", "hard_variant", "acc_sp",
      "spot_t",     "pseudo_label", "single_source"};
  return names;
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string fmt_string(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline double parse_double(const std::string& where, const std::string& text) {
  const char* begin = text.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end != begin + text.size() || text.empty())
    throw ConfigError(where + ": expected a number, got '" + text + "'");
  return v;
}

template <class T>
T parse_integer(const std::string& where, const std::string& text) {
  T v{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size())
    throw ConfigError(where + ": expected an integer, got '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& where, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError(where + ": expected true or false, got '" + text + "'");
}

inline std::string parse_string(const std::string& where, const std::string& text) {
  if (text.size() < 2 || text.front() != '"' || text.back() != '"')
    throw ConfigError(where + ": expected a quoted string, got '" + text + "'");
  std::string out;
  for (std::size_t i = 1; i + 1 < text.size(); ++i) {
    if (text[i] == '\\') {
      ++i;
      if (i + 1 >= text.size() || (text[i] != '"' && text[i] != '\\'))
        throw ConfigError(where + ": bad escape in string");
    }
    out.push_back(text[i]);
  }
  return out;
}

// One declarative entry per config field: the same table drives parsing
// and the canonical writer, so the snapshot format cannot drift from the
// schema.
struct Field {
  std::string key;
  std::function<std::string(ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
};

using Section = std::pair<std::string, std::vector<Field>>;

inline std::vector<Section> schema() {
  std::vector<Section> out;

  auto add = [&out](std::string name) -> std::vector<Field>& {
    out.push_back({std::move(name), {}});
    return out.back().second;
  };

  auto f_int = [](std::string key, std::function<int&(ExperimentConfig&)> ref) {
    return Field{std::move(key),
                 [ref](ExperimentConfig& c) { return std::to_string(ref(c)); },
                 [ref](ExperimentConfig& c, const std::string& w, const std::string& v) {
                   ref(c) = parse_integer<int>(w, v);
                 }};
  };
  auto f_u64 = [](std::string key, std::function<std::uint64_t&(ExperimentConfig&)> ref) {
    return Field{std::move(key),
                 [ref](ExperimentConfig& c) { return std::to_string(ref(c)); },
                 [ref](ExperimentConfig& c, const std::string& w, const std::string& v) {
                   ref(c) = parse_integer<std::uint64_t>(w, v);
                 }};
  };
  auto f_dbl = [](std::string key, std::function<double&(ExperimentConfig&)> ref) {
    return Field{std::move(key),
                 [ref](ExperimentConfig& c) { return fmt_double(ref(c)); },
                 [ref](ExperimentConfig& c, const std::string& w, const std::string& v) {
                   ref(c) = parse_double(w, v);
                 }};
  };
  auto f_str = [](std::string key, std::function<std::string&(ExperimentConfig&)> ref) {
    return Field{std::move(key),
                 [ref](ExperimentConfig& c) { return fmt_string(ref(c)); },
                 [ref](ExperimentConfig& c, const std::string& w, const std::string& v) {
                   ref(c) = parse_string(w, v);
                 }};
  };
  auto f_bool = [](std::string key, std::function<bool&(ExperimentConfig&)> ref) {
    return Field{std::move(key),
                 [ref](ExperimentConfig& c) {
                   return std::string(ref(c) ? "true" : "false");
                 },
                 [ref](ExperimentConfig& c, const std::string& w, const std::string& v) {
                   ref(c) = parse_bool(w, v);
                 }};
  };

  {
    auto& s = add("suite");
    s.push_back(f_int("n_sources", [](ExperimentConfig& c) -> int& { return c.suite.n_sources; }));
    s.push_back(f_int("block_size", [](ExperimentConfig& c) -> int& { return c.suite.block_size; }));
    s.push_back(f_int("first_feature", [](ExperimentConfig& c) -> int& { return c.suite.first_feature; }));
    s.push_back(f_int("first_background", [](ExperimentConfig& c) -> int& { return c.suite.first_background; }));
    s.push_back(f_int("vocab", [](ExperimentConfig& c) -> int& { return c.suite.vocab; }));
    s.push_back(f_dbl("mixed_fraction", [](ExperimentConfig& c) -> double& { return c.suite.mixed_fraction; }));
    s.push_back(f_dbl("noise_rate", [](ExperimentConfig& c) -> double& { return c.suite.noise_rate; }));
    s.push_back(f_int("min_length", [](ExperimentConfig& c) -> int& { return c.suite.min_length; }));
    s.push_back(f_int("max_length", [](ExperimentConfig& c) -> int& { return c.suite.max_length; }));
    s.push_back(f_int("n_signal", [](ExperimentConfig& c) -> int& { return c.suite.n_signal; }));
  }
  {
    auto& s = add("data");
    s.push_back(f_int("n_target", [](ExperimentConfig& c) -> int& { return c.data.n_target; }));
    s.push_back(f_int("n_source_train", [](ExperimentConfig& c) -> int& { return c.data.n_source_train; }));
    s.push_back(f_int("n_pretrain", [](ExperimentConfig& c) -> int& { return c.data.n_pretrain; }));
    s.push_back(f_u64("seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.data.seed; }));
  }
  {
    auto& s = add("backbone");
    s.push_back(f_int("dim", [](ExperimentConfig& c) -> int& { return c.backbone.dim; }));
    s.push_back(f_int("max_source_length", [](ExperimentConfig& c) -> int& { return c.backbone.max_source_length; }));
    s.push_back(f_str("checkpoint", [](ExperimentConfig& c) -> std::string& { return c.backbone.checkpoint; }));
    s.push_back(f_dbl("learning_rate", [](ExperimentConfig& c) -> double& { return c.backbone.learning_rate; }));
    s.push_back(f_int("epochs", [](ExperimentConfig& c) -> int& { return c.backbone.epochs; }));
    s.push_back(f_int("batch_size", [](ExperimentConfig& c) -> int& { return c.backbone.batch_size; }));
    s.push_back(f_u64("seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.backbone.seed; }));
  }
  {
    auto& s = add("prompts");
    s.push_back(f_int("length", [](ExperimentConfig& c) -> int& { return c.prompts.length; }));
    s.push_back(f_str("init", [](ExperimentConfig& c) -> std::string& { return c.prompts.init; }));
    s.push_back(f_dbl("learning_rate", [](ExperimentConfig& c) -> double& { return c.prompts.learning_rate; }));
    s.push_back(f_int("epochs", [](ExperimentConfig& c) -> int& { return c.prompts.epochs; }));
    s.push_back(f_int("batch_size", [](ExperimentConfig& c) -> int& { return c.prompts.batch_size; }));
    s.push_back(f_dbl("weight_decay", [](ExperimentConfig& c) -> double& { return c.prompts.weight_decay; }));
    s.push_back(f_u64("seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.prompts.seed; }));
    s.push_back(f_str("dir", [](ExperimentConfig& c) -> std::string& { return c.prompts.dir; }));
  }
  {
    auto& s = add("adapt");
    s.push_back(f_bool("enabled", [](ExperimentConfig& c) -> bool& { return c.adapt.enabled; }));
    s.push_back(f_dbl("learning_rate", [](ExperimentConfig& c) -> double& { return c.adapt.learning_rate; }));
    s.push_back(f_int("epochs", [](ExperimentConfig& c) -> int& { return c.adapt.epochs; }));
    s.push_back(f_int("batch_size", [](ExperimentConfig& c) -> int& { return c.adapt.batch_size; }));
    s.push_back(f_dbl("weight_decay", [](ExperimentConfig& c) -> double& { return c.adapt.weight_decay; }));
  }
  {
    auto& s = add("g");
    s.push_back(f_int("dx", [](ExperimentConfig& c) -> int& { return c.g.dx; }));
    s.push_back(f_int("dl", [](ExperimentConfig& c) -> int& { return c.g.dl; }));
    s.push_back(f_int("dp", [](ExperimentConfig& c) -> int& { return c.g.dp; }));
    s.push_back(f_dbl("dropout", [](ExperimentConfig& c) -> double& { return c.g.dropout; }));
    s.push_back(f_str("activation", [](ExperimentConfig& c) -> std::string& { return c.g.activation; }));
    s.push_back(f_dbl("learning_rate", [](ExperimentConfig& c) -> double& { return c.g.learning_rate; }));
    s.push_back(f_int("epochs", [](ExperimentConfig& c) -> int& { return c.g.epochs; }));
    s.push_back(f_int("batch_size", [](ExperimentConfig& c) -> int& { return c.g.batch_size; }));
    s.push_back(f_dbl("weight_decay", [](ExperimentConfig& c) -> double& { return c.g.weight_decay; }));
  }
  {
    auto& s = add("run");
    s.push_back(f_str("method", [](ExperimentConfig& c) -> std::string& { return c.run.method; }));
    s.push_back(f_int("shots", [](ExperimentConfig& c) -> int& { return c.run.shots; }));
    s.push_back(f_int("n_seeds", [](ExperimentConfig& c) -> int& { return c.run.n_seeds; }));
    s.push_back(f_u64("seed_offset", [](ExperimentConfig& c) -> std::uint64_t& { return c.run.seed_offset; }));
    s.push_back(f_str("out_dir", [](ExperimentConfig& c) -> std::string& { return c.run.out_dir; }));
    s.push_back(f_int("top_sources", [](ExperimentConfig& c) -> int& { return c.run.top_sources; }));
    s.push_back(f_int("pseudo_pool", [](ExperimentConfig& c) -> int& { return c.run.pseudo_pool; }));
    s.push_back(f_int("case_samples", [](ExperimentConfig& c) -> int& { return c.run.case_samples; }));
  }
  return out;
}

// Strips a trailing comment, honoring quoted strings.
inline std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_string && c == '\\') {
      ++i;
      continue;
    }
    if (c == '"') in_string = !in_string;
    if (c == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

// Parses the TOML subset used by this project: [sections], scalar
// key = value pairs, '#' comments. Unknown sections or keys and duplicate
// keys are errors so typos cannot silently fall back to defaults.
inline ExperimentConfig parse_config(const std::string& text) {
  const auto sections = detail::schema();
  ExperimentConfig cfg;
  std::map<std::string, const std::vector<detail::Field>*> by_name;
  for (const auto& [name, fields] : sections) by_name[name] = &fields;

  std::set<std::string> seen;
  std::string current;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = detail::trim(detail::strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(line_no) + ": malformed section header");
      current = detail::trim(line.substr(1, line.size() - 2));
      if (by_name.find(current) == by_name.end())
        throw ConfigError("config line " + std::to_string(line_no) + ": unknown section [" + current + "]");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    if (current.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": key outside any section");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const std::string where = current + "." + key;
    if (!seen.insert(where).second)
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key " + where);
    const detail::Field* field = nullptr;
    for (const detail::Field& f : *by_name[current])
      if (f.key == key) field = &f;
    if (field == nullptr)
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key " + where);
    field->set(cfg, where, value);
  }
  return cfg;
}

// Canonical serialization: fixed section and key order, shortest
// round-trip float formatting. parse(write(c)) reproduces c exactly, so
// snapshots are byte-stable across rewrites.
inline std::string write_config(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  std::string out;
  bool first = true;
  for (const auto& [name, fields] : detail::schema()) {
    if (!first) out += "\n";
    first = false;
    out += "[" + name + "]\n";
    for (const detail::Field& f : fields) out += f.key + " = " + f.get(copy) + "\n";
  }
  return out;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

inline void save_config(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open config for writing: " + path);
  out << write_config(cfg);
  if (!out) throw IoError("failed writing config: " + path);
}

// Cross-field invariants shared by every verb. Throws ConfigError with the
// offending key path.
inline void validate_config(const ExperimentConfig& cfg) {
  if (method_names().find(cfg.run.method) == method_names().end())
    throw ConfigError("run.method: unknown method '" + cfg.run.method + "'");
  if (cfg.run.n_seeds < 1) throw ConfigError("run.n_seeds: must be >= 1");
  if (cfg.run.shots < 1) throw ConfigError("run.shots: must be >= 1");
  if (cfg.run.top_sources < 0 || cfg.run.top_sources > cfg.suite.n_sources)
    throw ConfigError("run.top_sources: outside [0, n_sources]");
  if (cfg.run.pseudo_pool < 1) throw ConfigError("run.pseudo_pool: must be >= 1");
  if (cfg.run.case_samples < 1) throw ConfigError("run.case_samples: must be >= 1");
  if (cfg.prompts.init != "vocab_rows" && cfg.prompts.init != "gaussian")
    throw ConfigError("prompts.init: expected vocab_rows or gaussian");
  activation_from_name(cfg.g.activation);
  if (cfg.g.dx < 1 || cfg.g.dl < 1 || cfg.g.dp < 1)
    throw ConfigError("g: projection dims must be >= 1");
  if (cfg.g.dropout < 0.0 || cfg.g.dropout >= 1.0)
    throw ConfigError("g.dropout: outside [0, 1)");
  if (cfg.backbone.dim < 1) throw ConfigError("backbone.dim: must be >= 1");
  if (cfg.prompts.length < 1) throw ConfigError("prompts.length: must be >= 1");
  if (cfg.data.n_target < 2 * cfg.run.shots + 1)
    throw ConfigError("data.n_target: smaller than 2*shots plus one test sample");
  if (cfg.data.n_source_train < 2) throw ConfigError("data.n_source_train: must be >= 2");
  if (cfg.data.n_pretrain < 2 * cfg.suite.n_sources)
    throw ConfigError("data.n_pretrain: too small to cover every class");
  make_reference_suite(cfg.suite);
}

}  // namespace sesom
