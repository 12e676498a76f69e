#pragma once

// `strategem` command-line front end. Kept in a header so tests can drive it
// in-process; tools/strategem.cpp only forwards argv and the environment.

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <system_error>
#include <utility>
#include <variant>
#include <vector>

#include "strategem/strategem.hpp"

namespace strategem::cli {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kUsage = 2, kIo = 3 };

using ConfigMap = std::map<std::string, std::string>;

/// Every recognised key with its built-in default.
inline const ConfigMap& defaults() {
  static const ConfigMap d{
      {"seed", "42"},
      {"format", "csv"},
      {"jobs", "1"},
      {"out", ""},
      {"tamper", "none"},
      // verification suites
      {"instances", "1000"},
      {"lemma_prompts", "100"},
      {"lemma_layers", "10"},
      {"softmax_instances", "500"},
      {"max_d", "16"},
      {"max_n", "64"},
      // dataset
      {"d", "8"},
      {"n", "1000"},
      {"offset", "0.3"},
      {"class_scale", "1"},
      {"positive_fraction", "0.5"},
      {"data_csv", ""},
      {"label_column", "label"},
      {"positive_token", "1"},
      {"one_hot", "false"},
      // bi-level loop
      {"inner_eta", "20"},
      {"lambda", "0.07"},
      {"feature_cost", "1"},
      {"intercept_cost", "1000000"},
      {"outer_eta", "1e-06"},
      {"initial_intercept", "0.5"},
      {"iterations", "100"},
      {"folds", "10"},
      {"context_size", "64"},
      // context scaling
      {"scaling_ns", "16,32,64,128,256"},
      {"scaling_seeds", "20"},
      {"scaling_queries", "8"},
      {"scaling_eta", "0.5"},
      {"scaling_lambda", "1"},
  };
  return d;
}

/// Keys left out of output headers: they pick a destination or a thread
/// count, never the numbers.
inline bool echoed(const std::string& key) { return key != "out" && key != "jobs"; }

namespace detail_ {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  s = s.substr(b, e - b + 1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

inline std::optional<std::pair<std::string, std::string>> split_entry(const std::string& line) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) return std::nullopt;
  return std::make_pair(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
}

inline void set_key(ConfigMap& cfg, const std::string& key, const std::string& value,
                    const std::string& where) {
  if (!defaults().count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  cfg[key] = value;
}

}  // namespace detail_

/// Layers a config file over `cfg`. Accepts a flat `key = value` file ('#'
/// comments), a previous CSV output (its '# key = value' header) or a
/// previous JSON output (metadata.config).
inline void apply_config_file(ConfigMap& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.contains("metadata") || !j["metadata"].contains("config")) {
      throw ConfigError("JSON config '" + path + "' has no metadata.config object");
    }
    for (const auto& [key, value] : j["metadata"]["config"].items()) {
      if (!value.is_string()) throw ConfigError("JSON config value for '" + key + "' must be a string");
      detail_::set_key(cfg, key, value.get<std::string>(), path);
    }
    return;
  }

  std::istringstream lines(text);
  std::string line;
  bool output_file = false;
  long lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (lineno == 1 && line.rfind("# strategem ", 0) == 0) output_file = true;
    const std::string t = detail_::trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      // Output headers carry the config as '# key = value'; other comment
      // lines, and result lines, carry unknown keys and are skipped.
      if (!output_file) continue;
      const auto entry = detail_::split_entry(t.substr(1));
      if (entry && defaults().count(entry->first)) cfg[entry->first] = entry->second;
      continue;
    }
    if (output_file) continue;  // table body
    const auto entry = detail_::split_entry(t);
    if (!entry) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    detail_::set_key(cfg, entry->first, entry->second, path + ":" + std::to_string(lineno));
  }
}

// --- typed access ----------------------------------------------------------------

inline double get_double(const ConfigMap& cfg, const std::string& key) {
  const std::string& s = cfg.at(key);
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError("config key '" + key + "': expected a real number, got '" + s + "'");
  }
  return v;
}

inline long get_long(const ConfigMap& cfg, const std::string& key, long min_value) {
  const std::string& s = cfg.at(key);
  long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + s + "'");
  }
  if (v < min_value) {
    throw ConfigError("config key '" + key + "' must be >= " + std::to_string(min_value));
  }
  return v;
}

inline std::uint64_t get_seed(const ConfigMap& cfg) {
  const std::string& s = cfg.at("seed");
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("config key 'seed': expected an unsigned 64-bit integer, got '" + s + "'");
  }
  return v;
}

inline bool get_bool(const ConfigMap& cfg, const std::string& key) {
  const std::string& s = cfg.at(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + s + "'");
}

inline std::vector<long> get_long_list(const ConfigMap& cfg, const std::string& key) {
  std::vector<long> out;
  std::stringstream ss(cfg.at(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    ConfigMap tmp{{key, detail_::trim(item)}};
    out.push_back(get_long(tmp, key, 2));
  }
  if (out.empty()) throw ConfigError("config key '" + key + "' must list at least one value");
  return out;
}

inline ExperimentConfig experiment_config(const ConfigMap& cfg) {
  ExperimentConfig ec;
  ec.synthetic = SyntheticConfig::symmetric(get_long(cfg, "d", 1), get_long(cfg, "n", 1),
                                            get_double(cfg, "offset"), get_seed(cfg));
  ec.synthetic.class_scale = get_double(cfg, "class_scale");
  ec.synthetic.positive_fraction = get_double(cfg, "positive_fraction");
  ec.inner_eta = get_double(cfg, "inner_eta");
  ec.lambda = get_double(cfg, "lambda");
  ec.feature_cost = get_double(cfg, "feature_cost");
  ec.intercept_cost = get_double(cfg, "intercept_cost");
  ec.outer_eta = get_double(cfg, "outer_eta");
  if (!(ec.outer_eta > 0.0)) throw ConfigError("config key 'outer_eta' must be > 0");
  ec.initial_intercept = get_double(cfg, "initial_intercept");
  ec.iterations = static_cast<std::size_t>(get_long(cfg, "iterations", 1));
  ec.folds = static_cast<std::size_t>(get_long(cfg, "folds", 2));
  ec.context_size = static_cast<std::size_t>(get_long(cfg, "context_size", 1));
  ec.jobs = static_cast<std::size_t>(get_long(cfg, "jobs", 1));
  ec.synthetic.validate();
  return ec;
}

inline Dataset load_dataset(const ConfigMap& cfg, const ExperimentConfig& ec) {
  const std::string& path = cfg.at("data_csv");
  if (path.empty()) return data::gen_synthetic(ec.synthetic);
  return data::load_csv(path, cfg.at("label_column"), cfg.at("positive_token"),
                        CsvOptions{get_bool(cfg, "one_hot")});
}

// --- output tables ----------------------------------------------------------------

using Cell = std::variant<std::monostate, std::string, double, long, bool>;

struct Table {
  std::string command;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
  std::vector<std::pair<std::string, Cell>> results;  // summary values
};

inline std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, p) : std::string("nan");
}

inline std::string cell_text(const Cell& c) {
  struct Visitor {
    std::string operator()(std::monostate) const { return ""; }
    std::string operator()(const std::string& s) const { return s; }
    std::string operator()(double v) const { return format_double(v); }
    std::string operator()(long v) const { return std::to_string(v); }
    std::string operator()(bool v) const { return v ? "true" : "false"; }
  };
  return std::visit(Visitor{}, c);
}

inline nlohmann::json cell_json(const Cell& c) {
  struct Visitor {
    nlohmann::json operator()(std::monostate) const { return nullptr; }
    nlohmann::json operator()(const std::string& s) const { return s; }
    nlohmann::json operator()(double v) const {
      return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(format_double(v));
    }
    nlohmann::json operator()(long v) const { return v; }
    nlohmann::json operator()(bool v) const { return v; }
  };
  return std::visit(Visitor{}, c);
}

inline std::string render(const Table& t, const ConfigMap& cfg) {
  std::ostringstream os;
  if (cfg.at("format") == "json") {
    nlohmann::json meta;
    meta["command"] = t.command;
    nlohmann::json config = nlohmann::json::object();
    for (const auto& [k, v] : cfg) {
      if (echoed(k)) config[k] = v;
    }
    meta["config"] = config;
    nlohmann::json results = nlohmann::json::object();
    for (const auto& [k, v] : t.results) results[k] = cell_json(v);
    meta["results"] = results;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : t.rows) {
      nlohmann::json obj = nlohmann::json::object();
      for (std::size_t c = 0; c < t.columns.size(); ++c) obj[t.columns[c]] = cell_json(r[c]);
      rows.push_back(obj);
    }
    nlohmann::json doc;
    doc["metadata"] = meta;
    doc["rows"] = rows;
    os << doc.dump(2) << "\n";
    return os.str();
  }
  os << "# strategem " << t.command << "\n";
  for (const auto& [k, v] : cfg) {
    if (echoed(k)) os << "# " << k << " = " << v << "\n";
  }
  for (const auto& [k, v] : t.results) os << "# result " << k << ": " << cell_text(v) << "\n";
  for (std::size_t c = 0; c < t.columns.size(); ++c) os << (c ? "," : "") << t.columns[c];
  os << "\n";
  for (const auto& r : t.rows) {
    for (std::size_t c = 0; c < r.size(); ++c) os << (c ? "," : "") << cell_text(r[c]);
    os << "\n";
  }
  return os.str();
}

inline void emit(const std::string& text, const ConfigMap& cfg, std::ostream& out) {
  const std::string& path = cfg.at("out");
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open output file '" + path + "'");
  f << text;
  f.flush();
  if (!f) throw IoError("failed writing output file '" + path + "'");
}

// --- commands -------------------------------------------------------------------

inline std::vector<EquivalenceReport> run_suites(const std::string& suite, const ConfigMap& cfg) {
  const std::string tamper = cfg.at("tamper");
  if (tamper != "none" && tamper != "inner" && tamper != "outer" && tamper != "lemma" &&
      tamper != "softmax") {
    throw ConfigError("config key 'tamper' must be none, inner, outer, lemma or softmax");
  }
  SuiteOptions base;
  base.seed = get_seed(cfg);
  base.max_d = get_long(cfg, "max_d", 1);
  base.max_n = get_long(cfg, "max_n", 1);
  auto options = [&](const std::string& name, const char* count_key) {
    SuiteOptions o = base;
    o.instances = static_cast<std::size_t>(get_long(cfg, count_key, 1));
    if (tamper == name) o.tamper = 1e-3;
    return o;
  };

  std::vector<EquivalenceReport> reports;
  const bool all = suite == "all";
  if (all || suite == "inner") {
    const SuiteOptions o = options("inner", "instances");
    for (int label : {0, 1}) {
      for (InnerMode m : {InnerMode::exact, InnerMode::corrected, InnerMode::raw}) {
        reports.push_back(equivalence::verify_inner(o, m, label));
      }
    }
  }
  if (all || suite == "outer") {
    const SuiteOptions o = options("outer", "instances");
    reports.push_back(equivalence::verify_outer(o, false));
    reports.push_back(equivalence::verify_outer(o, true));
  }
  if (all || suite == "lemma") {
    const SuiteOptions o = options("lemma", "lemma_prompts");
    reports.push_back(equivalence::verify_lemma(
        o, static_cast<std::size_t>(get_long(cfg, "lemma_layers", 1))));
  }
  if (all || suite == "softmax") {
    for (auto& r : equivalence::verify_softmax(options("softmax", "softmax_instances"))) {
      reports.push_back(std::move(r));
    }
  }
  return reports;
}

inline int cmd_verify(const std::string& suite, const ConfigMap& cfg, std::ostream& out,
                      std::ostream& err) {
  const auto reports = run_suites(suite, cfg);
  Table t;
  t.command = "verify " + suite;
  t.columns = {"suite", "instances", "cosine", "zero_vector", "l2", "max_abs", "tolerance", "pass",
               "homogeneity_gap"};
  bool ok = true;
  for (const auto& r : reports) {
    t.rows.push_back({r.suite, static_cast<long>(r.instances), r.cosine, r.zero_vector, r.l2,
                      r.max_abs, r.tolerance, r.pass,
                      r.homogeneity_gap ? Cell(*r.homogeneity_gap) : Cell(std::monostate{})});
    err << "verify " << r.suite << ": " << (r.pass ? "PASS" : "FAIL") << " (max_abs "
        << format_double(r.max_abs) << ", tolerance " << format_double(r.tolerance) << ")\n";
    ok = ok && r.pass;
  }
  t.results.push_back({"pass", ok});
  emit(render(t, cfg), cfg, out);
  if (!ok) {
    err << "verification failed:";
    for (const auto& r : reports) {
      if (!r.pass) err << " " << r.suite;
    }
    err << "\n";
  }
  return ok ? kOk : kVerifyFailed;
}

inline int cmd_experiment(const std::string& kind, const ConfigMap& cfg, std::ostream& out,
                          std::ostream& err) {
  Table t;
  t.command = "experiment " + kind;
  if (kind == "curves") {
    const ExperimentConfig ec = experiment_config(cfg);
    const auto rows = experiments::curves(load_dataset(cfg, ec), ec);
    t.columns = {"iter", "cosine", "l2", "kl", "mean_shift", "ce_gd", "ce_icl"};
    for (const auto& r : rows) {
      t.rows.push_back({static_cast<long>(r.iter), r.cosine, r.l2, r.kl, r.mean_shift, r.ce_gd,
                        r.ce_icl});
    }
    t.results.push_back({"final_cosine", rows.back().cosine});
    t.results.push_back({"final_l2", rows.back().l2});
    err << "experiment curves: final cosine " << format_double(rows.back().cosine) << ", final l2 "
        << format_double(rows.back().l2) << "\n";
  } else if (kind == "table") {
    const ExperimentConfig ec = experiment_config(cfg);
    const PolicyTable table = experiments::policy_table(load_dataset(cfg, ec), ec);
    t.columns = {"fold", "strategic", "non_strategic"};
    for (const auto& r : table.rows) {
      t.rows.push_back({std::to_string(r.fold), r.strategic, r.non_strategic});
    }
    t.rows.push_back({std::string("mean"), table.strategic_mean, table.non_strategic_mean});
    t.rows.push_back({std::string("std"), table.strategic_std, table.non_strategic_std});
    t.results.push_back({"gap", table.strategic_mean - table.non_strategic_mean});
    err << "experiment table: strategic " << format_double(table.strategic_mean) << " vs non-strategic "
        << format_double(table.non_strategic_mean) << "\n";
  } else {
    ScalingOptions so;
    so.ns = get_long_list(cfg, "scaling_ns");
    so.seeds = static_cast<std::size_t>(get_long(cfg, "scaling_seeds", 5));
    so.queries_per_seed = static_cast<std::size_t>(get_long(cfg, "scaling_queries", 1));
    so.d = get_long(cfg, "d", 1);
    so.mean_offset = get_double(cfg, "offset");
    so.positive_fraction = get_double(cfg, "positive_fraction");
    so.eta = get_double(cfg, "scaling_eta");
    so.lambda = get_double(cfg, "scaling_lambda");
    so.seed = get_seed(cfg);
    so.jobs = static_cast<std::size_t>(get_long(cfg, "jobs", 1));
    const ScalingResult res = equivalence::context_scaling_study(so);
    t.columns = {"n", "median_error"};
    for (const auto& r : res.rows) t.rows.push_back({r.n, r.median_error});
    t.results.push_back({"slope", res.slope ? Cell(*res.slope) : Cell(std::monostate{})});
    err << "experiment scaling: slope "
        << (res.slope ? format_double(*res.slope) : std::string("absent")) << "\n";
  }
  emit(render(t, cfg), cfg, out);
  return kOk;
}

inline int cmd_gendata(const ConfigMap& cfg, std::ostream& out) {
  if (cfg.at("format") != "csv") throw ConfigError("gendata writes CSV only");
  const ExperimentConfig ec = experiment_config(cfg);
  const Dataset ds = data::gen_synthetic(ec.synthetic);
  std::ostringstream os;
  os << "# strategem gendata\n";
  for (const auto& [k, v] : cfg) {
    if (echoed(k)) os << "# " << k << " = " << v << "\n";
  }
  data::write_csv(ds, os);
  emit(os.str(), cfg, out);
  return kOk;
}

inline constexpr const char* kFooter = R"(Exit status: 0 success, 1 verification failure, 2 usage or
configuration error, 3 I/O error.

Configuration, lowest precedence first: built-in defaults, STRATEGEM_SEED,
--config file, --set key=value, then --seed/--format/--jobs/--out/--tamper.
A config file holds flat 'key = value' lines ('#' comments). A previous CSV
or JSON output file is also accepted and reproduces that run.

CSV output: '# strategem <command>' then '# key = value' for the effective
config, '# result <name>: <value>' summary lines, a column header and rows.
JSON output: {"metadata": {"command", "config", "results"}, "rows": [{...}]}.
  verify      suite,instances,cosine,zero_vector,l2,max_abs,tolerance,pass,homogeneity_gap
  curves      iter,cosine,l2,kl,mean_shift,ce_gd,ce_icl   (iterations+1 rows)
  table       fold,strategic,non_strategic                (folds, then mean and std)
  scaling     n,median_error                              (result: slope)
  gendata     CSV dataset: x0..x{d-1},label)";

/// Parses argv and runs one command. `env_seed` is the STRATEGEM_SEED value, if set.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
               const char* env_seed) {
  CLI::App app{"Strategic classification engine with constructed-attention verification",
               "strategem"};
  app.footer(kFooter);
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_path, format, tamper;
  std::optional<std::uint64_t> seed;
  std::optional<long> jobs;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "Config file (key = value, or a previous output)");
  app.add_option("--seed", seed, "Random seed (u64)");
  app.add_option("--out", out_path, "Output path (default: stdout)");
  app.add_option("--format", format, "Output format")->check(CLI::IsMember({"csv", "json"}));
  app.add_option("--jobs", jobs, "Worker threads for experiments")->check(CLI::PositiveNumber);
  app.add_option("--set", sets, "Override one config key: key=value (repeatable)");
  app.add_option("--tamper", tamper,
                 "Perturb one constructed weight of a suite by 1e-3 (expect failure)")
      ->check(CLI::IsMember({"inner", "outer", "lemma", "softmax"}));

  std::string suite, kind;
  auto* verify = app.add_subcommand("verify", "Run verification suites");
  verify->add_option("suite", suite, "inner | outer | lemma | softmax | all")
      ->required()
      ->check(CLI::IsMember({"inner", "outer", "lemma", "softmax", "all"}));
  auto* experiment = app.add_subcommand("experiment", "Run an experiment");
  experiment->add_option("kind", kind, "curves | table | scaling")
      ->required()
      ->check(CLI::IsMember({"curves", "table", "scaling"}));
  auto* gendata = app.add_subcommand("gendata", "Write a synthetic dataset as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    ConfigMap cfg = defaults();
    if (env_seed && *env_seed) cfg["seed"] = env_seed;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& s : sets) {
      const auto entry = detail_::split_entry(s);
      if (!entry) throw ConfigError("--set expects key=value, got '" + s + "'");
      detail_::set_key(cfg, entry->first, entry->second, "--set");
    }
    if (seed) cfg["seed"] = std::to_string(*seed);
    if (!format.empty()) cfg["format"] = format;
    if (jobs) cfg["jobs"] = std::to_string(*jobs);
    if (!out_path.empty()) cfg["out"] = out_path;
    if (!tamper.empty()) cfg["tamper"] = tamper;
    if (cfg["format"] != "csv" && cfg["format"] != "json") {
      throw ConfigError("config key 'format' must be csv or json");
    }
    get_seed(cfg);
    get_long(cfg, "jobs", 1);

    if (verify->parsed()) return cmd_verify(suite, cfg, out, err);
    if (experiment->parsed()) return cmd_experiment(kind, cfg, out, err);
    if (gendata->parsed()) return cmd_gendata(cfg, out);
    return kUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
}

}  // namespace strategem::cli
