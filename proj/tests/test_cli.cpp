#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cli_app.hpp"

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args, const char* env_seed = nullptr) {
  args.insert(args.begin(), "strategem");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = strategem::cli::run(static_cast<int>(argv.size()), argv.data(), out, err, env_seed);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() /
         ("strategem_cli_test_" + std::to_string(::getpid()) + "_" + name);
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

// Table rows: lines after the column header that follows the '#' block.
std::vector<std::string> body(const std::string& text) {
  std::vector<std::string> out;
  bool header_seen = false;
  for (const auto& l : lines(text)) {
    if (!l.empty() && l[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    out.push_back(l);
  }
  return out;
}

std::string column_header(const std::string& text) {
  for (const auto& l : lines(text)) {
    if (!l.empty() && l[0] != '#') return l;
  }
  return {};
}

}  // namespace

TEST(Cli, VerifyAllDefaultsPasses) {
  const auto r = run_cli({"verify", "all"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("# strategem verify all\n", 0), 0u);
  EXPECT_NE(r.out.find("# result pass: true"), std::string::npos);
  EXPECT_EQ(column_header(r.out),
            "suite,instances,cosine,zero_vector,l2,max_abs,tolerance,pass,homogeneity_gap");
  EXPECT_EQ(body(r.out).size(), 13u);
  EXPECT_NE(r.err.find("verify outer: PASS"), std::string::npos);
}

TEST(Cli, TamperFailsAndNamesSuite) {
  for (const std::string suite : {"outer", "inner", "lemma", "softmax"}) {
    const auto r = run_cli({"verify", suite, "--tamper", suite, "--set", "instances=50", "--set",
                            "lemma_prompts=20", "--set", "softmax_instances=50"});
    EXPECT_EQ(r.code, 1) << suite;
    EXPECT_NE(r.err.find("verification failed: " + suite), std::string::npos) << r.err;
  }
  // The tamper key is a config setting too.
  EXPECT_EQ(run_cli({"verify", "outer", "--set", "tamper=outer", "--set", "instances=20"}).code, 1);
  EXPECT_EQ(run_cli({"verify", "outer", "--set", "tamper=inner", "--set", "instances=20"}).code, 0);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run_cli({"verify", "bogus"}).code, 2);
  EXPECT_EQ(run_cli({"verify"}).code, 2);
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"experiment", "plots"}).code, 2);
  EXPECT_EQ(run_cli({"gendata", "--format", "xml"}).code, 2);
  EXPECT_EQ(run_cli({"gendata", "--set", "nonsense=1"}).code, 2);
  EXPECT_EQ(run_cli({"gendata", "--set", "seed=-1"}).code, 2);
  EXPECT_EQ(run_cli({"gendata", "--set", "tamper=everything"}).code, 0);  // gendata ignores tamper
  EXPECT_EQ(run_cli({"verify", "outer", "--set", "tamper=everything"}).code, 2);
  EXPECT_EQ(run_cli({"--help"}).code, 0);
}

TEST(Cli, HelpDocumentsSchemas) {
  const auto r = run_cli({"--help"});
  EXPECT_NE(r.out.find("iter,cosine,l2,kl,mean_shift,ce_gd,ce_icl"), std::string::npos);
  EXPECT_NE(r.out.find("metadata"), std::string::npos);
  EXPECT_NE(r.out.find("STRATEGEM_SEED"), std::string::npos);
}

TEST(Cli, CurvesSchema) {
  const auto r = run_cli({"experiment", "curves", "--set", "iterations=7", "--set", "n=200"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(column_header(r.out), "iter,cosine,l2,kl,mean_shift,ce_gd,ce_icl");
  const auto rows = body(r.out);
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows.front().rfind("0,", 0), 0u);
  EXPECT_EQ(rows.back().rfind("7,", 0), 0u);
  EXPECT_NE(r.out.find("# iterations = 7"), std::string::npos);
  EXPECT_NE(r.out.find("# seed = 42"), std::string::npos);
}

TEST(Cli, CurvesDefaultHasIterationsPlusOneRows) {
  const auto r = run_cli({"experiment", "curves"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(body(r.out).size(), 101u);
}

TEST(Cli, TableStrategicHigher) {
  const auto r = run_cli({"experiment", "table", "--format", "json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["metadata"]["command"], "experiment table");
  const auto& rows = j["rows"];
  ASSERT_EQ(rows.size(), 12u);
  EXPECT_EQ(rows[10]["fold"], "mean");
  EXPECT_EQ(rows[11]["fold"], "std");
  EXPECT_GT(rows[10]["strategic"].get<double>(), rows[10]["non_strategic"].get<double>());
  EXPECT_EQ(j["metadata"]["config"]["folds"], "10");
  EXPECT_FALSE(j["metadata"]["config"].contains("out"));
  EXPECT_FALSE(j["metadata"]["config"].contains("jobs"));
}

TEST(Cli, ScalingReportsSlope) {
  const auto r = run_cli({"experiment", "scaling", "--set", "scaling_ns=16,64", "--set", "scaling_seeds=5"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(column_header(r.out), "n,median_error");
  EXPECT_EQ(body(r.out).size(), 2u);
  EXPECT_NE(r.out.find("# result slope: "), std::string::npos);
  EXPECT_EQ(run_cli({"experiment", "scaling", "--set", "scaling_seeds=4"}).code, 2);
}

TEST(Cli, RerunFromOutputIsByteIdentical) {
  const auto csv1 = temp_path("curves1.csv"), csv2 = temp_path("curves2.csv");
  ASSERT_EQ(run_cli({"experiment", "curves", "--seed", "9", "--set", "iterations=5", "--set", "n=150",
                     "--out", csv1.string()})
                .code,
            0);
  ASSERT_EQ(run_cli({"experiment", "curves", "--config", csv1.string(), "--out", csv2.string()}).code, 0);
  EXPECT_EQ(read_file(csv1), read_file(csv2));

  const auto js1 = temp_path("curves1.json"), js2 = temp_path("curves2.json");
  ASSERT_EQ(run_cli({"experiment", "curves", "--seed", "9", "--set", "iterations=5", "--set", "n=150",
                     "--format", "json", "--out", js1.string()})
                .code,
            0);
  ASSERT_EQ(run_cli({"experiment", "curves", "--config", js1.string(), "--out", js2.string()}).code, 0);
  EXPECT_EQ(read_file(js1), read_file(js2));
  for (const auto& p : {csv1, csv2, js1, js2}) std::filesystem::remove(p);
}

TEST(Cli, FlatConfigFileAndPrecedence) {
  const auto cfg = temp_path("flat.cfg");
  std::ofstream(cfg) << "# comment\nseed = 5\nn = 12\nd = 3\n";
  const auto from_file = run_cli({"gendata", "--config", cfg.string()});
  ASSERT_EQ(from_file.code, 0) << from_file.err;
  EXPECT_NE(from_file.out.find("# seed = 5"), std::string::npos);
  EXPECT_EQ(body(from_file.out).size(), 12u);
  EXPECT_EQ(column_header(from_file.out), "x0,x1,x2,label");

  // --set beats the file, --seed beats --set, the file beats the environment.
  const auto set = run_cli({"gendata", "--config", cfg.string(), "--set", "seed=6"}, "7");
  EXPECT_NE(set.out.find("# seed = 6"), std::string::npos);
  const auto flag = run_cli({"gendata", "--config", cfg.string(), "--set", "seed=6", "--seed", "8"});
  EXPECT_NE(flag.out.find("# seed = 8"), std::string::npos);
  const auto env = run_cli({"gendata", "--config", cfg.string()}, "7");
  EXPECT_NE(env.out.find("# seed = 5"), std::string::npos);
  const auto env_only = run_cli({"gendata", "--set", "n=3"}, "7");
  EXPECT_NE(env_only.out.find("# seed = 7"), std::string::npos);

  std::ofstream(cfg) << "seed 5\n";
  EXPECT_EQ(run_cli({"gendata", "--config", cfg.string()}).code, 2);
  std::ofstream(cfg) << "mystery = 5\n";
  EXPECT_EQ(run_cli({"gendata", "--config", cfg.string()}).code, 2);
  std::filesystem::remove(cfg);
  EXPECT_EQ(run_cli({"gendata", "--config", cfg.string()}).code, 3);
}

TEST(Cli, Gendata) {
  const auto r = run_cli({"gendata"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("# strategem gendata\n", 0), 0u);
  EXPECT_EQ(column_header(r.out), "x0,x1,x2,x3,x4,x5,x6,x7,label");
  EXPECT_EQ(body(r.out).size(), 1000u);

  const auto again = run_cli({"gendata"});
  EXPECT_EQ(r.out, again.out);
  const auto other = run_cli({"gendata", "--seed", "43"});
  EXPECT_NE(body(r.out), body(other.out));

  EXPECT_EQ(run_cli({"gendata", "--set", "n=0"}).code, 2);
  EXPECT_EQ(run_cli({"gendata", "--format", "json"}).code, 2);
}

TEST(Cli, GendataFeedsExperiments) {
  const auto path = temp_path("data.csv");
  ASSERT_EQ(run_cli({"gendata", "--set", "n=120", "--out", path.string()}).code, 0);
  const auto r = run_cli({"experiment", "curves", "--set", "data_csv=" + path.string(), "--set",
                          "iterations=3"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(body(r.out).size(), 4u);
  std::filesystem::remove(path);
}

TEST(Cli, IoErrors) {
  EXPECT_EQ(run_cli({"gendata", "--out", "/nonexistent_dir/x.csv"}).code, 3);
  EXPECT_EQ(run_cli({"experiment", "scaling", "--set", "scaling_ns=16,32", "--set", "scaling_seeds=5",
                     "--out", "/nonexistent_dir/x.csv"})
                .code,
            3);
  EXPECT_EQ(run_cli({"experiment", "curves", "--set", "data_csv=/nonexistent_dir/x.csv"}).code, 3);
}

TEST(Cli, JobsDoNotChangeOutput) {
  const std::vector<std::string> base{"experiment", "table", "--set", "n=200", "--set", "iterations=10",
                                      "--set", "folds=4"};
  auto parallel = base;
  parallel.insert(parallel.end(), {"--jobs", "3"});
  EXPECT_EQ(run_cli(base).out, run_cli(parallel).out);
}
