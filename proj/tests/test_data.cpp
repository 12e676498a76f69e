#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <unistd.h>

#include "strategem/data.hpp"

using namespace strategem;

namespace {

class TempCsv {
 public:
  explicit TempCsv(const std::string& body) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("strategem_data_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + ".csv");
    std::ofstream(path_) << body;
  }
  ~TempCsv() { std::filesystem::remove(path_); }
  std::string path() const { return path_.string(); }

 private:
  std::filesystem::path path_;
};

bool same(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.examples[i].label != b.examples[i].label) return false;
    if (a.examples[i].features != b.examples[i].features) return false;
  }
  return true;
}

}  // namespace

TEST(GenSynthetic, CountsAndDeterminism) {
  auto cfg = SyntheticConfig::symmetric(8, 100, 0.3, 5);
  const Dataset a = data::gen_synthetic(cfg);
  EXPECT_EQ(a.size(), 100u);
  EXPECT_EQ(a.dim(), 8);
  EXPECT_TRUE(same(a, data::gen_synthetic(cfg)));
  cfg.seed = 6;
  EXPECT_FALSE(same(a, data::gen_synthetic(cfg)));
}

TEST(GenSynthetic, PositiveFraction) {
  const Dataset ds = data::gen_synthetic(SyntheticConfig::symmetric(4, 10000, 0.3, 42));
  std::size_t pos = 0;
  for (const auto& ex : ds.examples) pos += static_cast<std::size_t>(ex.label);
  EXPECT_GE(pos, 4700u);
  EXPECT_LE(pos, 5300u);
}

TEST(GenSynthetic, ClassMeansFollowConfig) {
  const Dataset ds = data::gen_synthetic(SyntheticConfig::symmetric(3, 20000, 0.8, 1));
  Vector m0 = Vector::Zero(3), m1 = Vector::Zero(3);
  double n0 = 0, n1 = 0;
  for (const auto& ex : ds.examples) {
    if (ex.label == 1) {
      m1 += ex.features;
      ++n1;
    } else {
      m0 += ex.features;
      ++n0;
    }
  }
  // Standard error of each coordinate is about 0.01.
  EXPECT_LT((m0 / n0 - Vector::Constant(3, -0.8)).cwiseAbs().maxCoeff(), 0.05);
  EXPECT_LT((m1 / n1 - Vector::Constant(3, 0.8)).cwiseAbs().maxCoeff(), 0.05);
}

TEST(GenSynthetic, InvalidConfig) {
  auto cfg = SyntheticConfig::symmetric(8, 0, 0.3, 1);
  EXPECT_THROW(data::gen_synthetic(cfg), ConfigError);
  cfg = SyntheticConfig::symmetric(8, 10, 0.3, 1);
  cfg.positive_fraction = 1.0;
  EXPECT_THROW(data::gen_synthetic(cfg), ConfigError);
  cfg = SyntheticConfig::symmetric(8, 10, 0.3, 1);
  cfg.class_scale = 0.0;
  EXPECT_THROW(data::gen_synthetic(cfg), ConfigError);
  cfg = SyntheticConfig::symmetric(8, 10, 0.3, 1);
  cfg.positive_mean = Vector::Zero(3);
  EXPECT_THROW(data::gen_synthetic(cfg), ConfigError);
}

TEST(LoadCsv, WellFormed) {
  TempCsv f("# comment\na,b,label\n1,2,yes\n3.5,-4,no\n0,1e-3,yes\n");
  const Dataset ds = data::load_csv(f.path(), "label", "yes");
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.dim(), 2);
  EXPECT_EQ(ds.feature_names, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ds.examples[1].features[0], 3.5);
  EXPECT_EQ(ds.examples[2].features[1], 1e-3);
  EXPECT_EQ(ds.examples[0].label, 1);
  EXPECT_EQ(ds.examples[1].label, 0);
}

TEST(LoadCsv, LabelColumnAnywhereAndTokenMismatch) {
  TempCsv f("label,a\n1,0.5\n1,0.25\n");
  const Dataset ds = data::load_csv(f.path(), "label", "positive");
  ASSERT_EQ(ds.size(), 2u);
  for (const auto& ex : ds.examples) EXPECT_EQ(ex.label, 0);
  EXPECT_EQ(ds.examples[1].features[0], 0.25);
}

TEST(LoadCsv, Errors) {
  EXPECT_THROW(data::load_csv("/nonexistent/strategem.csv", "label", "1"), IoError);
  TempCsv empty("");
  EXPECT_THROW(data::load_csv(empty.path(), "label", "1"), SchemaError);
  TempCsv header_only("a,label\n");
  EXPECT_THROW(data::load_csv(header_only.path(), "label", "1"), SchemaError);
  TempCsv no_label("a,b\n1,2\n");
  EXPECT_THROW(data::load_csv(no_label.path(), "label", "1"), SchemaError);
  TempCsv ragged("a,b,label\n1,2,1\n3,1\n");
  EXPECT_THROW(data::load_csv(ragged.path(), "label", "1"), ParseError);

  TempCsv bad("a,b,label\n1,2,1\n3,abc,0\n");
  try {
    data::load_csv(bad.path(), "label", "1");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.row(), 2u);
    EXPECT_EQ(e.column(), "b");
    EXPECT_NE(std::string(e.what()).find("abc"), std::string::npos);
  }
  TempCsv nan("a,label\nnan,1\n");
  EXPECT_THROW(data::load_csv(nan.path(), "label", "1"), ParseError);
}

TEST(LoadCsv, OneHotLexicographic) {
  TempCsv f("color,x,label\nred,1,1\nblue,2,0\ngreen,3,1\nblue,4,1\n");
  CsvOptions opt;
  opt.one_hot = true;
  const Dataset ds = data::load_csv(f.path(), "label", "1", opt);
  EXPECT_EQ(ds.feature_names, (std::vector<std::string>{"color=blue", "color=green", "color=red", "x"}));
  ASSERT_EQ(ds.size(), 4u);
  Vector expect(4);
  expect << 0, 0, 1, 1;
  EXPECT_EQ(ds.examples[0].features, expect);
  expect << 1, 0, 0, 4;
  EXPECT_EQ(ds.examples[3].features, expect);
  EXPECT_THROW(data::load_csv(f.path(), "label", "1"), ParseError);
}

TEST(WriteCsv, RoundTripsExactly) {
  const Dataset ds = data::gen_synthetic(SyntheticConfig::symmetric(3, 50, 0.3, 9));
  std::ostringstream os;
  data::write_csv(ds, os);
  TempCsv f(os.str());
  const Dataset back = data::load_csv(f.path(), "label", "1");
  EXPECT_TRUE(same(ds, back));
  EXPECT_EQ(back.feature_names, ds.feature_names);
}

TEST(Standardize, MomentsAndConstantColumn) {
  Dataset ds;
  ds.feature_names = {"a", "b"};
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(5.0, 3.0);
  for (int i = 0; i < 200; ++i) {
    Vector x(2);
    x << n(rng), 7.0;
    ds.examples.push_back({x, i % 2});
  }
  const auto [out, st] = data::standardize(ds);
  double mean = 0, sq = 0;
  for (const auto& ex : out.examples) {
    mean += ex.features[0];
    sq += ex.features[0] * ex.features[0];
    EXPECT_EQ(ex.features[1], 0.0);
  }
  EXPECT_NEAR(mean / 200, 0.0, 1e-12);
  EXPECT_NEAR(sq / 200, 1.0, 1e-12);
  EXPECT_EQ(st.scale[1], 1e-9);
}

TEST(Standardize, IdempotentAndHeldOut) {
  const Dataset ds = data::gen_synthetic(SyntheticConfig::symmetric(4, 300, 1.5, 11));
  const auto [once, st] = data::standardize(ds);
  const auto [twice, st2] = data::standardize(once);
  for (std::size_t i = 0; i < once.size(); ++i) {
    EXPECT_LT((once.examples[i].features - twice.examples[i].features).cwiseAbs().maxCoeff(), 1e-12);
  }

  const Dataset held = data::gen_synthetic(SyntheticConfig::symmetric(4, 20, 1.5, 12));
  // Oracle: recompute the train statistics directly.
  Vector mu = Vector::Zero(4), var = Vector::Zero(4);
  for (const auto& ex : ds.examples) mu += ex.features;
  mu /= 300.0;
  for (const auto& ex : ds.examples) var += (ex.features - mu).cwiseProduct(ex.features - mu);
  const Vector sd = (var / 300.0).cwiseSqrt();
  for (const auto& ex : held.examples) {
    const Vector expect = (ex.features - mu).cwiseQuotient(sd);
    EXPECT_LT((st.apply(ex.features) - expect).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_THROW(data::standardize(Dataset{}), ConfigError);
}

TEST(Kfold, Examples) {
  const auto folds = data::kfold(10, 10, 1);
  ASSERT_EQ(folds.size(), 10u);
  for (const auto& f : folds) {
    EXPECT_EQ(f.test.size(), 1u);
    EXPECT_EQ(f.train.size(), 9u);
  }
  const auto again = data::kfold(10, 10, 1);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(folds[i].test, again[i].test);
  EXPECT_THROW(data::kfold(3, 4, 1), ConfigError);
  EXPECT_THROW(data::kfold(10, 1, 1), ConfigError);
}

TEST(Kfold, PartitionProperty) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 2 + rng() % 200;
    const std::size_t k = 2 + rng() % (n - 1);
    const auto folds = data::kfold(n, k, rng());
    ASSERT_EQ(folds.size(), k);
    std::vector<int> seen(n, 0);
    std::size_t lo = n, hi = 0;
    for (const auto& f : folds) {
      lo = std::min(lo, f.test.size());
      hi = std::max(hi, f.test.size());
      EXPECT_EQ(f.train.size() + f.test.size(), n);
      for (auto i : f.test) ++seen[i];
      std::vector<int> mark(n, 0);
      for (auto i : f.test) mark[i] = 1;
      for (auto i : f.train) EXPECT_EQ(mark[i], 0);
    }
    EXPECT_LE(hi - lo, 1u);
    for (int s : seen) EXPECT_EQ(s, 1);
  }
}

TEST(Kfold, SeedShuffles) {
  const auto a = data::kfold(100, 5, 1);
  const auto b = data::kfold(100, 5, 2);
  bool differ = false;
  for (std::size_t i = 0; i < 5; ++i) differ = differ || a[i].test != b[i].test;
  EXPECT_TRUE(differ);
}

TEST(AppendIntercept, AddsConstantColumn) {
  const Dataset ds = data::gen_synthetic(SyntheticConfig::symmetric(2, 5, 0.3, 1));
  const Dataset out = data::append_intercept(ds);
  EXPECT_EQ(out.dim(), 3);
  EXPECT_EQ(out.feature_names.back(), "intercept");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(out.examples[i].features[2], 1.0);
    EXPECT_EQ(out.examples[i].features.head(2), ds.examples[i].features);
  }
}
