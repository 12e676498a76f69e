#pragma once

// Synthetic class-conditional Gaussian data, CSV ingestion, standardization
// and k-fold splitting.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "strategem/errors.hpp"
#include "strategem/sc_core.hpp"

namespace strategem {

struct Dataset {
  Batch examples;
  std::vector<std::string> feature_names;
  std::string provenance;

  long dim() const { return examples.empty() ? static_cast<long>(feature_names.size())
                                             : examples.front().features.size(); }
  std::size_t size() const { return examples.size(); }
};

struct SyntheticConfig {
  long d = 8;
  long n = 1000;
  Vector negative_mean = Vector::Constant(8, -0.3);
  Vector positive_mean = Vector::Constant(8, 0.3);
  double class_scale = 1.0;
  double positive_fraction = 0.5;
  std::uint64_t seed = 42;

  /// Symmetric means +/- offset * 1 in d dimensions.
  static SyntheticConfig symmetric(long d, long n, double offset, std::uint64_t seed) {
    SyntheticConfig cfg;
    cfg.d = d;
    cfg.n = n;
    cfg.negative_mean = Vector::Constant(d, -offset);
    cfg.positive_mean = Vector::Constant(d, offset);
    cfg.seed = seed;
    return cfg;
  }

  void validate() const {
    if (d < 1) throw ConfigError("synthetic d must be >= 1");
    if (n < 1) throw ConfigError("synthetic n must be >= 1");
    if (negative_mean.size() != d || positive_mean.size() != d) {
      throw ConfigError("synthetic class means must have length d");
    }
    if (!(class_scale > 0.0)) throw ConfigError("synthetic class_scale must be > 0");
    if (!(positive_fraction > 0.0 && positive_fraction < 1.0)) {
      throw ConfigError("synthetic positive_fraction must lie in (0, 1)");
    }
  }
};

struct CsvOptions {
  /// One-hot encode columns holding any non-numeric cell (categories in
  /// lexicographic order) instead of rejecting them.
  bool one_hot = false;
};

/// Per-feature affine transform fit on one dataset and reused on others.
struct Standardizer {
  Vector mean;
  Vector scale;  // population std, floored at 1e-9

  Vector apply(const Vector& x) const {
    detail::require_same_size(x.size(), mean.size(), "Standardizer");
    return ((x - mean).array() / scale.array()).matrix();
  }

  Dataset apply(const Dataset& ds) const {
    Dataset out = ds;
    for (auto& ex : out.examples) ex.features = apply(ex.features);
    return out;
  }
};

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

namespace data {

inline Dataset gen_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  Dataset ds;
  ds.examples.reserve(static_cast<std::size_t>(cfg.n));
  for (long i = 0; i < cfg.n; ++i) {
    const int label = unit(rng) < cfg.positive_fraction ? 1 : 0;
    const Vector& mean = label == 1 ? cfg.positive_mean : cfg.negative_mean;
    Vector x(cfg.d);
    for (long k = 0; k < cfg.d; ++k) x[k] = mean[k] + cfg.class_scale * normal(rng);
    ds.examples.push_back({std::move(x), label});
  }
  for (long k = 0; k < cfg.d; ++k) ds.feature_names.push_back("x" + std::to_string(k));
  ds.provenance = "synthetic:seed=" + std::to_string(cfg.seed);
  return ds;
}

namespace detail_ {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_row(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    const std::string_view cell =
        line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    cells.emplace_back(trim(cell));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

}  // namespace detail_

/// Reads a comma-separated table with a header row. Leading lines starting
/// with '#' are skipped. Label is 1 iff the label cell equals `positive_token`.
inline Dataset load_csv(const std::string& path, const std::string& label_column,
                        const std::string& positive_token, const CsvOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");

  std::string line;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    const std::string_view t = detail_::trim(line);
    if (t.empty() || t.front() == '#') continue;
    header = detail_::split_row(t);
    break;
  }
  if (header.empty()) throw SchemaError("'" + path + "' has no header row");

  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end()) {
    throw SchemaError("'" + path + "' has no column named '" + label_column + "'");
  }
  const std::size_t label_idx = static_cast<std::size_t>(label_it - header.begin());

  std::vector<std::vector<std::string>> rows;
  std::size_t row_no = 0;
  while (std::getline(in, line)) {
    const std::string_view t = detail_::trim(line);
    if (t.empty()) continue;
    ++row_no;
    auto cells = detail_::split_row(t);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (cells[c].find('"') != std::string::npos) {
        throw ParseError(row_no, c < header.size() ? header[c] : "?",
                         "quoted cells are not supported");
      }
    }
    if (cells.size() != header.size()) {
      throw ParseError(row_no, cells.size() < header.size() ? header[cells.size()] : "?",
                       "expected " + std::to_string(header.size()) + " fields, found " +
                           std::to_string(cells.size()));
    }
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw SchemaError("'" + path + "' has no data rows");

  // Column plan: numeric columns map to one feature, categorical ones (one-hot
  // mode only) to one feature per category.
  struct Column {
    std::size_t source;
    bool categorical = false;
    std::vector<std::string> categories;
  };
  std::vector<Column> plan;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == label_idx) continue;
    Column col{c, false, {}};
    for (std::size_t r = 0; r < rows.size(); ++r) {
      double v = 0.0;
      if (detail_::parse_double(rows[r][c], v)) continue;
      if (!options.one_hot) {
        throw ParseError(r + 1, header[c], "non-numeric value '" + rows[r][c] + "'");
      }
      col.categorical = true;
      break;
    }
    if (col.categorical) {
      std::set<std::string> cats;
      for (const auto& row : rows) cats.insert(row[c]);
      col.categories.assign(cats.begin(), cats.end());
    }
    plan.push_back(std::move(col));
  }

  Dataset ds;
  for (const auto& col : plan) {
    if (!col.categorical) {
      ds.feature_names.push_back(header[col.source]);
    } else {
      for (const auto& cat : col.categories) ds.feature_names.push_back(header[col.source] + "=" + cat);
    }
  }
  const long d = static_cast<long>(ds.feature_names.size());
  if (d < 1) throw SchemaError("'" + path + "' has no feature columns");

  ds.examples.reserve(rows.size());
  for (const auto& row : rows) {
    Vector x = Vector::Zero(d);
    long k = 0;
    for (const auto& col : plan) {
      if (!col.categorical) {
        detail_::parse_double(row[col.source], x[k++]);
      } else {
        const auto pos = std::lower_bound(col.categories.begin(), col.categories.end(), row[col.source]);
        x[k + (pos - col.categories.begin())] = 1.0;
        k += static_cast<long>(col.categories.size());
      }
    }
    ds.examples.push_back({std::move(x), row[label_idx] == positive_token ? 1 : 0});
  }
  ds.provenance = "file:" + path;
  return ds;
}

/// Writes header `x0,...,label` then one row per example at full precision.
inline void write_csv(const Dataset& ds, std::ostream& out) {
  for (const auto& name : ds.feature_names) out << name << ',';
  out << "label\n";
  for (const auto& ex : ds.examples) {
    for (long k = 0; k < ex.features.size(); ++k) {
      char buf[32];
      const auto res = std::to_chars(buf, buf + sizeof buf, ex.features[k]);
      out.write(buf, res.ptr - buf);
      out << ',';
    }
    out << ex.label << '\n';
  }
}

inline Standardizer fit_standardizer(const Dataset& ds) {
  if (ds.examples.empty()) throw ConfigError("cannot standardize an empty dataset");
  const long d = ds.dim();
  const double n = static_cast<double>(ds.size());
  Vector mean = Vector::Zero(d);
  for (const auto& ex : ds.examples) mean += ex.features;
  mean /= n;
  Vector var = Vector::Zero(d);
  for (const auto& ex : ds.examples) var += (ex.features - mean).array().square().matrix();
  var /= n;
  Vector scale = var.array().sqrt().max(1e-9).matrix();
  return Standardizer{std::move(mean), std::move(scale)};
}

/// Centers and scales every feature column; returns the transform so held-out
/// rows can reuse the training statistics.
inline std::pair<Dataset, Standardizer> standardize(const Dataset& ds) {
  Standardizer st = fit_standardizer(ds);
  Dataset out = st.apply(ds);
  return {std::move(out), std::move(st)};
}

/// Appends a constant-1 feature so a linear rule gets an intercept.
inline Dataset append_intercept(const Dataset& ds) {
  Dataset out = ds;
  for (auto& ex : out.examples) {
    Vector x(ex.features.size() + 1);
    x << ex.features, 1.0;
    ex.features = std::move(x);
  }
  out.feature_names.push_back("intercept");
  return out;
}

inline Batch subset(const Dataset& ds, const std::vector<std::size_t>& idx) {
  Batch out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(ds.examples.at(i));
  return out;
}

/// Disjoint test folds covering 0..n-1, sizes differing by at most one,
/// shuffled by `seed`. Index lists are returned sorted.
inline std::vector<FoldSplit> kfold(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold needs k >= 2");
  if (k > n) throw ConfigError("kfold needs k <= n (k=" + std::to_string(k) +
                               ", n=" + std::to_string(n) + ")");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  std::vector<FoldSplit> folds(k);
  const std::size_t base = n / k;
  const std::size_t extra = n % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    folds[f].test.assign(perm.begin() + static_cast<long>(pos),
                         perm.begin() + static_cast<long>(pos + len));
    std::sort(folds[f].test.begin(), folds[f].test.end());
    pos += len;
  }
  for (auto& fold : folds) {
    std::vector<bool> in_test(n, false);
    for (auto i : fold.test) in_test[i] = true;
    for (std::size_t i = 0; i < n; ++i) {
      if (!in_test[i]) fold.train.push_back(i);
    }
  }
  return folds;
}

inline std::vector<FoldSplit> kfold(const Dataset& ds, std::size_t k, std::uint64_t seed) {
  return kfold(ds.size(), k, seed);
}

}  // namespace data
}  // namespace strategem
