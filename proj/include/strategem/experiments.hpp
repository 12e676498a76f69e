#pragma once

// Experiment setups shared by the CLI and the acceptance checks: the default
// synthetic problem, per-fold preprocessing and the strategic vs
// non-strategic accuracy table.

#include <cmath>
#include <cstdint>
#include <vector>

#include "strategem/bilevel.hpp"
#include "strategem/data.hpp"
#include "strategem/equivalence.hpp"
#include "strategem/parallel.hpp"
#include "strategem/sc_core.hpp"

namespace strategem {

struct ExperimentConfig {
  SyntheticConfig synthetic{};
  double inner_eta = 20.0;
  double lambda = 0.07;
  double feature_cost = 1.0;
  /// Cost on the appended constant feature; large so agents cannot move it.
  double intercept_cost = 1e6;
  double outer_eta = 1e-6;
  double initial_intercept = 0.5;
  std::size_t iterations = 100;
  std::size_t folds = 10;
  std::size_t context_size = 64;
  std::size_t jobs = 1;
};

struct PreparedFold {
  Batch train;
  Batch test;
  ManipulationConfig cfg;
};

struct PolicyRow {
  std::size_t fold = 0;
  double strategic = 0.0;
  double non_strategic = 0.0;
};

struct PolicyTable {
  std::vector<PolicyRow> rows;
  double strategic_mean = 0.0;
  double strategic_std = 0.0;
  double non_strategic_mean = 0.0;
  double non_strategic_std = 0.0;
};

namespace experiments {

/// diag(feature_cost, ..., feature_cost, intercept_cost) over d features plus the intercept.
inline CostMatrix intercept_cost_matrix(long d, double feature_cost, double intercept_cost) {
  Vector diag = Vector::Constant(d + 1, feature_cost);
  diag[d] = intercept_cost;
  return CostMatrix(diag.asDiagonal().toDenseMatrix());
}

inline ManipulationConfig manipulation_config(const ExperimentConfig& cfg, long d) {
  ManipulationConfig m;
  m.eta = cfg.inner_eta;
  m.lambda = cfg.lambda;
  m.cost = intercept_cost_matrix(d, cfg.feature_cost, cfg.intercept_cost);
  m.validate();
  return m;
}

/// Standardizes with training statistics and appends the intercept to both sides.
inline PreparedFold prepare_fold(const Dataset& ds, const FoldSplit& split,
                                 const ExperimentConfig& cfg) {
  Dataset train;
  train.examples = data::subset(ds, split.train);
  train.feature_names = ds.feature_names;
  Dataset test;
  test.examples = data::subset(ds, split.test);
  test.feature_names = ds.feature_names;
  const Standardizer st = data::fit_standardizer(train);
  PreparedFold out;
  out.train = data::append_intercept(st.apply(train)).examples;
  out.test = data::append_intercept(st.apply(test)).examples;
  out.cfg = manipulation_config(cfg, ds.dim());
  return out;
}

/// Whole dataset as training data, same preprocessing as a fold.
inline PreparedFold prepare_all(const Dataset& ds, const ExperimentConfig& cfg) {
  FoldSplit all;
  for (std::size_t i = 0; i < ds.size(); ++i) all.train.push_back(i);
  return prepare_fold(ds, all, cfg);
}

inline BiLevelOptions bilevel_options(const ExperimentConfig& cfg, bool strategic) {
  BiLevelOptions opt;
  opt.iterations = cfg.iterations;
  opt.strategic = strategic;
  opt.outer_eta = cfg.outer_eta;
  opt.initial_intercept = cfg.initial_intercept;
  opt.seed = cfg.synthetic.seed;
  return opt;
}

inline DualTrackOptions dual_track_options(const ExperimentConfig& cfg) {
  DualTrackOptions opt;
  opt.iterations = cfg.iterations;
  opt.outer_eta = cfg.outer_eta;
  opt.initial_intercept = cfg.initial_intercept;
  opt.context_size = cfg.context_size;
  opt.seed = cfg.synthetic.seed;
  return opt;
}

/// k-fold accuracy of the strategic and non-strategic policies, both evaluated
/// on test agents that best-respond to the final rule. Folds run on
/// cfg.jobs threads; rows come back in fold order.
inline PolicyTable policy_table(const Dataset& ds, const ExperimentConfig& cfg) {
  const auto folds = data::kfold(ds, cfg.folds, cfg.synthetic.seed);
  PolicyTable table;
  table.rows.resize(folds.size());
  parallel_for(folds.size(), cfg.jobs, [&](std::size_t f) {
    const PreparedFold pf = prepare_fold(ds, folds[f], cfg);
    const auto strategic = core::bilevel_run(pf.train, pf.test, pf.cfg, bilevel_options(cfg, true));
    const auto plain = core::bilevel_run(pf.train, pf.test, pf.cfg, bilevel_options(cfg, false));
    table.rows[f] = {f, strategic.final().accuracy, plain.final().accuracy};
  });

  auto stats = [&](auto field, double& mean, double& sd) {
    double s = 0.0;
    for (const auto& r : table.rows) s += r.*field;
    mean = s / static_cast<double>(table.rows.size());
    double v = 0.0;
    for (const auto& r : table.rows) v += (r.*field - mean) * (r.*field - mean);
    // Sample standard deviation across folds.
    sd = table.rows.size() > 1 ? std::sqrt(v / static_cast<double>(table.rows.size() - 1)) : 0.0;
  };
  stats(&PolicyRow::strategic, table.strategic_mean, table.strategic_std);
  stats(&PolicyRow::non_strategic, table.non_strategic_mean, table.non_strategic_std);
  return table;
}

inline std::vector<CurveRow> curves(const Dataset& ds, const ExperimentConfig& cfg) {
  const PreparedFold pf = prepare_all(ds, cfg);
  return equivalence::dual_track_curves(pf.train, pf.cfg, dual_track_options(cfg));
}

}  // namespace experiments
}  // namespace strategem
