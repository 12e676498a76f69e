#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "strategem/sc_core.hpp"

namespace strategem {

struct BiLevelRecord {
  Vector weights;
  double mean_manipulation = 0.0;  // mean ||dx|| over training agents
  double loss = 0.0;               // summed cross-entropy on the step's training features
  double accuracy = 0.0;           // on test agents best-responding to `weights`
};

/// One record per iteration plus the initial state.
struct BiLevelHistory {
  std::vector<BiLevelRecord> records;
  bool strategic = false;
  std::uint64_t seed = 0;

  const BiLevelRecord& final() const { return records.back(); }
};

struct BiLevelOptions {
  std::size_t iterations = 100;
  bool strategic = true;
  double outer_eta = 1e-6;
  /// Starting rule. Empty weights mean "zero vector with the last weight at
  /// `initial_intercept`", which suits data whose last feature is a constant 1.
  LinearClassifier initial{};
  double initial_intercept = 0.5;
  /// Standard deviation of seeded Gaussian jitter added to the starting weights.
  double init_jitter = 0.0;
  std::uint64_t seed = 0;
};

namespace core {

inline LinearClassifier initial_classifier(long d, const BiLevelOptions& opt) {
  LinearClassifier clf = opt.initial;
  if (clf.weights.size() == 0) {
    clf.weights = Vector::Zero(d);
    clf.weights[d - 1] = opt.initial_intercept;
  }
  detail::require_same_size(clf.dim(), d, "bilevel_run initial classifier");
  if (opt.init_jitter > 0.0) {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> normal(0.0, opt.init_jitter);
    for (long k = 0; k < d; ++k) clf.weights[k] += normal(rng);
  }
  return clf;
}

inline double mean_manipulation(std::span<const LabeledExample> before,
                                std::span<const LabeledExample> after) {
  if (before.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    total += (after[i].features - before[i].features).norm();
  }
  return total / static_cast<double>(before.size());
}

/// Alternates agent best response and the cross-entropy rule update.
///
/// Strategic: the rule is fit to training agents that best-respond to the
/// current rule. Non-strategic: the rule is fit to raw features. Either way,
/// test agents always best-respond to the rule being evaluated.
inline BiLevelHistory bilevel_run(std::span<const LabeledExample> train,
                                  std::span<const LabeledExample> test,
                                  const ManipulationConfig& cfg, const BiLevelOptions& opt) {
  if (train.empty()) throw ConfigError("bilevel_run needs a non-empty training set");
  cfg.validate();
  const long d = train.front().features.size();
  detail::require_same_size(d, cfg.cost.dim(), "bilevel_run");

  BiLevelHistory history;
  history.strategic = opt.strategic;
  history.seed = opt.seed;
  history.records.reserve(opt.iterations + 1);

  LinearClassifier clf = initial_classifier(d, opt);

  auto evaluate = [&](const LinearClassifier& rule, std::span<const LabeledExample> fit_data,
                      const Batch& responded_train) {
    BiLevelRecord rec;
    rec.weights = rule.weights;
    rec.mean_manipulation = mean_manipulation(train, responded_train);
    rec.loss = cross_entropy_loss(rule, fit_data).value;
    const Batch responded_test = best_response_batch(test, rule, cfg);
    rec.accuracy = accuracy(rule, responded_test);
    return rec;
  };

  Batch responded = best_response_batch(train, clf, cfg);
  history.records.push_back(
      evaluate(clf, opt.strategic ? std::span<const LabeledExample>(responded) : train,
               responded));

  for (std::size_t it = 0; it < opt.iterations; ++it) {
    const std::span<const LabeledExample> fit_data =
        opt.strategic ? std::span<const LabeledExample>(responded) : train;
    const LinearClassifier next = decision_step(clf, fit_data, opt.outer_eta);
    Batch responded_next = best_response_batch(train, next, cfg);
    history.records.push_back(evaluate(next, fit_data, responded_next));
    clf = next;
    responded = std::move(responded_next);
  }
  return history;
}

}  // namespace core
}  // namespace strategem
