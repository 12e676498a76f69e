#pragma once

// Explicit (gradient-aware) strategic classification: manipulation cost,
// utility-aligned loss, closed-form best response and cross-entropy rule
// updates for a linear decision rule.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "strategem/errors.hpp"

namespace strategem {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Scores are clamped to [kScoreEps, 1 - kScoreEps] before logs and divisions.
inline constexpr double kScoreEps = 1e-7;

struct LabeledExample {
  Vector features;
  int label = 0;  // 0 or 1
};

using Batch = std::vector<LabeledExample>;

inline LabeledExample make_example(Vector features, int label) {
  if (label != 0 && label != 1) {
    throw ConfigError("label must be 0 or 1, got " + std::to_string(label));
  }
  if (features.size() < 1) throw ShapeError("feature vector must have d >= 1");
  if (!features.allFinite()) throw ConfigError("feature vector has non-finite entries");
  return LabeledExample{std::move(features), label};
}

/// Symmetric positive-definite Mahalanobis matrix defining manipulation cost.
class CostMatrix {
 public:
  explicit CostMatrix(Matrix m) : m_(std::move(m)) {
    if (m_.rows() != m_.cols() || m_.rows() < 1) {
      throw ShapeError("cost matrix must be square and non-empty");
    }
    if (!m_.allFinite()) throw CostMatrixError("cost matrix has non-finite entries");
    if (((m_ - m_.transpose()).array().abs() > 1e-12).any()) {
      throw CostMatrixError("cost matrix is not symmetric");
    }
    Eigen::LLT<Matrix> llt(m_);
    if (llt.info() != Eigen::Success) {
      throw CostMatrixError("cost matrix is not positive definite");
    }
  }

  static CostMatrix identity(long d) { return CostMatrix(Matrix::Identity(d, d)); }

  long dim() const { return m_.rows(); }
  const Matrix& matrix() const { return m_; }

 private:
  Matrix m_;
};

struct LinearClassifier {
  Vector weights;
  double threshold = 0.5;

  long dim() const { return weights.size(); }
};

struct ManipulationConfig {
  double eta = 0.5;
  double lambda = 1.0;
  CostMatrix cost = CostMatrix::identity(1);

  void validate() const {
    if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("manipulation eta must be > 0");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
      throw ConfigError("manipulation lambda must be >= 0");
    }
  }
};

namespace core {

/// (x2 - x)^T M (x2 - x).
inline double mahalanobis_cost(const Vector& x, const Vector& x2, const CostMatrix& m) {
  detail::require_same_size(x.size(), x2.size(), "mahalanobis_cost");
  detail::require_same_size(x.size(), m.dim(), "mahalanobis_cost");
  const Vector diff = x2 - x;
  return diff.dot(m.matrix() * diff);
}

/// A = (I + 2 eta lambda M)^{-1}. Only the attention construction and tests form A
/// explicitly; manipulation_step solves the system instead.
inline Matrix adaptation_matrix(const ManipulationConfig& cfg) {
  cfg.validate();
  const long d = cfg.cost.dim();
  const Matrix system =
      Matrix::Identity(d, d) + 2.0 * cfg.eta * cfg.lambda * cfg.cost.matrix();
  Eigen::LLT<Matrix> llt(system);
  if (llt.info() != Eigen::Success) {
    throw CostMatrixError("I + 2*eta*lambda*M is not positive definite");
  }
  Matrix a = llt.solve(Matrix::Identity(d, d));
  // Symmetrize away the round-off of the triangular solves.
  return 0.5 * (a + a.transpose());
}

/// Raw linear score W . x (no squashing).
inline double predict(const LinearClassifier& clf, const Vector& x) {
  detail::require_same_size(clf.dim(), x.size(), "predict");
  double s = 0.0;
  for (long k = 0; k < x.size(); ++k) s += clf.weights[k] * x[k];
  return s;
}

/// Label 1 iff score >= threshold (ties go to the favorable class).
inline int classify(const LinearClassifier& clf, const Vector& x) {
  return predict(clf, x) >= clf.threshold ? 1 : 0;
}

inline double accuracy(const LinearClassifier& clf, std::span<const LabeledExample> data) {
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& ex : data) hits += classify(clf, ex.features) == ex.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

/// Single-sample utility-aligned loss:
///   y c(x,x2) + (1-y) (1 - f(x2) + lambda c(x,x2)).
inline double manipulation_loss(const Vector& x, const Vector& x2, int y,
                                const LinearClassifier& clf, const ManipulationConfig& cfg) {
  const double c = mahalanobis_cost(x, x2, cfg.cost);
  const double f = predict(clf, x2);
  return y * c + (1 - y) * (1.0 - f + cfg.lambda * c);
}

/// Batch form, averaged over N. Entry i of `moved` is the modified version of `data[i]`.
inline double manipulation_loss_batch(std::span<const LabeledExample> data,
                                      std::span<const Vector> moved,
                                      const LinearClassifier& clf,
                                      const ManipulationConfig& cfg) {
  detail::require_same_size(static_cast<long>(data.size()), static_cast<long>(moved.size()),
                            "manipulation_loss_batch");
  if (data.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    total += manipulation_loss(data[i].features, moved[i], data[i].label, clf, cfg);
  }
  return total / static_cast<double>(data.size());
}

/// Gradient of the single-sample loss with respect to x2 (no 1/N factor).
inline Vector manipulation_loss_grad(const Vector& x, const Vector& x2, int y,
                                     const LinearClassifier& clf,
                                     const ManipulationConfig& cfg) {
  detail::require_same_size(x.size(), x2.size(), "manipulation_loss_grad");
  detail::require_same_size(x.size(), cfg.cost.dim(), "manipulation_loss_grad");
  detail::require_same_size(x.size(), clf.dim(), "manipulation_loss_grad");
  const Vector m_diff = cfg.cost.matrix() * (x2 - x);
  return y * (2.0 * m_diff) + (1 - y) * (-clf.weights + 2.0 * cfg.lambda * m_diff);
}

/// Closed-form manipulation: 0 for positives, otherwise the solution of
/// (I + 2 eta lambda M) dx = eta W^T.
inline Vector manipulation_step(const LabeledExample& ex, const LinearClassifier& clf,
                                const ManipulationConfig& cfg) {
  cfg.validate();
  const long d = ex.features.size();
  detail::require_same_size(d, clf.dim(), "manipulation_step");
  detail::require_same_size(d, cfg.cost.dim(), "manipulation_step");
  if (ex.label == 1) return Vector::Zero(d);
  const Matrix system =
      Matrix::Identity(d, d) + 2.0 * cfg.eta * cfg.lambda * cfg.cost.matrix();
  Eigen::LLT<Matrix> llt(system);
  if (llt.info() != Eigen::Success) {
    throw CostMatrixError("I + 2*eta*lambda*M is not positive definite");
  }
  return llt.solve(cfg.eta * clf.weights);
}

/// Every agent best-responds to `clf`; labels are carried over unchanged.
inline Batch best_response_batch(std::span<const LabeledExample> data,
                                 const LinearClassifier& clf, const ManipulationConfig& cfg) {
  Batch out;
  out.reserve(data.size());
  if (data.empty()) return out;
  cfg.validate();
  const long d = clf.dim();
  detail::require_same_size(d, cfg.cost.dim(), "best_response_batch");
  // Every negative agent moves by the same dx, so solve once.
  const Matrix system =
      Matrix::Identity(d, d) + 2.0 * cfg.eta * cfg.lambda * cfg.cost.matrix();
  Eigen::LLT<Matrix> llt(system);
  if (llt.info() != Eigen::Success) {
    throw CostMatrixError("I + 2*eta*lambda*M is not positive definite");
  }
  const Vector dx = llt.solve(cfg.eta * clf.weights);
  for (const auto& ex : data) {
    detail::require_same_size(ex.features.size(), d, "best_response_batch");
    out.push_back(ex.label == 1 ? ex : LabeledExample{ex.features + dx, ex.label});
  }
  return out;
}

inline double clamp_score(double s) { return std::clamp(s, kScoreEps, 1.0 - kScoreEps); }

/// y/s - (1-y)/(1-s) on the clamped score; shared by both outer-stage routes.
inline double score_coefficient(int y, double clamped_score) {
  return y / clamped_score - (1 - y) / (1.0 - clamped_score);
}

struct BatchLoss {
  double value = 0.0;
  bool degenerate = false;  // set for an empty batch
};

/// Summed (not averaged) cross-entropy with the raw score read as a probability.
inline BatchLoss cross_entropy_loss(const LinearClassifier& clf,
                                    std::span<const LabeledExample> data) {
  if (data.empty()) return {0.0, true};
  double total = 0.0;
  for (const auto& ex : data) {
    const double s = clamp_score(predict(clf, ex.features));
    total -= ex.label * std::log(s) + (1 - ex.label) * std::log(1.0 - s);
  }
  return {total, false};
}

/// dW = eta * sum_j (y_j/s_j - (1-y_j)/(1-s_j)) x'_j, the negative gradient step
/// of the summed cross-entropy. Accumulated as sum_j (eta*g_j) * x'_j in index order.
inline Vector decision_grad(const LinearClassifier& clf, std::span<const LabeledExample> data,
                            double eta) {
  const long d = clf.dim();
  Vector dw = Vector::Zero(d);
  for (const auto& ex : data) {
    detail::require_same_size(ex.features.size(), d, "decision_grad");
    const double coef = eta * score_coefficient(ex.label, clamp_score(predict(clf, ex.features)));
    for (long k = 0; k < d; ++k) dw[k] += coef * ex.features[k];
  }
  return dw;
}

inline LinearClassifier decision_step(const LinearClassifier& clf,
                                      std::span<const LabeledExample> data, double eta) {
  LinearClassifier next = clf;
  next.weights += decision_grad(clf, data, eta);
  return next;
}

}  // namespace core
}  // namespace strategem
