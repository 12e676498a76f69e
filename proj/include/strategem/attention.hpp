#pragma once

// Token-matrix self-attention (linear and softmax) and the analytic weight
// constructions under which a forward pass reproduces an explicit
// gradient-descent update.
//
// Layout: a TokenMatrix is (d+1) x (n+1). Rows 0..d-1 are features, row d is
// the label/score channel. Columns 0..n-1 are context tokens, column n is the
// query token.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "strategem/errors.hpp"
#include "strategem/sc_core.hpp"

namespace strategem {

class TokenMatrix {
 public:
  explicit TokenMatrix(Matrix z) : z_(std::move(z)) {
    if (z_.rows() < 2 || z_.cols() < 2) {
      throw ShapeError("token matrix needs d >= 1 feature rows and n >= 1 context columns");
    }
    if (!z_.allFinite()) throw ConfigError("token matrix has non-finite entries");
  }

  /// Stacks context columns (x_i; y_i) followed by the query column (x_q; y_q).
  static TokenMatrix from_columns(std::span<const Vector> context_x, std::span<const double> context_y,
                                  const Vector& query_x, double query_y) {
    detail::require_same_size(static_cast<long>(context_x.size()),
                              static_cast<long>(context_y.size()), "TokenMatrix context");
    if (context_x.empty()) throw ShapeError("token matrix needs at least one context token");
    const long d = query_x.size();
    const long n = static_cast<long>(context_x.size());
    Matrix z(d + 1, n + 1);
    for (long i = 0; i < n; ++i) {
      detail::require_same_size(context_x[i].size(), d, "TokenMatrix context token");
      z.col(i).head(d) = context_x[i];
      z(d, i) = context_y[i];
    }
    z.col(n).head(d) = query_x;
    z(d, n) = query_y;
    return TokenMatrix(std::move(z));
  }

  static TokenMatrix from_examples(std::span<const LabeledExample> context, const Vector& query_x,
                                   double query_y) {
    std::vector<Vector> xs;
    std::vector<double> ys;
    xs.reserve(context.size());
    ys.reserve(context.size());
    for (const auto& ex : context) {
      xs.push_back(ex.features);
      ys.push_back(static_cast<double>(ex.label));
    }
    return from_columns(xs, ys, query_x, query_y);
  }

  /// Copy with the query column replaced.
  TokenMatrix with_query(const Vector& x, double y) const {
    detail::require_same_size(x.size(), d(), "TokenMatrix::with_query");
    Matrix z = z_;
    z.col(n()).head(d()) = x;
    z(d(), n()) = y;
    return TokenMatrix(std::move(z));
  }

  long d() const { return z_.rows() - 1; }
  long n() const { return z_.cols() - 1; }
  long query_index() const { return n(); }

  Vector features(long col) const { return z_.col(col).head(d()); }
  double label(long col) const { return z_(d(), col); }
  Vector column(long col) const { return z_.col(col); }

  const Matrix& matrix() const { return z_; }

 private:
  Matrix z_;
};

/// Key/query/value/projection matrices of one single-head layer, plus a value
/// bias (the affine part of the value projection, zero unless a construction
/// needs it).
struct AttentionLayerWeights {
  Matrix key;
  Matrix query;
  Matrix value;
  Matrix projection;
  Vector value_bias;

  long dim() const { return key.rows(); }

  void validate() const {
    const long m = key.rows();
    for (const Matrix* w : {&key, &query, &value, &projection}) {
      if (w->rows() != m || w->cols() != m) {
        throw ShapeError("attention weights must all be square with matching dimension");
      }
      if (!w->allFinite()) throw ConfigError("attention weights have non-finite entries");
    }
    if (value_bias.size() != 0 && value_bias.size() != m) {
      throw ShapeError("value bias must be empty or have the layer dimension");
    }
  }
};

struct SoftmaxAttentionConfig {
  double sigma = 1.0;
  std::vector<double> rates;

  std::size_t layers() const { return rates.size(); }

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma must be > 0");
  }
};

/// f_l evaluated at the n context points followed by the query point.
struct FunctionEstimate {
  Vector values;
};

/// Weight iterates of explicit GD next to the query read-out of the
/// constructed attention stack; index 0 is the initialization.
struct GdTrajectory {
  std::vector<Vector> weights_per_step;
  std::vector<double> predictions_per_step;
  double max_deviation = 0.0;  // max_l |y_l + <x_test, w_l>|
};

enum class InnerMode { exact, raw, corrected };

namespace attention {

namespace detail_ {

inline Matrix feature_selector(long d) {
  Matrix s = Matrix::Zero(d + 1, d + 1);
  s.topLeftCorner(d, d).setIdentity();
  return s;
}

inline Vector apply(const Matrix& m, const Eigen::Ref<const Vector>& v) {
  Vector out(m.rows());
  for (long r = 0; r < m.rows(); ++r) {
    double s = 0.0;
    for (long c = 0; c < m.cols(); ++c) s += m(r, c) * v[c];
    out[r] = s;
  }
  return out;
}

inline double dot(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  double s = 0.0;
  for (long k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

}  // namespace detail_

/// Update of column `j`: P * sum_i (W_V e_i + b_V) <W_K e_i, W_Q e_j>, summed
/// over context columns when `mask_context_only`, else over every column.
inline Vector linear_attention_delta(const TokenMatrix& z, const AttentionLayerWeights& layer,
                                     long j, bool mask_context_only) {
  layer.validate();
  detail::require_same_size(layer.dim(), z.d() + 1, "linear_attention_forward");
  const Matrix& zm = z.matrix();
  const long m = layer.dim();
  const long sources = mask_context_only ? z.n() : z.n() + 1;
  const bool has_bias = layer.value_bias.size() == m;

  const Vector q = detail_::apply(layer.query, zm.col(j));
  Vector acc = Vector::Zero(m);
  for (long i = 0; i < sources; ++i) {
    const Vector k = detail_::apply(layer.key, zm.col(i));
    Vector v = detail_::apply(layer.value, zm.col(i));
    if (has_bias) v += layer.value_bias;
    const double score = detail_::dot(k, q);
    for (long r = 0; r < m; ++r) acc[r] += v[r] * score;
  }
  return detail_::apply(layer.projection, acc);
}

/// P (sum_i v_i k_i^T) W_Q over the context columns of `z`: the linear map a
/// layer applies to any token once the context is fixed.
struct ContextOperator {
  Matrix map;

  Vector delta(const Vector& token) const { return map * token; }
};

inline ContextOperator context_operator(const TokenMatrix& z, const AttentionLayerWeights& layer) {
  layer.validate();
  detail::require_same_size(layer.dim(), z.d() + 1, "context_operator");
  const long m = layer.dim();
  const bool has_bias = layer.value_bias.size() == m;
  Matrix vk = Matrix::Zero(m, m);
  for (long i = 0; i < z.n(); ++i) {
    const Vector k = layer.key * z.matrix().col(i);
    Vector v = layer.value * z.matrix().col(i);
    if (has_bias) v += layer.value_bias;
    vk.noalias() += v * k.transpose();
  }
  return ContextOperator{layer.projection * vk * layer.query};
}

/// Softmax-free self-attention applied to every column simultaneously.
inline TokenMatrix linear_attention_forward(const TokenMatrix& z,
                                            const AttentionLayerWeights& layer,
                                            bool mask_context_only) {
  Matrix out = z.matrix();
  for (long j = 0; j <= z.n(); ++j) {
    out.col(j) += linear_attention_delta(z, layer, j, mask_context_only);
  }
  return TokenMatrix(std::move(out));
}

// --- Regression ICL (implicit GD on least squares) ---------------------------

/// W_K = W_Q = diag(I_d, 0), W_V = [[0, 0], [W0^T, -1]], P = (eta/N) I.
inline AttentionLayerWeights build_regression_icl_layer(const Vector& w0, double eta, long n_context,
                                                        long d) {
  if (n_context < 1) throw ConfigError("regression layer needs N >= 1");
  detail::require_same_size(w0.size(), d, "build_regression_icl_layer");
  AttentionLayerWeights layer;
  layer.key = detail_::feature_selector(d);
  layer.query = layer.key;
  layer.value = Matrix::Zero(d + 1, d + 1);
  layer.value.block(d, 0, 1, d) = w0.transpose();
  layer.value(d, d) = -1.0;
  layer.projection = (eta / static_cast<double>(n_context)) * Matrix::Identity(d + 1, d + 1);
  return layer;
}

/// Query label channel starts at -W0 . x_test.
inline TokenMatrix regression_tokens(std::span<const Vector> xs, std::span<const double> ys,
                                     const Vector& x_test, const Vector& w0) {
  return TokenMatrix::from_columns(xs, ys, x_test, -w0.dot(x_test));
}

/// Runs `layers` identical constructed layers alongside `layers` explicit GD
/// steps on R(w) = 1/(2n) sum (w^T x_i - y_i)^2 and records both tracks.
/// Keys and values come from context tokens only: with the query as a value
/// source, its own (W0 x_test - y_query) term breaks the identity from layer 2 on.
inline GdTrajectory implicit_gd_verify(std::span<const Vector> xs, std::span<const double> ys,
                                       const Vector& x_test, const Vector& w0, double eta,
                                       std::size_t layers, double tamper = 0.0) {
  if (xs.empty()) throw ConfigError("implicit_gd_verify needs a non-empty prompt");
  const long d = x_test.size();
  const long n = static_cast<long>(xs.size());
  AttentionLayerWeights layer = build_regression_icl_layer(w0, eta, n, d);
  layer.projection(d, d) += tamper;

  GdTrajectory traj;
  TokenMatrix z = regression_tokens(xs, ys, x_test, w0);
  Vector w = w0;
  auto record = [&] {
    const double y = z.label(z.query_index());
    traj.weights_per_step.push_back(w);
    traj.predictions_per_step.push_back(y);
    traj.max_deviation = std::max(traj.max_deviation, std::abs(y + x_test.dot(w)));
  };
  record();
  for (std::size_t l = 0; l < layers; ++l) {
    Vector grad = Vector::Zero(d);
    for (long i = 0; i < n; ++i) grad += (w.dot(xs[i]) - ys[i]) * xs[i];
    w -= (eta / static_cast<double>(n)) * grad;
    z = linear_attention_forward(z, layer, /*mask_context_only=*/true);
    record();
  }
  return traj;
}

// --- Inner stage (strategic manipulation) ------------------------------------

/// Key/query select features; P = (1/N) diag(A, 0), so the label channel is
/// never written. With `context_label` set, every context token carries the
/// value eta (1 - y) W^T (homogeneous contexts). Without it the value is gated
/// per token by its own label: W_V e_i + b_V = eta (1 - y_i) W^T.
inline AttentionLayerWeights build_inner_layer(const LinearClassifier& clf,
                                               const ManipulationConfig& cfg,
                                               std::optional<int> context_label, long n_context) {
  if (n_context < 1) throw ConfigError("inner layer needs N >= 1");
  const long d = clf.dim();
  detail::require_same_size(d, cfg.cost.dim(), "build_inner_layer");
  const Matrix a = core::adaptation_matrix(cfg);

  AttentionLayerWeights layer;
  layer.key = detail_::feature_selector(d);
  layer.query = layer.key;
  layer.value = Matrix::Zero(d + 1, d + 1);
  layer.value_bias = Vector::Zero(d + 1);
  layer.projection = Matrix::Zero(d + 1, d + 1);
  layer.projection.topLeftCorner(d, d) = a / static_cast<double>(n_context);

  if (context_label) {
    if (*context_label != 0 && *context_label != 1) throw ConfigError("context label must be 0 or 1");
    layer.value_bias.head(d) = cfg.eta * (1 - *context_label) * clf.weights;
  } else {
    layer.value.block(0, d, d, 1) = -cfg.eta * clf.weights;
    layer.value_bias.head(d) = cfg.eta * clf.weights;
  }
  return layer;
}

/// Exact-mode tokens: one context token equal to the query, both rescaled to
/// unit norm, so the inner-product factor is 1 by construction.
inline TokenMatrix exact_context_tokens(const Vector& x, int label) {
  Vector unit = x;
  const double norm = x.norm();
  if (norm > 0.0) {
    unit /= norm;
  } else {
    unit = Vector::Unit(x.size(), 0);
  }
  const std::vector<Vector> ctx{unit};
  const std::vector<double> ys{static_cast<double>(label)};
  return TokenMatrix::from_columns(ctx, ys, unit, static_cast<double>(label));
}

/// c_j = (1/N) sum_i <x_i, x_j> over the context.
inline double context_normalizer(const TokenMatrix& z, long j) {
  const Matrix& zm = z.matrix();
  const long d = z.d();
  double s = 0.0;
  for (long i = 0; i < z.n(); ++i) {
    s += detail_::dot(zm.col(i).head(d), zm.col(j).head(d));
  }
  return s / static_cast<double>(z.n());
}

/// Mean inner product over the label-0 context tokens only; nullopt if none.
inline std::optional<double> negative_group_normalizer(const TokenMatrix& z, long j) {
  const Matrix& zm = z.matrix();
  const long d = z.d();
  double s = 0.0;
  long count = 0;
  for (long i = 0; i < z.n(); ++i) {
    if (zm(d, i) != 0.0) continue;
    s += detail_::dot(zm.col(i).head(d), zm.col(j).head(d));
    ++count;
  }
  if (count == 0) return std::nullopt;
  return s / static_cast<double>(count);
}

/// Feature-channel delta of the query column.
///  raw       - the literal forward pass, (A eta / N) sum_i (1-y_i) W^T <x_i, x_j>
///  corrected - raw divided by c_j
///  exact     - raw on exact_context_tokens(), where c_j = 1
inline Vector icl_manipulation_update(const TokenMatrix& z, const AttentionLayerWeights& layer,
                                      InnerMode mode) {
  const long j = z.query_index();
  if (mode == InnerMode::exact) {
    const double self = z.features(0).squaredNorm();
    if (z.n() != 1 || std::abs(self - 1.0) > 1e-12) {
      throw ConfigError("exact mode needs a single unit-norm context token");
    }
  }
  Vector delta = linear_attention_delta(z, layer, j, /*mask_context_only=*/true).head(z.d());
  if (mode == InnerMode::corrected) {
    const double c = context_normalizer(z, j);
    if (!(std::abs(c) >= 1e-12)) {
      throw DegenerateContextError("context normalizer |c_j| < 1e-12");
    }
    delta /= c;
  }
  return delta;
}

// --- Outer stage (decision rule update) --------------------------------------

/// W_K = W_Q = diag(I_d, 0); V = [[0, 0], [sum_i delta_i, 0]] with
/// delta_i = eta (y_i/s_i - (1-y_i)/(1-s_i)) x'_i on clamped scores;
/// P = e_d e_d^T keeps only the score channel.
inline AttentionLayerWeights build_outer_layer(const LinearClassifier& clf,
                                               std::span<const LabeledExample> context, double eta) {
  if (context.empty()) throw ConfigError("outer layer needs a non-empty context");
  const long d = clf.dim();
  Vector delta_sum = Vector::Zero(d);
  for (const auto& ex : context) {
    detail::require_same_size(ex.features.size(), d, "build_outer_layer");
    const double s = core::clamp_score(core::predict(clf, ex.features));
    const double coef = eta * core::score_coefficient(ex.label, s);
    for (long k = 0; k < d; ++k) delta_sum[k] += coef * ex.features[k];
  }

  AttentionLayerWeights layer;
  layer.key = detail_::feature_selector(d);
  layer.query = layer.key;
  layer.value = Matrix::Zero(d + 1, d + 1);
  layer.value.block(d, 0, 1, d) = delta_sum.transpose();
  layer.projection = Matrix::Zero(d + 1, d + 1);
  layer.projection(d, d) = 1.0;
  return layer;
}

/// Score-channel delta of column `j` (default: the query): (P V W_K^T W_Q e_j)_d.
/// The value block already holds the token sum, so the context columns are not
/// revisited.
inline double icl_prediction_update(const TokenMatrix& z, const AttentionLayerWeights& layer,
                                    std::optional<long> column = std::nullopt) {
  layer.validate();
  detail::require_same_size(layer.dim(), z.d() + 1, "icl_prediction_update");
  const long j = column.value_or(z.query_index());
  const Vector q = detail_::apply(layer.query, z.matrix().col(j));
  const Vector kq = detail_::apply(layer.key.transpose(), q);
  const Vector vkq = detail_::apply(layer.value, kq);
  return detail_::apply(layer.projection, vkq)[z.d()];
}

// --- Softmax attention and functional gradient descent -----------------------

inline double exponential_kernel(const Vector& x, const Vector& x2, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("kernel bandwidth sigma must be > 0");
  detail::require_same_size(x.size(), x2.size(), "exponential_kernel");
  return std::exp(detail_::dot(x, x2) / (sigma * sigma));
}

/// Softmax weights of the context columns of `x_context` (d x n) for one query.
inline Vector attention_alpha(const Matrix& x_context, const Vector& x_query, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("kernel bandwidth sigma must be > 0");
  if (x_context.cols() == 0) throw ConfigError("attention_alpha needs a non-empty context");
  detail::require_same_size(x_context.rows(), x_query.size(), "attention_alpha");
  const long n = x_context.cols();
  Vector logits(n);
  for (long i = 0; i < n; ++i) {
    logits[i] = detail_::dot(x_context.col(i), x_query) / (sigma * sigma);
  }
  const double top = logits.maxCoeff();
  Vector alpha = (logits.array() - top).exp().matrix();
  return alpha / alpha.sum();
}

/// Z + V Z Softmax(...), with V = diag(0, ..., 0, -r_layer): only the label
/// channel moves. Every column attends to the context columns.
inline TokenMatrix softmax_attention_forward(const TokenMatrix& z, const SoftmaxAttentionConfig& cfg,
                                             std::size_t layer) {
  cfg.validate();
  if (layer >= cfg.layers()) throw ConfigError("softmax layer index out of range");
  const double rate = cfg.rates[layer];
  const long d = z.d();
  const long n = z.n();
  const Matrix context = z.matrix().topLeftCorner(d, n);
  Matrix out = z.matrix();
  for (long j = 0; j <= n; ++j) {
    const Vector alpha = attention_alpha(context, z.features(j), cfg.sigma);
    double mix = 0.0;
    for (long i = 0; i < n; ++i) mix += alpha[i] * z.label(i);
    out(d, j) += -rate * mix;
  }
  return TokenMatrix(std::move(out));
}

/// f_{l+1}(x) = f_l(x) + r sum_i (y_i - f_l(x_i)) K(x_i, x) at the n context
/// points and the query (unnormalized kernel).
inline FunctionEstimate functional_gd_step(const FunctionEstimate& f, const Matrix& x_context,
                                           const Vector& y, const Vector& x_query, double rate,
                                           double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("kernel bandwidth sigma must be > 0");
  const long n = x_context.cols();
  detail::require_same_size(y.size(), n, "functional_gd_step labels");
  detail::require_same_size(f.values.size(), n + 1, "functional_gd_step estimate");
  detail::require_same_size(x_query.size(), x_context.rows(), "functional_gd_step query");

  FunctionEstimate next = f;
  for (long p = 0; p <= n; ++p) {
    const Vector xp = p < n ? Vector(x_context.col(p)) : x_query;
    double s = 0.0;
    for (long i = 0; i < n; ++i) {
      s += (y[i] - f.values[i]) * exponential_kernel(x_context.col(i), xp, sigma);
    }
    next.values[p] += rate * s;
  }
  return next;
}

}  // namespace attention
}  // namespace strategem
