#pragma once

// Agreement metrics between the attention track and the explicit-GD track,
// the seeded verification suites built on them, and the two studies
// (dual-track curves, context-size scaling).

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "strategem/attention.hpp"
#include "strategem/bilevel.hpp"
#include "strategem/errors.hpp"
#include "strategem/parallel.hpp"
#include "strategem/sc_core.hpp"

namespace strategem {

struct Similarity {
  double value = 0.0;
  bool zero_vector = false;  // either input had norm < 1e-15; value is then 0
};

/// Worst case over a suite's instances. pass <=> max_abs <= tolerance.
struct EquivalenceReport {
  std::string suite;
  std::size_t instances = 0;
  double cosine = 0.0;       // smallest cosine over instances with two nonzero vectors
  bool zero_vector = false;  // at least one instance compared a zero vector
  double l2 = 0.0;           // largest ||icl - gd||
  double max_abs = 0.0;      // the checked error (entrywise |icl - gd| unless noted by the suite)
  double tolerance = 0.0;
  bool pass = false;
  std::optional<double> homogeneity_gap;  // raw inner mode: max |c_j - 1|
};

struct DistributionSummary {
  Vector mean;
  Vector variance;  // diagonal, population
  std::size_t count = 0;
};

struct CurveRow {
  std::size_t iter = 0;
  double cosine = 0.0;
  bool zero_vector = false;
  double l2 = 0.0;
  double kl = 0.0;          // KL(gd features || icl features), diagonal Gaussians
  double mean_shift = 0.0;  // icl-manipulated train features vs raw
  double ce_gd = 0.0;
  double ce_icl = 0.0;
};

struct DualTrackOptions {
  std::size_t iterations = 100;
  double outer_eta = 1e-6;
  double initial_intercept = 0.5;
  /// Same-label peers per context, drawn from a seeded permutation of the data.
  std::size_t context_size = 64;
  std::uint64_t seed = 0;
};

struct ScalingOptions {
  std::vector<long> ns{16, 32, 64, 128, 256};
  std::size_t seeds = 20;
  std::size_t queries_per_seed = 8;
  long d = 8;
  double mean_offset = 0.3;
  double positive_fraction = 0.5;
  double eta = 0.5;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

struct ScalingRow {
  long n = 0;
  double median_error = 0.0;
};

struct ScalingResult {
  std::vector<ScalingRow> rows;
  std::optional<double> slope;  // least squares of log median vs log N
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 1000;
  long max_d = 16;
  long max_n = 64;
  /// Added to one entry of the constructed weights; nonzero values must make the suite fail.
  double tamper = 0.0;
};

namespace equivalence {

inline Similarity cosine_similarity(const Vector& a, const Vector& b) {
  detail::require_same_size(a.size(), b.size(), "cosine_similarity");
  const double na = a.norm();
  const double nb = b.norm();
  if (na < 1e-15 || nb < 1e-15) return {0.0, true};
  return {std::clamp(a.dot(b) / (na * nb), -1.0, 1.0), false};
}

inline double l2_distance(const Vector& a, const Vector& b) {
  detail::require_same_size(a.size(), b.size(), "l2_distance");
  return (a - b).norm();
}

inline DistributionSummary summarize(std::span<const Vector> xs) {
  if (xs.empty()) throw ConfigError("summarize needs at least one vector");
  const long d = xs.front().size();
  DistributionSummary s;
  s.count = xs.size();
  s.mean = Vector::Zero(d);
  for (const auto& x : xs) {
    detail::require_same_size(x.size(), d, "summarize");
    s.mean += x;
  }
  s.mean /= static_cast<double>(xs.size());
  s.variance = Vector::Zero(d);
  for (const auto& x : xs) s.variance += (x - s.mean).array().square().matrix();
  s.variance /= static_cast<double>(xs.size());
  return s;
}

inline DistributionSummary summarize(std::span<const LabeledExample> data) {
  std::vector<Vector> xs;
  xs.reserve(data.size());
  for (const auto& ex : data) xs.push_back(ex.features);
  return summarize(xs);
}

/// Closed-form KL(p || q) between diagonal Gaussians; both variances floored at 1e-9.
inline double kl_gaussian(const DistributionSummary& p, const DistributionSummary& q) {
  detail::require_same_size(p.mean.size(), q.mean.size(), "kl_gaussian");
  detail::require_same_size(p.variance.size(), q.variance.size(), "kl_gaussian");
  detail::require_same_size(p.mean.size(), p.variance.size(), "kl_gaussian");
  constexpr double kFloor = 1e-9;
  double kl = 0.0;
  for (long k = 0; k < p.mean.size(); ++k) {
    const double vp = std::max(p.variance[k], kFloor);
    const double vq = std::max(q.variance[k], kFloor);
    const double dm = p.mean[k] - q.mean[k];
    kl += 0.5 * std::log(vq / vp) + (vp + dm * dm) / (2.0 * vq) - 0.5;
  }
  return std::max(kl, 0.0);
}

/// || mean(after) - mean(before) ||.
inline double mean_shift(std::span<const Vector> before, std::span<const Vector> after) {
  if (before.empty() || after.empty()) throw ConfigError("mean_shift needs non-empty lists");
  detail::require_same_size(static_cast<long>(before.size()), static_cast<long>(after.size()),
                            "mean_shift counts");
  const long d = before.front().size();
  Vector diff = Vector::Zero(d);
  for (std::size_t i = 0; i < before.size(); ++i) {
    detail::require_same_size(before[i].size(), d, "mean_shift");
    detail::require_same_size(after[i].size(), d, "mean_shift");
    diff += after[i] - before[i];
  }
  return (diff / static_cast<double>(before.size())).norm();
}

inline double mean_shift(std::span<const LabeledExample> before,
                         std::span<const LabeledExample> after) {
  std::vector<Vector> a, b;
  for (const auto& ex : before) a.push_back(ex.features);
  for (const auto& ex : after) b.push_back(ex.features);
  return mean_shift(a, b);
}

namespace detail_ {

/// Independent stream per (seed, suite, instance) so results do not depend on
/// iteration order or thread count.
inline std::mt19937_64 instance_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

inline Vector normal_vector(std::mt19937_64& rng, long d, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(d);
  for (long k = 0; k < d; ++k) v[k] = normal(rng);
  return v;
}

inline long uniform_int(std::mt19937_64& rng, long lo, long hi) {
  return std::uniform_int_distribution<long>(lo, hi)(rng);
}

inline double uniform_real(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// B^T B / d + 0.1 I, exactly symmetric.
inline Matrix random_spd(std::mt19937_64& rng, long d) {
  Matrix b(d, d);
  for (long c = 0; c < d; ++c) b.col(c) = normal_vector(rng, d);
  Matrix m = b.transpose() * b / static_cast<double>(d) + 0.1 * Matrix::Identity(d, d);
  return 0.5 * (m + m.transpose());
}

class Accumulator {
 public:
  explicit Accumulator(std::string suite) { report_.suite = std::move(suite); }

  /// Compares one instance's two tracks entrywise.
  void compare(const Vector& icl, const Vector& gd) {
    track(icl, gd);
    for (long k = 0; k < icl.size(); ++k) error(std::abs(icl[k] - gd[k]));
  }

  /// Records cosine/l2 for one instance without touching max_abs.
  void track(const Vector& icl, const Vector& gd) {
    ++report_.instances;
    const Similarity s = cosine_similarity(icl, gd);
    if (s.zero_vector) {
      report_.zero_vector = true;
    } else {
      min_cos_ = std::min(min_cos_, s.value);
      any_cos_ = true;
    }
    report_.l2 = std::max(report_.l2, l2_distance(icl, gd));
  }

  /// Counts an instance that only contributes to max_abs.
  void count() { ++report_.instances; }

  void error(double e) {
    // NaN must fail the suite rather than vanish in max().
    if (std::isnan(e)) e = std::numeric_limits<double>::infinity();
    report_.max_abs = std::max(report_.max_abs, e);
  }

  void gap(double g) { report_.homogeneity_gap = std::max(report_.homogeneity_gap.value_or(0.0), g); }

  EquivalenceReport finish(double tolerance) {
    report_.cosine = any_cos_ ? min_cos_ : (report_.zero_vector ? 0.0 : 1.0);
    report_.tolerance = tolerance;
    report_.pass = report_.max_abs <= tolerance;
    return report_;
  }

 private:
  EquivalenceReport report_;
  double min_cos_ = 1.0;
  bool any_cos_ = false;
};

}  // namespace detail_

// --- Inner stage ---------------------------------------------------------------

/// Homogeneous-context instances: every context token and the query share
/// `label`; features are a random center of norm 1.5 plus N(0, 0.25) noise.
///
/// exact / corrected: max_abs = max |dx_icl - dx_gd|, tolerance 1e-10.
/// raw: max_abs = max | ||dx_raw - dx_gd|| - |c_j - 1| ||dx_gd|| |, tolerance
/// 1e-12, with the measured gap |c_j - 1| attached.
inline EquivalenceReport verify_inner(const SuiteOptions& opt, InnerMode mode, int label = 0) {
  if (label != 0 && label != 1) throw ConfigError("verify_inner label must be 0 or 1");
  const char* mode_name = mode == InnerMode::exact ? "exact" : mode == InnerMode::raw ? "raw" : "corrected";
  detail_::Accumulator acc(std::string("inner-") + mode_name + (label == 1 ? "-y1" : ""));
  for (std::size_t t = 0; t < opt.instances; ++t) {
    auto rng = detail_::instance_rng(opt.seed, 1, t);
    const long d = detail_::uniform_int(rng, 1, opt.max_d);
    const long n = mode == InnerMode::exact ? 1 : detail_::uniform_int(rng, 1, opt.max_n);
    ManipulationConfig cfg;
    cfg.eta = detail_::uniform_real(rng, 0.05, 1.0);
    cfg.lambda = detail_::uniform_real(rng, 0.0, 2.0);
    cfg.cost = CostMatrix(detail_::random_spd(rng, d));
    const LinearClassifier clf{detail_::normal_vector(rng, d)};
    Vector center = detail_::normal_vector(rng, d);
    center *= 1.5 / std::max(center.norm(), 1e-12);

    const Vector x_query = center + detail_::normal_vector(rng, d, 0.5);
    std::vector<Vector> xs;
    for (long i = 0; i < n; ++i) xs.push_back(center + detail_::normal_vector(rng, d, 0.5));

    const TokenMatrix z = mode == InnerMode::exact
        ? attention::exact_context_tokens(x_query, label)
        : TokenMatrix::from_columns(xs, std::vector<double>(n, label), x_query, label);
    AttentionLayerWeights layer = attention::build_inner_layer(clf, cfg, label, z.n());
    layer.projection(0, 0) += opt.tamper;

    const Vector gd = core::manipulation_step({x_query, label}, clf, cfg);
    if (mode == InnerMode::raw) {
      const Vector raw = attention::icl_manipulation_update(z, layer, InnerMode::raw);
      const double c = attention::context_normalizer(z, z.query_index());
      acc.track(raw, gd);
      acc.error(std::abs((raw - gd).norm() - std::abs(c - 1.0) * gd.norm()));
      acc.gap(std::abs(c - 1.0));
      continue;
    }
    Vector icl;
    try {
      icl = attention::icl_manipulation_update(z, layer, mode);
    } catch (const DegenerateContextError&) {
      const TokenMatrix ze = attention::exact_context_tokens(x_query, label);
      AttentionLayerWeights le = attention::build_inner_layer(clf, cfg, label, 1);
      le.projection(0, 0) += opt.tamper;
      icl = attention::icl_manipulation_update(ze, le, InnerMode::exact);
    }
    acc.compare(icl, gd);
  }
  return acc.finish(mode == InnerMode::raw ? 1e-12 : 1e-10);
}

// --- Outer stage ---------------------------------------------------------------

/// Compares the score-channel update of every column with dW . x'_j.
/// With `near_clamp`, all tokens are scaled copies t u of one direction with
/// W . u = 1 and t = 1 - 2 eps, so every score sits next to the clamp.
inline EquivalenceReport verify_outer(const SuiteOptions& opt, bool near_clamp = false) {
  detail_::Accumulator acc(near_clamp ? "outer-near-clamp" : "outer");
  for (std::size_t t = 0; t < opt.instances; ++t) {
    auto rng = detail_::instance_rng(opt.seed, near_clamp ? 3 : 2, t);
    const long d = detail_::uniform_int(rng, 1, opt.max_d);
    const long n = detail_::uniform_int(rng, 1, opt.max_n);
    const double eta = detail_::uniform_real(rng, 1e-3, 1.0);
    LinearClassifier clf{detail_::normal_vector(rng, d, 0.5)};

    Batch ctx;
    Vector x_query;
    if (near_clamp) {
      Vector u = detail_::normal_vector(rng, d);
      if (std::abs(clf.weights.dot(u)) < 1e-3) clf.weights += u;
      u /= clf.weights.dot(u);
      const double scale = 1.0 - 2.0 * kScoreEps;
      for (long i = 0; i < n; ++i) {
        ctx.push_back({scale * u, static_cast<int>(detail_::uniform_int(rng, 0, 1))});
      }
      x_query = scale * u;
    } else {
      for (long i = 0; i < n; ++i) {
        ctx.push_back({detail_::normal_vector(rng, d),
                       static_cast<int>(detail_::uniform_int(rng, 0, 1))});
      }
      x_query = detail_::normal_vector(rng, d);
    }

    const TokenMatrix z = TokenMatrix::from_examples(ctx, x_query, core::predict(clf, x_query));
    AttentionLayerWeights layer = attention::build_outer_layer(clf, ctx, eta);
    layer.value(d, 0) += opt.tamper;
    const LinearClassifier dw{core::decision_grad(clf, ctx, eta)};

    Vector icl(n + 1), gd(n + 1);
    for (long j = 0; j <= n; ++j) {
      icl[j] = attention::icl_prediction_update(z, layer, j);
      gd[j] = core::predict(dw, z.features(j));
    }
    acc.compare(icl, gd);
  }
  return acc.finish(1e-10);
}

// --- Least-squares regression prompts --------------------------------------------

/// Prompts y = <w*, x> with Gaussian x; step size c / lambda_max(X^T X / n),
/// c in [0.1, 1]. Compares the query read-out with -<x_test, w_l> per layer.
inline EquivalenceReport verify_lemma(const SuiteOptions& opt, std::size_t layers = 10) {
  detail_::Accumulator acc("lemma");
  for (std::size_t t = 0; t < opt.instances; ++t) {
    auto rng = detail_::instance_rng(opt.seed, 4, t);
    const long d = detail_::uniform_int(rng, 1, std::min<long>(opt.max_d, 8));
    const long n = detail_::uniform_int(rng, 1, std::min<long>(opt.max_n, 32));
    const Vector w_star = detail_::normal_vector(rng, d);
    std::vector<Vector> xs;
    std::vector<double> ys;
    Matrix gram = Matrix::Zero(d, d);
    for (long i = 0; i < n; ++i) {
      xs.push_back(detail_::normal_vector(rng, d));
      ys.push_back(w_star.dot(xs.back()));
      gram += xs.back() * xs.back().transpose();
    }
    gram /= static_cast<double>(n);
    const double top = Eigen::SelfAdjointEigenSolver<Matrix>(gram, Eigen::EigenvaluesOnly)
                           .eigenvalues()
                           .maxCoeff();
    const double eta = detail_::uniform_real(rng, 0.1, 1.0) / std::max(top, 1e-12);
    const Vector x_test = detail_::normal_vector(rng, d);
    const Vector w0 = detail_::uniform_int(rng, 0, 1) ? detail_::normal_vector(rng, d) : Vector::Zero(d);

    const GdTrajectory traj = attention::implicit_gd_verify(xs, ys, x_test, w0, eta, layers, opt.tamper);
    Vector icl(static_cast<long>(traj.predictions_per_step.size()));
    Vector gd(icl.size());
    for (long l = 0; l < icl.size(); ++l) {
      icl[l] = traj.predictions_per_step[l];
      gd[l] = -x_test.dot(traj.weights_per_step[l]);
    }
    acc.track(icl, gd);
    acc.error(traj.max_deviation);
  }
  return acc.finish(1e-8);
}

// --- Softmax attention -------------------------------------------------------------

namespace detail_ {

struct SoftmaxInstance {
  Matrix x;  // d x n context
  Vector y;
  Vector x_query;
  double sigma = 1.0;
  double rate = 1.0;
};

inline SoftmaxInstance softmax_instance(std::uint64_t seed, std::size_t t, long max_d, long max_n) {
  auto rng = instance_rng(seed, 5, t);
  SoftmaxInstance s;
  const long d = uniform_int(rng, 1, std::min<long>(max_d, 8));
  const long n = uniform_int(rng, 1, std::min<long>(max_n, 32));
  s.x.resize(d, n);
  for (long i = 0; i < n; ++i) s.x.col(i) = normal_vector(rng, d);
  s.y = normal_vector(rng, n);
  s.x_query = normal_vector(rng, d);
  s.sigma = std::sqrt(static_cast<double>(d)) * uniform_real(rng, 0.5, 2.0);
  s.rate = uniform_real(rng, 0.05, 1.0);
  return s;
}

inline TokenMatrix softmax_tokens(const SoftmaxInstance& s) {
  std::vector<Vector> xs;
  std::vector<double> ys;
  for (long i = 0; i < s.x.cols(); ++i) {
    xs.push_back(s.x.col(i));
    ys.push_back(s.y[i]);
  }
  return TokenMatrix::from_columns(xs, ys, s.x_query, 0.0);
}

}  // namespace detail_

/// Four reports:
///  softmax        - query label after layer 1 vs -r sum_i alpha_i y_i, alpha
///                   recomputed as K_i / sum K (tolerance 1e-10)
///  softmax-alpha  - |sum alpha - 1| and negative entries (tolerance 1e-12)
///  softmax-fgd    - layer-1 query vs -(FGD step from f = 0) / sum_i K_i (1e-10)
///  softmax-deep   - largest relative growth of the degree-weighted label norm
///                   (attention) and of the FGD residual norm over 5 layers (1e-12)
inline std::vector<EquivalenceReport> verify_softmax(const SuiteOptions& opt) {
  detail_::Accumulator ident("softmax"), alpha_acc("softmax-alpha"), fgd_acc("softmax-fgd"),
      deep("softmax-deep");
  for (std::size_t t = 0; t < opt.instances; ++t) {
    const auto s = detail_::softmax_instance(opt.seed, t, opt.max_d, opt.max_n);
    const long n = s.x.cols();
    const TokenMatrix z = detail_::softmax_tokens(s);
    SoftmaxAttentionConfig cfg{s.sigma, {s.rate + opt.tamper}};
    const double att = attention::softmax_attention_forward(z, cfg, 0).label(n);

    Vector k(n);
    for (long i = 0; i < n; ++i) k[i] = attention::exponential_kernel(s.x.col(i), s.x_query, s.sigma);
    const double ksum = k.sum();
    double oracle = 0.0;
    for (long i = 0; i < n; ++i) oracle += (k[i] / ksum) * s.y[i];
    oracle *= -s.rate;
    ident.compare(Vector::Constant(1, att), Vector::Constant(1, oracle));

    const Vector alpha = attention::attention_alpha(s.x, s.x_query, s.sigma);
    alpha_acc.track(alpha, k / ksum);
    alpha_acc.error(std::abs(alpha.sum() - 1.0));
    alpha_acc.error(std::max(0.0, -alpha.minCoeff()));

    const FunctionEstimate f0{Vector::Zero(n + 1)};
    const FunctionEstimate f1 = attention::functional_gd_step(f0, s.x, s.y, s.x_query, s.rate, s.sigma);
    fgd_acc.compare(Vector::Constant(1, att), Vector::Constant(1, -f1.values[n] / ksum));

    // Deeper layers: attention contracts the label channel in the norm weighted
    // by kernel degrees; FGD with rate 1 / lambda_max(K) contracts residuals.
    Matrix kern(n, n);
    for (long i = 0; i < n; ++i) {
      for (long j = 0; j < n; ++j) kern(i, j) = attention::exponential_kernel(s.x.col(i), s.x.col(j), s.sigma);
    }
    const Vector degree = kern.rowwise().sum();
    const double kmax = Eigen::SelfAdjointEigenSolver<Matrix>(kern, Eigen::EigenvaluesOnly)
                            .eigenvalues()
                            .maxCoeff();
    constexpr std::size_t kLayers = 5;
    SoftmaxAttentionConfig deep_cfg{s.sigma, std::vector<double>(kLayers, s.rate + opt.tamper)};
    TokenMatrix zl = z;
    FunctionEstimate fl = f0;
    auto weighted = [&](const TokenMatrix& m) {
      double acc2 = 0.0;
      for (long i = 0; i < n; ++i) acc2 += degree[i] * m.label(i) * m.label(i);
      return std::sqrt(acc2);
    };
    auto residual = [&](const FunctionEstimate& f) { return (s.y - f.values.head(n)).norm(); };
    Vector att_norms(kLayers + 1), fgd_norms(kLayers + 1);
    att_norms[0] = weighted(zl);
    fgd_norms[0] = residual(fl);
    double growth = 0.0;
    for (std::size_t l = 0; l < kLayers; ++l) {
      zl = attention::softmax_attention_forward(zl, deep_cfg, l);
      fl = attention::functional_gd_step(fl, s.x, s.y, s.x_query, 1.0 / kmax, s.sigma);
      const double a = weighted(zl);
      const double r = residual(fl);
      growth = std::max(growth, (a - att_norms[l]) / std::max(att_norms[0], 1e-300));
      growth = std::max(growth, (r - fgd_norms[l]) / std::max(fgd_norms[0], 1e-300));
      att_norms[l + 1] = a;
      fgd_norms[l + 1] = r;
    }
    deep.count();
    deep.error(growth);
  }
  return {ident.finish(1e-10), alpha_acc.finish(1e-12), fgd_acc.finish(1e-10), deep.finish(1e-12)};
}

// --- Dual-track curves ---------------------------------------------------------------

namespace detail_ {

/// Per-label peer contexts (first `cap` of each label in a seeded permutation).
struct PeerContexts {
  std::vector<Batch> by_label{2};
};

inline PeerContexts peer_contexts(std::span<const LabeledExample> data, std::size_t cap,
                                  std::uint64_t seed) {
  std::vector<std::size_t> perm(data.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  PeerContexts peers;
  for (auto i : perm) {
    auto& group = peers.by_label[data[i].label];
    if (group.size() < cap) group.push_back(data[i]);
  }
  return peers;
}

/// Attention-track best response: each agent attends to raw peers of its own
/// label, corrected by the mean inner product; degenerate contexts fall back
/// to the exact single-token construction.
inline Batch icl_best_response(std::span<const LabeledExample> data, const PeerContexts& peers,
                               const LinearClassifier& clf, const ManipulationConfig& cfg) {
  const long d = clf.dim();
  struct Group {
    std::optional<attention::ContextOperator> op;
    Vector mean_x;
  };
  Group groups[2];
  for (int label = 0; label < 2; ++label) {
    const Batch& ctx = peers.by_label[label];
    if (ctx.empty()) continue;
    const TokenMatrix z = TokenMatrix::from_examples(ctx, ctx.front().features, label);
    const auto layer = attention::build_inner_layer(clf, cfg, label, static_cast<long>(ctx.size()));
    groups[label].op = attention::context_operator(z, layer);
    groups[label].mean_x = Vector::Zero(d);
    for (const auto& ex : ctx) groups[label].mean_x += ex.features;
    groups[label].mean_x /= static_cast<double>(ctx.size());
  }

  Batch out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    const Group& g = groups[ex.label];
    Vector dx;
    const double c = g.op ? g.mean_x.dot(ex.features) : 0.0;
    if (g.op && std::abs(c) >= 1e-12) {
      Vector token(d + 1);
      token << ex.features, static_cast<double>(ex.label);
      dx = g.op->delta(token).head(d) / c;
    } else {
      const TokenMatrix ze = attention::exact_context_tokens(ex.features, ex.label);
      dx = attention::icl_manipulation_update(ze, attention::build_inner_layer(clf, cfg, ex.label, 1),
                                              InnerMode::exact);
    }
    out.push_back({ex.features + dx, ex.label});
  }
  return out;
}

/// Rule update read out of the constructed outer layer by probing unit queries.
inline Vector icl_rule_update(const LinearClassifier& clf, std::span<const LabeledExample> data,
                              double eta) {
  const long d = clf.dim();
  const auto layer = attention::build_outer_layer(clf, data, eta);
  const TokenMatrix z = TokenMatrix::from_examples(data, Vector::Zero(d), 0.0);
  Vector dw(d);
  for (long k = 0; k < d; ++k) {
    dw[k] = attention::icl_prediction_update(z.with_query(Vector::Unit(d, k), 0.0), layer);
  }
  return dw;
}

}  // namespace detail_

/// Runs the bi-level loop twice from the same initial rule: once with the
/// closed-form best response and the explicit rule gradient, once with both
/// stages computed by constructed attention layers. Row 0 is the shared
/// initial state on raw features; row t compares rules after t updates, with
/// KL / mean shift / cross-entropy taken on the features each rule was fit to.
inline std::vector<CurveRow> dual_track_curves(std::span<const LabeledExample> train,
                                               const ManipulationConfig& cfg,
                                               const DualTrackOptions& opt) {
  if (opt.iterations < 1) throw ConfigError("dual_track_curves needs iterations >= 1");
  if (train.empty()) throw ConfigError("dual_track_curves needs a non-empty training set");
  if (opt.context_size < 1) throw ConfigError("dual_track_curves needs context_size >= 1");
  cfg.validate();
  const long d = train.front().features.size();
  detail::require_same_size(d, cfg.cost.dim(), "dual_track_curves");

  BiLevelOptions init;
  init.initial_intercept = opt.initial_intercept;
  LinearClassifier w_gd = core::initial_classifier(d, init);
  LinearClassifier w_icl = w_gd;
  const auto peers = detail_::peer_contexts(train, opt.context_size, opt.seed);

  std::vector<CurveRow> rows;
  rows.reserve(opt.iterations + 1);
  auto row = [&](std::size_t it, std::span<const LabeledExample> gd_fit,
                 std::span<const LabeledExample> icl_fit) {
    CurveRow r;
    r.iter = it;
    const Similarity s = cosine_similarity(w_gd.weights, w_icl.weights);
    r.cosine = s.value;
    r.zero_vector = s.zero_vector;
    r.l2 = l2_distance(w_gd.weights, w_icl.weights);
    r.kl = kl_gaussian(summarize(gd_fit), summarize(icl_fit));
    r.mean_shift = mean_shift(train, icl_fit);
    r.ce_gd = core::cross_entropy_loss(w_gd, gd_fit).value;
    r.ce_icl = core::cross_entropy_loss(w_icl, icl_fit).value;
    return r;
  };
  rows.push_back(row(0, train, train));

  for (std::size_t it = 1; it <= opt.iterations; ++it) {
    const Batch gd_fit = core::best_response_batch(train, w_gd, cfg);
    const Batch icl_fit = detail_::icl_best_response(train, peers, w_icl, cfg);
    w_gd.weights += core::decision_grad(w_gd, gd_fit, opt.outer_eta);
    w_icl.weights += detail_::icl_rule_update(w_icl, icl_fit, opt.outer_eta);
    rows.push_back(row(it, gd_fit, icl_fit));
  }
  return rows;
}

// --- Context-size scaling ------------------------------------------------------------

/// Least-squares slope of log(median) against log(N); absent with fewer than
/// two sizes or a non-positive median.
inline std::optional<double> loglog_slope(std::span<const ScalingRow> rows) {
  if (rows.size() < 2) return std::nullopt;
  double sx = 0.0, sy = 0.0;
  for (const auto& r : rows) {
    if (!(r.median_error > 0.0)) return std::nullopt;
    sx += std::log(static_cast<double>(r.n));
    sy += std::log(r.median_error);
  }
  const double m = static_cast<double>(rows.size());
  const double mx = sx / m, my = sy / m;
  double sxy = 0.0, sxx = 0.0;
  for (const auto& r : rows) {
    const double dx = std::log(static_cast<double>(r.n)) - mx;
    sxy += dx * (std::log(r.median_error) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) return std::nullopt;
  return sxy / sxx;
}

/// Mixed-label contexts with a label-gated inner layer. The raw query update
/// is divided by the mean inner product over the label-0 tokens, giving
/// (N_0 / N) A eta W^T; the target is its population value (1 - pi) A eta W^T
/// with pi the positive fraction. Each (seed, N, query) draws a fresh context;
/// queries are label 0.
inline ScalingResult context_scaling_study(const ScalingOptions& opt) {
  if (opt.ns.empty()) throw ConfigError("scaling study needs at least one context size");
  for (long n : opt.ns) {
    if (n < 2) throw ConfigError("scaling study context sizes must be >= 2");
  }
  if (opt.seeds < 5) throw ConfigError("scaling study needs seeds >= 5");
  if (opt.queries_per_seed < 1) throw ConfigError("scaling study needs queries_per_seed >= 1");
  if (opt.d < 1) throw ConfigError("scaling study needs d >= 1");
  if (!(opt.positive_fraction > 0.0 && opt.positive_fraction < 1.0)) {
    throw ConfigError("scaling study positive_fraction must lie in (0, 1)");
  }
  const long d = opt.d;
  const std::size_t per_n = opt.seeds * opt.queries_per_seed;
  // errors[s][ni * q + k]
  std::vector<std::vector<double>> errors(opt.seeds);

  parallel_for(opt.seeds, opt.jobs, [&](std::size_t s) {
    auto seed_rng = detail_::instance_rng(opt.seed, 6, s);
    const LinearClassifier clf{detail_::normal_vector(seed_rng, d)};
    ManipulationConfig cfg;
    cfg.eta = opt.eta;
    cfg.lambda = opt.lambda;
    cfg.cost = CostMatrix::identity(d);
    const Vector target =
        (1.0 - opt.positive_fraction) * core::manipulation_step({Vector::Zero(d), 0}, clf, cfg);

    auto& out = errors[s];
    out.reserve(opt.ns.size() * opt.queries_per_seed);
    for (std::size_t ni = 0; ni < opt.ns.size(); ++ni) {
      const long n = opt.ns[ni];
      const auto layer = attention::build_inner_layer(clf, cfg, std::nullopt, n);
      for (std::size_t q = 0; q < opt.queries_per_seed; ++q) {
        auto rng = detail_::instance_rng(opt.seed ^ (0x9e3779b97f4a7c15ULL * (s + 1)), 7,
                                         ni * opt.queries_per_seed + q);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::vector<Vector> xs;
        std::vector<double> ys;
        for (long i = 0; i < n; ++i) {
          const int y = unit(rng) < opt.positive_fraction ? 1 : 0;
          xs.push_back(Vector::Constant(d, y == 1 ? opt.mean_offset : -opt.mean_offset) +
                       detail_::normal_vector(rng, d));
          ys.push_back(y);
        }
        const Vector xq = Vector::Constant(d, -opt.mean_offset) + detail_::normal_vector(rng, d);
        const TokenMatrix z = TokenMatrix::from_columns(xs, ys, xq, 0.0);
        const Vector raw = attention::icl_manipulation_update(z, layer, InnerMode::raw);
        const auto c0 = attention::negative_group_normalizer(z, z.query_index());
        Vector icl = Vector::Zero(d);
        if (c0 && std::abs(*c0) >= 1e-12) icl = raw / *c0;
        out.push_back((icl - target).norm());
      }
    }
  });

  ScalingResult result;
  for (std::size_t ni = 0; ni < opt.ns.size(); ++ni) {
    std::vector<double> pool;
    pool.reserve(per_n);
    for (std::size_t s = 0; s < opt.seeds; ++s) {
      for (std::size_t q = 0; q < opt.queries_per_seed; ++q) {
        pool.push_back(errors[s][ni * opt.queries_per_seed + q]);
      }
    }
    std::sort(pool.begin(), pool.end());
    const std::size_t m = pool.size();
    const double median = m % 2 == 1 ? pool[m / 2] : 0.5 * (pool[m / 2 - 1] + pool[m / 2]);
    result.rows.push_back({opt.ns[ni], median});
  }
  result.slope = loglog_slope(result.rows);
  return result;
}

}  // namespace equivalence
}  // namespace strategem
