#pragma once

// Detection protocol: train-split standardization, L2 logistic regression,
// centroid and Mahalanobis ratio scores, rank AUROC with bootstrap intervals,
// and the per-layer sweep with a basin-exists verdict.

#include <cstdint>
#include <span>
#include <vector>

#include "hbasin/common.hpp"
#include "hbasin/separation_metrics.hpp"
#include "hbasin/traj_store.hpp"

namespace hbasin {

inline constexpr double kScoreEps = 1e-8;
inline constexpr double kStdFloor = 1e-12;

struct Standardizer {
  Vector mean;
  Vector scale;  // per-feature population std, floored at kStdFloor

  static Standardizer fit(const Matrix& x);
  Matrix transform(const Matrix& x) const;
  Vector transform(const Vector& x) const;
  Matrix inverse_transform(const Matrix& z) const;
};

struct LogisticOptions {
  double l2 = 1.0;
  double tol = 1e-8;  // on the gradient norm of the full objective
  int max_iter = 1000;
  int history = 10;
};

struct LogisticModel {
  Vector w;
  double b = 0.0;
  double l2 = 1.0;
  double tol = 1e-8;
  int max_iter = 1000;
  int iterations = 0;
  bool converged = false;
  double grad_norm = 0.0;
  // Objective after each accepted step, starting at w=0. Non-increasing up to
  // a relative 1e-12 once decreases fall below the rounding of f.
  std::vector<double> objective_trace;

  double decision(const Vector& x) const { return w.dot(x) + b; }
  double probability(const Vector& x) const;
  Vector probabilities(const Matrix& x) const;
};

/// Sum over samples of log(1 + exp(-y~ (w.x + b))) + l2/2 ||w||^2, y~ = +-1.
double logistic_objective(const Matrix& x, const Labels& y, const Vector& w, double b, double l2);
/// Gradient of logistic_objective; the last entry is d/db.
Vector logistic_gradient(const Matrix& x, const Labels& y, const Vector& w, double b, double l2);

/// Minimizes logistic_objective with L-BFGS and backtracking line search,
/// starting from zero. Deterministic for fixed data.
LogisticModel fit_logistic(const Matrix& x, const Labels& y, const LogisticOptions& opts = {});

double sigmoid(double z);

/// A logistic model on standardized features, folded back into raw
/// coordinates so that probability(h) = sigma(w.h + b) on raw states.
struct LinearProbe {
  Vector w;
  double b = 0.0;
  double probability(const Vector& h) const { return sigmoid(w.dot(h) + b); }
};

LinearProbe train_probe(const Matrix& x, const Labels& y, const LogisticOptions& opts = {});

double centroid_score(const Vector& h, const Vector& mu_fact, const Vector& mu_hall, double eps = kScoreEps);

/// Mann-Whitney AUROC with ties counted one half. Positives carry label 1.
double auroc(std::span<const double> scores, const Labels& labels);

struct Interval {
  double low = 0.0;
  double high = 0.0;
  bool widened = false;  // a resample kept failing, interval set to [0,1]
};

/// 2.5/97.5 percentiles of AUROC over class-stratified bootstrap resamples.
Interval bootstrap_ci(std::span<const double> scores, const Labels& labels, std::size_t n_boot,
                      std::uint64_t seed);

struct DetectionConfig {
  std::size_t splits = 3;
  std::uint64_t seed = 42;
  double train_fraction = 0.7;
  double theta = 0.70;
  std::size_t n_boot = 20;
  double eps = kScoreEps;
  std::size_t threads = 1;
};

/// Train-only statistics for one layer; scores are computed in standardized space.
struct LayerDetector {
  Standardizer standardizer;
  ClassMoments fact;  // shrunk covariance in standardized coordinates
  ClassMoments hall;

  double centroid(const Vector& h, double eps = kScoreEps) const;
  double mahalanobis_ratio(const Vector& h, double eps = kScoreEps) const;
};

LayerDetector fit_layer_detector(const TrajectoryBundle& bundle, std::size_t layer,
                                 std::span<const std::size_t> train_idx);

struct LayerDetection {
  std::size_t layer = 0;
  double auroc_centroid = 0.0;
  double auroc_maha = 0.0;
  Interval ci_centroid;
  Interval ci_maha;
  std::vector<double> split_auroc_centroid;
  std::vector<double> split_auroc_maha;
};

struct DetectionResult {
  std::vector<LayerDetection> layers;
  std::size_t best_layer = 0;
  std::size_t n_samples = 0;
  bool basin_exists = false;
  DetectionConfig config;
};

/// Split seed for split s is master + s.
DetectionResult evaluate_dataset(const TrajectoryBundle& bundle, const DetectionConfig& config = {});

struct SweepRow {
  std::size_t layer = 0;
  double auroc_centroid = 0.0, ci_centroid_low = 0.0, ci_centroid_high = 0.0;
  double auroc_maha = 0.0, ci_maha_low = 0.0, ci_maha_high = 0.0;
  std::size_t n = 0;
  bool basin = false;  // layer is the best layer and the verdict is positive
  bool operator==(const SweepRow&) const = default;
};

std::vector<SweepRow> layer_sweep_report(const DetectionResult& result);

}  // namespace hbasin
