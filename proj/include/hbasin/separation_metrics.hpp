#pragma once

// Class-separation geometry between factual and hallucinated states at one
// layer. All covariances use population (1/n) normalization.

#include <optional>

#include <Eigen/Cholesky>

#include "hbasin/common.hpp"
#include "hbasin/traj_store.hpp"

namespace hbasin {

struct ClassMoments {
  Vector mean;
  Matrix sample_cov;           // unshrunk population covariance S
  double cov_trace = 0.0;      // tr(S)
  std::optional<Matrix> cov;   // (1-s) S + s tr(S)/d I when shrinkage was requested
  double shrinkage = 0.0;      // Ledoit-Wolf intensity s in [0,1]
  std::size_t n = 0;
  bool degenerate = false;     // tr(S) == 0
};

struct ClassStats {
  ClassMoments fact;
  ClassMoments hall;
};

/// Population mean and covariance of the rows of `x`, optionally with
/// Ledoit-Wolf shrinkage toward tr(S)/d * I.
ClassMoments class_moments(const Matrix& x, bool shrink);
ClassStats class_stats(const Matrix& fact, const Matrix& hall, bool shrink);

/// Ledoit-Wolf intensity for centered data (same estimator as scikit-learn).
double ledoit_wolf_shrinkage(const Matrix& centered);

struct VarianceRatio {
  double value = 0.0;       // +inf when the hallucinated class has zero spread
  bool infinite = false;
  double var_fact = 0.0;    // mean squared distance to the class centroid
  double var_hall = 0.0;
};

VarianceRatio variance_ratio(const Matrix& fact, const Matrix& hall);
double fisher_ratio(const Matrix& fact, const Matrix& hall);
double basin_separation(const Matrix& fact, const Matrix& hall);

/// Cholesky-factored covariance for repeated (x-mu)^T Sigma^-1 (x-mu) queries.
/// Construction fails with BasinError when Sigma is not positive definite
/// (smallest eigenvalue <= 1e-12 * trace/d).
class MahalanobisSolver {
 public:
  MahalanobisSolver(Vector mean, const Matrix& cov);
  double distance_sq(const Vector& x) const;
  const Vector& mean() const { return mean_; }

 private:
  Vector mean_;
  Eigen::LLT<Matrix> llt_;
};

double mahalanobis_sq(const Vector& x, const Vector& mean, const Matrix& cov);
/// Uses the shrunk covariance when present, the sample covariance otherwise.
double mahalanobis_sq(const Vector& x, const ClassMoments& moments);

struct PcaResult {
  Matrix projections;          // [n, k]
  Vector explained_variance;   // k eigenvalues of the population covariance, descending
  Matrix components;           // [d, k], unit columns; largest-|loading| entry positive
  Vector mean;
  bool rank_deficient = false; // fewer than k non-zero eigenvalues
};

PcaResult pca_project(const Matrix& points, std::size_t k);

struct LayerSeparation {
  std::size_t layer = 0;
  VarianceRatio rho_var;
  double fisher = 0.0;
  bool fisher_degenerate = false;
  double basin_sep = 0.0;
  std::size_t n_fact = 0, n_hall = 0;
};

struct SeparationReport {
  std::vector<LayerSeparation> layers;
};

SeparationReport separation_report(const TrajectoryBundle& bundle, std::size_t threads = 1);

}  // namespace hbasin
