#include "hbasin/separation_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Eigenvalues>

#include "hbasin/parallel.hpp"

namespace hbasin {

namespace {

void require_rows(const Matrix& x, std::size_t min_rows, const char* what) {
  if (static_cast<std::size_t>(x.rows()) < min_rows)
    throw BasinError(std::string(what) + ": need at least " + std::to_string(min_rows) + " samples per class");
  if (x.cols() == 0) throw BasinError(std::string(what) + ": zero-dimensional states");
}

double mean_sq_to_centroid(const Matrix& x) {
  const Vector mu = x.colwise().mean().transpose();
  return (x.rowwise() - mu.transpose()).rowwise().squaredNorm().mean();
}

}  // namespace

double ledoit_wolf_shrinkage(const Matrix& xc) {
  const double n = static_cast<double>(xc.rows());
  const double p = static_cast<double>(xc.cols());
  const Matrix x2 = xc.array().square().matrix();
  const Vector emp_cov_diag = x2.colwise().sum().transpose() / n;
  const double mu = emp_cov_diag.sum() / p;
  const double beta_sum = (x2.transpose() * x2).sum();
  const double delta_sum = (xc.transpose() * xc).array().square().sum() / (n * n);
  double beta = (beta_sum / n - delta_sum) / (p * n);
  double delta = (delta_sum - 2.0 * mu * emp_cov_diag.sum() + p * mu * mu) / p;
  beta = std::min(beta, delta);
  if (beta <= 0.0 || delta <= 0.0) return 0.0;
  return std::clamp(beta / delta, 0.0, 1.0);
}

ClassMoments class_moments(const Matrix& x, bool shrink) {
  require_rows(x, 2, "class_stats");
  ClassMoments m;
  m.n = static_cast<std::size_t>(x.rows());
  m.mean = x.colwise().mean().transpose();
  const Matrix xc = x.rowwise() - m.mean.transpose();
  m.sample_cov = (xc.transpose() * xc) / static_cast<double>(x.rows());
  m.cov_trace = m.sample_cov.trace();
  m.degenerate = !(m.cov_trace > 0.0);
  if (shrink) {
    const double d = static_cast<double>(x.cols());
    m.shrinkage = m.degenerate ? 0.0 : ledoit_wolf_shrinkage(xc);
    Matrix c = (1.0 - m.shrinkage) * m.sample_cov;
    c.diagonal().array() += m.shrinkage * m.cov_trace / d;
    m.cov = std::move(c);
  }
  return m;
}

ClassStats class_stats(const Matrix& fact, const Matrix& hall, bool shrink) {
  if (fact.cols() != hall.cols()) throw BasinError("class_stats: dimension mismatch");
  return {class_moments(fact, shrink), class_moments(hall, shrink)};
}

VarianceRatio variance_ratio(const Matrix& fact, const Matrix& hall) {
  require_rows(fact, 2, "variance_ratio");
  require_rows(hall, 2, "variance_ratio");
  VarianceRatio r;
  r.var_fact = mean_sq_to_centroid(fact);
  r.var_hall = mean_sq_to_centroid(hall);
  if (!(r.var_hall > 0.0)) {
    r.infinite = true;
    r.value = std::numeric_limits<double>::infinity();
  } else {
    r.value = r.var_fact / r.var_hall;
  }
  return r;
}

double fisher_ratio(const Matrix& fact, const Matrix& hall) {
  require_rows(fact, 2, "fisher_ratio");
  require_rows(hall, 2, "fisher_ratio");
  const double denom = mean_sq_to_centroid(fact) + mean_sq_to_centroid(hall);
  if (!(denom > 0.0)) throw BasinError("degenerate classes: both covariance traces are zero");
  const Vector diff = fact.colwise().mean() - hall.colwise().mean();
  return diff.squaredNorm() / denom;
}

double basin_separation(const Matrix& fact, const Matrix& hall) {
  if (fact.rows() == 0 || hall.rows() == 0) throw BasinError("basin_separation: empty class");
  return (fact.colwise().mean() - hall.colwise().mean()).norm();
}

MahalanobisSolver::MahalanobisSolver(Vector mean, const Matrix& cov) : mean_(std::move(mean)) {
  if (cov.rows() != mean_.size() || cov.cols() != mean_.size())
    throw BasinError("mahalanobis: covariance shape does not match the mean");
  const double d = static_cast<double>(cov.rows());
  const double tol = 1e-12 * cov.trace() / d;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success || !(cov.trace() > 0.0) || !(eig.eigenvalues().minCoeff() > tol))
    throw BasinError("mahalanobis: covariance is not positive definite");
  llt_.compute(cov);
  if (llt_.info() != Eigen::Success) throw BasinError("mahalanobis: Cholesky factorization failed");
}

double MahalanobisSolver::distance_sq(const Vector& x) const {
  if (x.size() != mean_.size()) throw BasinError("mahalanobis: dimension mismatch");
  const Vector diff = x - mean_;
  const Vector z = llt_.matrixL().solve(diff);
  return z.squaredNorm();
}

double mahalanobis_sq(const Vector& x, const Vector& mean, const Matrix& cov) {
  return MahalanobisSolver(mean, cov).distance_sq(x);
}

double mahalanobis_sq(const Vector& x, const ClassMoments& m) {
  return mahalanobis_sq(x, m.mean, m.cov ? *m.cov : m.sample_cov);
}

PcaResult pca_project(const Matrix& points, std::size_t k) {
  if (k == 0) throw BasinError("pca: k must be positive");
  if (static_cast<std::size_t>(points.rows()) < k + 1) throw BasinError("pca: need at least k+1 points");
  if (static_cast<std::size_t>(points.cols()) < k) throw BasinError("pca: k exceeds dimension");
  PcaResult out;
  out.mean = points.colwise().mean().transpose();
  const Matrix xc = points.rowwise() - out.mean.transpose();
  const Matrix cov = (xc.transpose() * xc) / static_cast<double>(points.rows());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success) throw BasinError("pca: eigen-decomposition failed");

  const auto d = cov.rows();
  const auto kk = static_cast<Eigen::Index>(k);
  out.components.resize(d, kk);
  out.explained_variance.resize(kk);
  const double tol = 1e-12 * std::max(cov.trace(), std::numeric_limits<double>::min());
  for (Eigen::Index j = 0; j < kk; ++j) {
    const Eigen::Index src = d - 1 - j;  // eigenvalues come ascending
    Vector v = eig.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;
    out.components.col(j) = v;
    const double lambda = std::max(eig.eigenvalues()[src], 0.0);
    out.explained_variance[j] = lambda <= tol ? 0.0 : lambda;
    if (out.explained_variance[j] == 0.0) out.rank_deficient = true;
  }
  out.projections = xc * out.components;
  return out;
}

SeparationReport separation_report(const TrajectoryBundle& bundle, std::size_t threads) {
  SeparationReport report;
  report.layers.resize(bundle.layer_count());
  parallel_for(bundle.layer_count(), threads, [&](std::size_t l) {
    const Matrix fact = layer_slice(bundle, l, ClassFilter::kFactual);
    const Matrix hall = layer_slice(bundle, l, ClassFilter::kHallucinated);
    LayerSeparation& row = report.layers[l];
    row.layer = l;
    row.n_fact = static_cast<std::size_t>(fact.rows());
    row.n_hall = static_cast<std::size_t>(hall.rows());
    row.rho_var = variance_ratio(fact, hall);
    row.basin_sep = basin_separation(fact, hall);
    try {
      row.fisher = fisher_ratio(fact, hall);
    } catch (const BasinError&) {
      row.fisher_degenerate = true;
    }
  });
  return report;
}

}  // namespace hbasin
