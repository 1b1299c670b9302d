#include <doctest.h>

#include <cmath>
#include <random>

#include "hbasin/separation_metrics.hpp"
#include "hbasin/synthetic_data.hpp"
#include "hbasin/synthetic_dynamics.hpp"
#include "oracles.hpp"

using namespace hbasin;

namespace {

Matrix rows(std::initializer_list<std::initializer_list<double>> r) {
  Matrix m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

// Ledoit-Wolf intensity written out term by term.
double lw_oracle(const Matrix& x) {
  const Matrix c = x.rowwise() - oracle::naive_mean(x).transpose();
  const double n = static_cast<double>(c.rows());
  const double d = static_cast<double>(c.cols());
  const Matrix s = oracle::naive_cov(x);
  const double mu = s.trace() / d;
  double delta = 0.0;
  for (Eigen::Index a = 0; a < s.rows(); ++a)
    for (Eigen::Index b = 0; b < s.cols(); ++b) {
      const double t = s(a, b) - (a == b ? mu : 0.0);
      delta += t * t;
    }
  delta /= d;
  double beta = 0.0;
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index a = 0; a < c.cols(); ++a)
      for (Eigen::Index b = 0; b < c.cols(); ++b) {
        const double t = c(i, a) * c(i, b) - s(a, b);
        beta += t * t;
      }
  beta /= n * n * d;
  beta = std::min(beta, delta);
  return beta == 0.0 ? 0.0 : beta / delta;
}

Matrix scaled_gaussian(std::size_t n, const Vector& scale, std::uint64_t seed) {
  Matrix m = oracle::random_matrix(n, static_cast<std::size_t>(scale.size()), seed);
  for (Eigen::Index j = 0; j < m.cols(); ++j) m.col(j) *= scale[j];
  return m;
}

// Top eigenpairs by power iteration with deflation.
std::pair<Vector, Matrix> power_eigen(Matrix a, int k) {
  Vector vals(k);
  Matrix vecs(a.rows(), k);
  for (int c = 0; c < k; ++c) {
    Vector v = Vector::Ones(a.rows()).normalized();
    for (int it = 0; it < 20000; ++it) v = (a * v).normalized();
    vals[c] = v.dot(a * v);
    vecs.col(c) = v;
    a -= vals[c] * v * v.transpose();
  }
  return {vals, vecs};
}

}  // namespace

TEST_CASE("class moments of two points and of identical points") {
  const auto m = class_moments(rows({{0, 0}, {2, 0}}), true);
  CHECK(m.mean.isApprox(Vector::Unit(2, 0)));
  CHECK(m.sample_cov(0, 0) == 1.0);
  CHECK(m.sample_cov(0, 1) == 0.0);
  CHECK(m.sample_cov(1, 1) == 0.0);
  CHECK(m.cov_trace == 1.0);
  CHECK_FALSE(m.degenerate);

  const auto same = class_moments(Matrix::Constant(4, 3, 1.5), true);
  CHECK(same.degenerate);
  REQUIRE(same.cov.has_value());
  CHECK(same.cov->isZero(0.0));
  CHECK(same.sample_cov.isZero(0.0));

  CHECK_THROWS_AS(class_moments(rows({{1, 2}}), true), BasinError);
  CHECK_THROWS_AS(class_moments(Matrix(3, 0), true), BasinError);
}

TEST_CASE("class moments match the naive oracles and Ledoit-Wolf matches the term-by-term oracle") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Matrix x = oracle::random_matrix(40 + 10 * seed, 6, seed);
    const auto m = class_moments(x, true);
    CHECK((m.mean - oracle::naive_mean(x)).norm() < 1e-12);
    CHECK((m.sample_cov - oracle::naive_cov(x)).norm() < 1e-12);
    CHECK(m.shrinkage >= 0.0);
    CHECK(m.shrinkage <= 1.0);
    CHECK(m.shrinkage == doctest::Approx(lw_oracle(x)).epsilon(1e-10));
    const double s = m.shrinkage;
    const Matrix expect =
        (1 - s) * m.sample_cov + s * m.cov_trace / 6.0 * Matrix::Identity(6, 6);
    CHECK((*m.cov - expect).norm() < 1e-12);
  }
}

TEST_CASE("500 samples from N(0, diag(1,4)) give shrunk eigenvalues within 15% of (1,4)") {
  Vector scale(2);
  scale << 1.0, 2.0;
  const auto m = class_moments(scaled_gaussian(500, scale, 17), true);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(*m.cov);
  CHECK(eig.eigenvalues()[0] == doctest::Approx(1.0).epsilon(0.15));
  CHECK(eig.eigenvalues()[1] == doctest::Approx(4.0).epsilon(0.15));
}

TEST_CASE("variance ratio") {
  const Vector ones = Vector::Ones(4);
  const Matrix a = scaled_gaussian(2000, ones, 1);
  const Matrix b = scaled_gaussian(2000, ones, 2);
  const auto same = variance_ratio(a, b);
  CHECK(same.value >= 0.8);
  CHECK(same.value <= 1.25);

  const auto scaled = variance_ratio(2.0 * a, b);
  CHECK(scaled.value == doctest::Approx(4.0).epsilon(0.15));
  CHECK(scaled.var_fact == doctest::Approx(oracle::mean_sq_dist_to_mean(2.0 * a)).epsilon(1e-12));
  CHECK(scaled.var_hall == doctest::Approx(oracle::mean_sq_dist_to_mean(b)).epsilon(1e-12));

  const auto inf = variance_ratio(a, Matrix::Constant(5, 4, 3.0));
  CHECK(inf.infinite);
  CHECK(std::isinf(inf.value));

  SUBCASE("translation and isotropic scaling invariance; factual scaling by c gives c^2") {
    const Matrix f = oracle::random_matrix(30, 3, 4);
    const Matrix h = oracle::random_matrix(25, 3, 5);
    const double base = variance_ratio(f, h).value;
    Matrix ft = f, ht = h;
    ft.rowwise() += Vector::Constant(3, 7.0).transpose();
    ht.rowwise() += Vector::Constant(3, 7.0).transpose();
    CHECK(variance_ratio(ft, ht).value == doctest::Approx(base).epsilon(1e-12));
    CHECK(variance_ratio(3.0 * f, 3.0 * h).value == doctest::Approx(base).epsilon(1e-12));
    CHECK(variance_ratio(1.7 * f, h).value == doctest::Approx(1.7 * 1.7 * base).epsilon(1e-12));
  }
}

TEST_CASE("fisher ratio and basin separation") {
  const Matrix f = rows({{0, 0}, {2, 0}});
  const Matrix h = rows({{5, 0}, {7, 0}});
  CHECK(fisher_ratio(f, h) == doctest::Approx(12.5));
  CHECK(fisher_ratio(f, f) == 0.0);
  CHECK_THROWS_WITH_AS(fisher_ratio(Matrix::Zero(3, 2), Matrix::Zero(3, 2)),
                       doctest::Contains("degenerate classes"), BasinError);

  CHECK(basin_separation(f, f) == 0.0);
  CHECK(basin_separation(rows({{0, 0}, {0, 0}}), rows({{3, 4}, {3, 4}})) == 5.0);
  CHECK_THROWS_AS(basin_separation(Matrix(0, 2), h), BasinError);

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Matrix a = oracle::random_matrix(20, 5, seed);
    const Matrix b = oracle::random_matrix(30, 5, seed + 100, 2.0);
    const Vector ma = oracle::naive_mean(a), mb = oracle::naive_mean(b);
    CHECK(basin_separation(a, b) == doctest::Approx(oracle::naive_dist(ma, mb)).epsilon(1e-12));
    const double d2 = (ma - mb).squaredNorm();
    const double fr = fisher_ratio(a, b);
    CHECK(fr == doctest::Approx(d2 / (oracle::naive_cov(a).trace() + oracle::naive_cov(b).trace())).epsilon(1e-12));

    // Simultaneous translation and rotation leave both unchanged.
    Rng rng(seed);
    const Matrix q = random_orthogonal(5, rng);
    const Vector t = Vector::LinSpaced(5, -3.0, 4.0);
    Matrix at = (a * q.transpose()).rowwise() + t.transpose();
    Matrix bt = (b * q.transpose()).rowwise() + t.transpose();
    CHECK(fisher_ratio(at, bt) == doctest::Approx(fr).epsilon(1e-10));
    CHECK(basin_separation(at, bt) == doctest::Approx(basin_separation(a, b)).epsilon(1e-10));
  }
}

TEST_CASE("mahalanobis distance") {
  const Vector mu = Vector::LinSpaced(3, 1.0, 3.0);
  const Matrix eye = Matrix::Identity(3, 3);
  CHECK(mahalanobis_sq(mu, mu, eye) == 0.0);
  const Vector x = Vector::LinSpaced(3, -2.0, 5.0);
  CHECK(mahalanobis_sq(x, mu, eye) == doctest::Approx((x - mu).squaredNorm()).epsilon(1e-14));

  Matrix s2(2, 2);
  s2 << 2, 0, 0, 0.5;
  CHECK(mahalanobis_sq(Vector::Ones(2), Vector::Zero(2), s2) == doctest::Approx(2.5).epsilon(1e-14));

  Matrix singular(2, 2);
  singular << 1, 1, 1, 1;
  CHECK_THROWS_AS(MahalanobisSolver(Vector::Zero(2), singular), BasinError);
  CHECK_THROWS_AS(mahalanobis_sq(Vector::Zero(3), Vector::Zero(2), s2), BasinError);

  SUBCASE("non-negative, zero only at the mean, invariant under affine maps") {
    std::mt19937_64 gen(5);
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const Matrix g = oracle::random_matrix(4, 4, seed);
      const Matrix cov = g * g.transpose() + 0.5 * Matrix::Identity(4, 4);
      const Vector m = oracle::random_matrix(4, 1, seed + 50).col(0);
      const Vector p = oracle::random_matrix(4, 1, seed + 90).col(0);
      const double d = mahalanobis_sq(p, m, cov);
      CHECK(d > 0.0);
      CHECK(mahalanobis_sq(m, m, cov) == doctest::Approx(0.0));
      // 2x2-free oracle: explicit solve through the full inverse.
      CHECK(d == doctest::Approx((p - m).dot(cov.inverse() * (p - m))).epsilon(1e-8));
      const Matrix a = oracle::random_matrix(4, 4, seed + 200) + 3.0 * Matrix::Identity(4, 4);
      const Vector c = oracle::random_matrix(4, 1, seed + 300).col(0);
      const double da = mahalanobis_sq(a * p + c, a * m + c, a * cov * a.transpose());
      CHECK(da == doctest::Approx(d).epsilon(1e-8));
    }
  }
  SUBCASE("class moments overload uses the shrunk covariance") {
    const Matrix pts = oracle::random_matrix(30, 3, 7);
    const auto m = class_moments(pts, true);
    const Vector q = Vector::Ones(3);
    CHECK(mahalanobis_sq(q, m) == doctest::Approx(mahalanobis_sq(q, m.mean, *m.cov)).epsilon(1e-14));
    const auto raw = class_moments(pts, false);
    CHECK(mahalanobis_sq(q, raw) == doctest::Approx(mahalanobis_sq(q, raw.mean, raw.sample_cov)).epsilon(1e-14));
  }
}

TEST_CASE("pca projection") {
  SUBCASE("points on a line in R^3") {
    Matrix line(10, 3);
    for (int i = 0; i < 10; ++i) line.row(i) = (static_cast<double>(i) * Vector::LinSpaced(3, 1.0, 2.0)).transpose();
    const auto p = pca_project(line, 2);
    CHECK(p.explained_variance[1] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(p.rank_deficient);
    CHECK(p.explained_variance[0] > 0.0);
  }
  SUBCASE("rotation leaves explained variances unchanged") {
    const Matrix x = oracle::random_matrix(40, 4, 3);
    Rng rng(8);
    const Matrix q = random_orthogonal(4, rng);
    const auto a = pca_project(x, 3);
    const auto b = pca_project(x * q.transpose(), 3);
    CHECK((a.explained_variance - b.explained_variance).norm() < 1e-10);
    CHECK_FALSE(a.rank_deficient);
  }
  SUBCASE("random 50x5 matrix against a power-iteration eigen oracle") {
    const Matrix x = scaled_gaussian(50, Vector::LinSpaced(5, 3.0, 0.5), 11);
    const auto p = pca_project(x, 3);
    const auto [vals, vecs] = power_eigen(oracle::naive_cov(x), 3);
    const Matrix centered = x.rowwise() - oracle::naive_mean(x).transpose();
    for (int c = 0; c < 3; ++c) {
      CHECK(p.explained_variance[c] == doctest::Approx(vals[c]).epsilon(1e-8));
      Vector v = vecs.col(c);
      Eigen::Index arg = 0;
      v.cwiseAbs().maxCoeff(&arg);
      if (v[arg] < 0) v = -v;
      CHECK((p.components.col(c) - v).norm() < 1e-8);
      CHECK((p.projections.col(c) - centered * v).norm() < 1e-8);
    }
  }
  CHECK_THROWS_AS(pca_project(oracle::random_matrix(3, 4, 1), 3), BasinError);
  CHECK_THROWS_AS(pca_project(oracle::random_matrix(10, 2, 1), 3), BasinError);
}

TEST_CASE("separation report agrees with the per-layer functions") {
  SyntheticConfig c;
  c.n = 300;
  c.n_layers = 4;
  c.dim = 12;
  const auto sb = make_synthetic_bundle(c);
  const auto rep = separation_report(sb.bundle);
  REQUIRE(rep.layers.size() == 5);
  const auto fi = indices_with_label(sb.bundle.labels, 0);
  const auto hi = indices_with_label(sb.bundle.labels, 1);
  for (std::size_t l = 0; l <= 4; ++l) {
    const Matrix f = gather_rows(sb.bundle, l, fi), h = gather_rows(sb.bundle, l, hi);
    const auto& row = rep.layers[l];
    CHECK(row.layer == l);
    CHECK(row.rho_var.value == doctest::Approx(variance_ratio(f, h).value).epsilon(1e-12));
    CHECK(row.fisher == doctest::Approx(fisher_ratio(f, h)).epsilon(1e-12));
    CHECK(row.basin_sep == doctest::Approx(basin_separation(f, h)).epsilon(1e-12));
    CHECK(row.n_fact == fi.size());
    CHECK(row.n_hall == hi.size());
    CHECK(row.rho_var.value > 0.0);
    CHECK(row.fisher >= 0.0);
  }
  CHECK(separation_report(sb.bundle, 3).layers.back().fisher == rep.layers.back().fisher);
}

TEST_CASE("factoid rho_var grows with the number of answer modes") {
  double prev = 0.0;
  for (std::size_t modes : {2u, 4u, 8u, 16u}) {
    SyntheticConfig c;
    c.n = 2000;
    c.answer_modes = modes;
    c.seed = 7;
    const auto sb = make_synthetic_bundle(c);
    const auto rep = separation_report(sb.bundle);
    const double rho = rep.layers.back().rho_var.value;
    CHECK(rho > prev);
    CHECK(rho == doctest::Approx(sb.truth.closed_form_rho_var).epsilon(0.1));
    prev = rho;
  }
}
