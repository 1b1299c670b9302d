#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "hbasin/detection.hpp"
#include "hbasin/rng.hpp"
#include "hbasin/synthetic_data.hpp"
#include "oracles.hpp"

using namespace hbasin;

namespace {

Labels random_labels(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  Labels y(n);
  for (auto& v : y) v = static_cast<std::uint8_t>(gen() & 1U);
  y[0] = 0;
  y[1] = 1;
  return y;
}

void check_same(const DetectionResult& a, const DetectionResult& b) {
  CHECK(layer_sweep_report(a) == layer_sweep_report(b));
  CHECK(a.best_layer == b.best_layer);
  CHECK(a.basin_exists == b.basin_exists);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    CHECK(a.layers[l].split_auroc_centroid == b.layers[l].split_auroc_centroid);
    CHECK(a.layers[l].split_auroc_maha == b.layers[l].split_auroc_maha);
  }
}

SyntheticBundle small_factoid(std::uint64_t seed = 42) {
  SyntheticConfig c;
  c.n = 600;
  c.n_layers = 4;
  c.dim = 16;
  c.sigma_0 = 0.5;
  c.answer_modes = 8;
  c.separation = 10.0;
  c.seed = seed;
  return make_synthetic_bundle(c);
}

}  // namespace

TEST_CASE("standardizer") {
  Matrix x = oracle::random_matrix(100, 4, 3, 5.0);
  x.col(2).setConstant(0.3);
  x.col(1).array() += 100.0;
  const auto st = Standardizer::fit(x);
  const Matrix z = st.transform(x);
  for (Eigen::Index j = 0; j < 4; ++j) CHECK(std::abs(z.col(j).mean()) < 1e-9);
  for (Eigen::Index j : {0, 1, 3}) {
    const double var = z.col(j).array().square().mean();
    CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(z.col(2).isZero(0.0));
  CHECK(st.scale[2] == kStdFloor);
  CHECK((st.inverse_transform(z) - x).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((st.transform(Vector(x.row(5).transpose())) - z.row(5).transpose()).norm() < 1e-12);
}

TEST_CASE("fit_logistic: separable 1-D data") {
  Matrix x(4, 1);
  x << -2, -1, 1, 2;
  const Labels y{0, 0, 1, 1};
  const auto m = fit_logistic(x, y);
  CHECK(m.converged);
  CHECK(m.w[0] > 0.0);
  CHECK(std::isfinite(m.b));
  for (Eigen::Index i = 0; i < 4; ++i) CHECK((m.decision(x.row(i).transpose()) > 0) == (y[static_cast<std::size_t>(i)] == 1));
}

TEST_CASE("fit_logistic: flipping labels negates the model") {
  const Matrix x = oracle::random_matrix(80, 3, 9);
  const Labels y = random_labels(80, 10);
  Labels flipped = y;
  for (auto& v : flipped) v = static_cast<std::uint8_t>(1 - v);
  const auto a = fit_logistic(x, y);
  const auto b = fit_logistic(x, flipped);
  CHECK((a.w + b.w).norm() < 1e-7);
  CHECK(a.b == doctest::Approx(-b.b).epsilon(1e-6));
}

TEST_CASE("fit_logistic: random 200x5 reaches a stationary point checked by finite differences") {
  Matrix x = oracle::random_matrix(200, 5, 21);
  Labels y(200);
  std::mt19937_64 gen(22);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < 200; ++i) y[static_cast<std::size_t>(i)] = u(gen) < sigmoid(x(i, 0) - 0.5 * x(i, 3)) ? 1 : 0;

  const auto m = fit_logistic(x, y);
  CHECK(m.converged);
  CHECK(m.grad_norm < 1e-6);
  Vector at(6);
  at << m.w, m.b;
  const auto f = [&](const Vector& p) { return logistic_objective(x, y, p.head(5), p[5], 1.0); };
  CHECK(oracle::finite_gradient(f, at, 1e-5).norm() < 1e-5);

  // Analytic gradient against finite differences at an arbitrary point.
  Vector p(6);
  p << 0.3, -0.2, 0.1, 0.5, -0.4, 0.2;
  const Vector g = logistic_gradient(x, y, p.head(5), p[5], 1.0);
  const Vector fd = oracle::finite_gradient(f, p, 1e-5);
  CHECK((g - fd).norm() / fd.norm() < 1e-4);

  // Objective along accepted steps never increases beyond rounding slack.
  REQUIRE(m.objective_trace.size() >= 2);
  for (std::size_t i = 1; i < m.objective_trace.size(); ++i)
    CHECK(m.objective_trace[i] <= m.objective_trace[i - 1] * (1 + 1e-12));

  // Deterministic for fixed data.
  const auto again = fit_logistic(x, y);
  CHECK(again.w == m.w);
  CHECK(again.b == m.b);
}

TEST_CASE("fit_logistic errors") {
  const Matrix x = oracle::random_matrix(5, 2, 1);
  CHECK_THROWS_AS(fit_logistic(x, Labels(5, 1)), BasinError);
  Matrix bad = x;
  bad(2, 1) = std::nan("");
  CHECK_THROWS_AS(fit_logistic(bad, Labels{0, 1, 0, 1, 0}), BasinError);
  CHECK_THROWS_AS(fit_logistic(x, Labels{0, 1}), BasinError);
}

TEST_CASE("linear probe folds standardization back into raw coordinates") {
  const Matrix x = oracle::random_matrix(100, 3, 4, 3.0);
  const Labels y = random_labels(100, 5);
  const auto probe = train_probe(x, y);
  const auto st = Standardizer::fit(x);
  const auto m = fit_logistic(st.transform(x), y);
  for (Eigen::Index i = 0; i < 10; ++i) {
    const Vector h = x.row(i).transpose();
    CHECK(probe.probability(h) == doctest::Approx(m.probability(st.transform(h))).epsilon(1e-12));
  }
}

TEST_CASE("centroid score") {
  const Vector f = Vector::Zero(3);
  const Vector h = Vector::Constant(3, 2.0);
  CHECK(centroid_score(f, f, h) == 0.0);
  CHECK(centroid_score(h, f, h) == doctest::Approx((h - f).norm() / kScoreEps));
  CHECK(centroid_score(0.5 * (f + h), f, h) == doctest::Approx(1.0).epsilon(1e-7));
  CHECK_THROWS_AS(centroid_score(Vector::Zero(2), f, h), BasinError);
}

TEST_CASE("auroc") {
  CHECK(auroc(std::vector<double>{0.9, 0.8, 0.1, 0.2}, Labels{1, 1, 0, 0}) == 1.0);
  CHECK(auroc(std::vector<double>(6, 0.3), Labels{1, 0, 1, 0, 1, 0}) == 0.5);
  CHECK_THROWS_AS(auroc(std::vector<double>{0.1, 0.2}, Labels{1, 1}), BasinError);

  std::mt19937_64 gen(31);
  std::uniform_int_distribution<int> coarse(0, 6);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 30 + static_cast<std::size_t>(trial % 7);
    const Labels y = random_labels(n, 100 + static_cast<std::uint64_t>(trial));
    std::vector<double> s(n);
    for (auto& v : s) v = trial % 2 ? nd(gen) : static_cast<double>(coarse(gen));  // odd trials have many ties
    const double a = auroc(s, y);
    CHECK(std::abs(a - oracle::pairwise_auroc(s, y)) < 1e-12);
    std::vector<double> neg(n), ex(n), aff(n);
    for (std::size_t i = 0; i < n; ++i) {
      neg[i] = -s[i];
      ex[i] = std::exp(s[i]);
      aff[i] = 3.0 * s[i] - 1.0;
    }
    CHECK(auroc(neg, y) == 1.0 - a);
    CHECK(auroc(ex, y) == a);
    CHECK(auroc(aff, y) == a);
  }
}

TEST_CASE("bootstrap CI") {
  const std::vector<double> sep{0.9, 0.8, 0.95, 0.1, 0.2, 0.15};
  const Labels y{1, 1, 1, 0, 0, 0};
  const auto ci = bootstrap_ci(sep, y, 20, 1);
  CHECK(ci.low == 1.0);
  CHECK(ci.high == 1.0);
  const auto ties = bootstrap_ci(std::vector<double>(6, 0.4), y, 20, 1);
  CHECK(ties.low == 0.5);
  CHECK(ties.high == 0.5);

  std::mt19937_64 gen(4);
  std::normal_distribution<double> nd;
  const Labels ry = random_labels(60, 8);
  std::vector<double> s(60);
  for (std::size_t i = 0; i < 60; ++i) s[i] = nd(gen) + ry[i];
  const auto a = bootstrap_ci(s, ry, 20, 99);
  const auto b = bootstrap_ci(s, ry, 20, 99);
  CHECK(a.low == b.low);
  CHECK(a.high == b.high);
  CHECK(a.low <= a.high);
  CHECK_FALSE(a.widened);
  CHECK_THROWS_AS(bootstrap_ci(s, ry, 0, 1), BasinError);
}

TEST_CASE("Mahalanobis ratio orders like the centroid score when both covariances are the identity") {
  const Matrix pts = oracle::random_matrix(50, 3, 6);
  LayerDetector det;
  det.standardizer.mean = Vector::Zero(3);
  det.standardizer.scale = Vector::Ones(3);
  det.fact.mean = Vector::Zero(3);
  det.hall.mean = Vector::Constant(3, 1.0);
  det.fact.cov = Matrix::Identity(3, 3);
  det.hall.cov = Matrix::Identity(3, 3);
  std::vector<double> c, m;
  for (Eigen::Index i = 0; i < 50; ++i) {
    c.push_back(det.centroid(pts.row(i).transpose()));
    m.push_back(det.mahalanobis_ratio(pts.row(i).transpose()));
  }
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t j = 0; j < 50; ++j) CHECK((c[i] < c[j]) == (m[i] < m[j]));
}

TEST_CASE("evaluate_dataset on the factoid geometry finds the basin") {
  const auto sb = small_factoid();
  const auto res = evaluate_dataset(sb.bundle);
  CHECK(res.layers.size() == 5);
  CHECK(res.n_samples == 600);
  CHECK(res.layers[res.best_layer].auroc_centroid >= 0.95);
  CHECK(res.basin_exists);
  for (const auto& l : res.layers) {
    CHECK(l.auroc_centroid >= 0.0);
    CHECK(l.auroc_centroid <= 1.0);
    CHECK(l.ci_centroid.low <= l.auroc_centroid);
    CHECK(l.auroc_centroid <= l.ci_centroid.high);
    CHECK(l.ci_maha.low <= l.auroc_maha);
    CHECK(l.auroc_maha <= l.ci_maha.high);
    CHECK(l.split_auroc_centroid.size() == 3);
    CHECK(l.auroc_centroid <= res.layers[res.best_layer].auroc_centroid);
  }

  SUBCASE("rerun and thread count give identical results") {
    check_same(res, evaluate_dataset(sb.bundle));
    DetectionConfig cfg;
    cfg.threads = 4;
    check_same(res, evaluate_dataset(sb.bundle, cfg));
  }
  SUBCASE("permuted labels give chance AUROC and no basin") {
    TrajectoryBundle shuffled = sb.bundle;
    Rng rng(123);
    shuffle_in_place(shuffled.labels, rng);
    const auto null = evaluate_dataset(shuffled);
    for (const auto& l : null.layers) {
      CHECK(l.auroc_centroid >= 0.40);
      CHECK(l.auroc_centroid <= 0.60);
    }
    CHECK_FALSE(null.basin_exists);
  }
  SUBCASE("theta is the verdict threshold") {
    DetectionConfig cfg;
    cfg.theta = 1.01;
    CHECK_FALSE(evaluate_dataset(sb.bundle, cfg).basin_exists);
  }
}

TEST_CASE("test rows do not influence any fitted statistic") {
  const auto sb = small_factoid(5);
  const auto split = stratified_split(sb.bundle, 0.7, 42);
  TrajectoryBundle poisoned = sb.bundle;
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<float> u(-1e3f, 1e3f);
  for (std::size_t i : split.test_idx)
    for (std::size_t l = 0; l < poisoned.layer_count(); ++l)
      for (auto& v : poisoned.row(i, l)) v = u(gen);
  for (std::size_t layer : {0u, 2u, 4u}) {
    const auto a = fit_layer_detector(sb.bundle, layer, split.train_idx);
    const auto b = fit_layer_detector(poisoned, layer, split.train_idx);
    CHECK(a.standardizer.mean == b.standardizer.mean);
    CHECK(a.standardizer.scale == b.standardizer.scale);
    CHECK(a.fact.mean == b.fact.mean);
    CHECK(a.hall.mean == b.hall.mean);
    CHECK(*a.fact.cov == *b.fact.cov);
    CHECK(*a.hall.cov == *b.hall.cov);
  }
}

TEST_CASE("layer sweep report") {
  SyntheticConfig c;
  c.n = 200;
  c.n_layers = 2;
  c.dim = 8;
  const auto res = evaluate_dataset(make_synthetic_bundle(c).bundle);
  const auto rows = layer_sweep_report(res);
  REQUIRE(rows.size() == 3);
  std::size_t flagged = 0;
  for (const auto& r : rows) {
    CHECK(r.n == 200);
    flagged += r.basin;
  }
  CHECK(flagged == (res.basin_exists ? 1u : 0u));
  CHECK(rows[res.best_layer].basin == res.basin_exists);
  CHECK_THROWS_AS(layer_sweep_report(DetectionResult{}), BasinError);
}
