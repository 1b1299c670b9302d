#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "hbasin/multi_basin.hpp"
#include "hbasin/separation_metrics.hpp"
#include "hbasin/synthetic_data.hpp"
#include "hbasin/synthetic_dynamics.hpp"
#include "oracles.hpp"

using namespace hbasin;

namespace {

Matrix sphere_starts(const Vector& mu, double r, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(static_cast<Eigen::Index>(n), mu.size());
  for (std::size_t i = 0; i < n; ++i) m.row(static_cast<Eigen::Index>(i)) = (mu + r * random_unit(static_cast<std::size_t>(mu.size()), rng)).transpose();
  return m;
}

}  // namespace

TEST_CASE("random orthogonal and rotation-scaling Jacobians") {
  Rng rng(3);
  const Matrix q = random_orthogonal(7, rng);
  CHECK((q.transpose() * q - Matrix::Identity(7, 7)).norm() < 1e-12);
  for (double rho : {0.5, 1.0, 1.1}) {
    const Matrix j = rotation_scaling_jacobian(7, rho, rng);
    Eigen::JacobiSVD<Matrix> svd(j);
    for (Eigen::Index i = 0; i < 7; ++i) CHECK(svd.singularValues()[i] == doctest::Approx(rho).epsilon(1e-12));
  }
}

TEST_CASE("linear simulation") {
  SUBCASE("rho = 0.5 halves the radius exactly") {
    const auto spec = make_linear_spec(6, 0.5, 0.5, 1);
    const auto t = simulate_trajectories(spec, sphere_starts(spec.mu, 1.0, 20, 2), 10);
    for (std::size_t k = 0; k <= 10; ++k)
      for (Eigen::Index i = 0; i < 20; ++i)
        CHECK((t.layers[k].row(i).transpose() - spec.mu).norm() == doctest::Approx(std::pow(0.5, k)).epsilon(1e-12));
  }
  SUBCASE("rho = 1 keeps the radius") {
    const auto spec = make_linear_spec(6, 1.0, 1.0, 4);
    const auto t = simulate_trajectories(spec, sphere_starts(spec.mu, 2.0, 20, 5), 50);
    for (Eigen::Index i = 0; i < 20; ++i)
      CHECK(std::abs((t.layers[50].row(i).transpose() - spec.mu).norm() - 2.0) < 1e-12);
  }
  SUBCASE("matches the closed form J^t (h0 - mu) + mu") {
    const auto spec = make_linear_spec(5, 0.9, 0.9, 7);
    const Matrix init = oracle::random_matrix(8, 5, 8, 3.0);
    const auto t = simulate_trajectories(spec, init, 15, 3);
    Matrix power = Matrix::Identity(5, 5);
    for (std::size_t k = 0; k <= 15; ++k) {
      for (Eigen::Index i = 0; i < 8; ++i) {
        const Vector expect = power * (init.row(i).transpose() - spec.mu) + spec.mu;
        CHECK((t.layers[k].row(i).transpose() - expect).norm() < 1e-10);
      }
      power = spec.jacobian * power;
    }
  }
  SUBCASE("divergence truncates") {
    const auto spec = make_linear_spec(3, 1e100, 1.0, 1);
    const auto t = simulate_trajectories(spec, sphere_starts(spec.mu, 1.0, 2, 1), 10);
    CHECK(t.truncated);
    CHECK(t.steps() < 10);
  }
}

TEST_CASE("radius decay verifier") {
  SUBCASE("alpha 0.5, r0 1, 3 steps meets 0.125 with equality") {
    const auto spec = make_linear_spec(8, 0.5, 0.5, 11);
    const auto rep = verify_radius_decay(spec, 1.0, 0, 3, 200, 1);
    CHECK(rep.passed);
    CHECK(rep.n_violating == 0);
    // Every direction is worst case, so the excess over bound + 1e-9 is exactly the slack.
    CHECK(std::abs(rep.worst_excess + 1e-9) < 1e-12);
  }
  SUBCASE("alpha 0.999 over 20 layers meets 0.980") {
    const auto spec = make_linear_spec(8, 0.999, 0.999, 12);
    const auto rep = verify_radius_decay(spec, 1.0, 0, 20, 200, 2);
    CHECK(rep.passed);
    CHECK(std::pow(0.999, 20) == doctest::Approx(0.980).epsilon(1e-3));
    CHECK_FALSE(rep.collapse_in_horizon);
  }
  SUBCASE("collapse below 1e-6 when the horizon allows it") {
    const auto spec = make_linear_spec(8, 0.5, 0.5, 13);
    const auto rep = verify_radius_decay(spec, 1.0, 2, 40, 100, 3);
    CHECK(rep.collapse_steps == 20);  // 0.5^20 < 1e-6 < 0.5^19
    CHECK(rep.collapse_in_horizon);
    CHECK(rep.collapse_holds);
    CHECK(rep.passed);
  }
  SUBCASE("expansion 1.1 declared contractive is caught with a counterexample") {
    const auto spec = make_linear_spec(8, 1.1, 0.9, 14);
    const auto rep = verify_radius_decay(spec, 1.0, 0, 10, 50, 4);
    CHECK_FALSE(rep.passed);
    CHECK(rep.n_violating == 50);
    REQUIRE(rep.counterexample.size() == 11);
    CHECK(rep.counterexample.back() > std::pow(0.9, 10) + 1e-9);
    CHECK(rep.counterexample.back() == doctest::Approx(std::pow(1.1, 10)).epsilon(1e-10));
  }
  SUBCASE("deterministic and thread independent") {
    const auto spec = make_linear_spec(8, 0.8, 0.8, 15);
    const auto a = verify_radius_decay(spec, 1.0, 0, 10, 100, 5);
    const auto b = verify_radius_decay(spec, 1.0, 0, 10, 100, 5, 4);
    CHECK(a.worst_excess == b.worst_excess);
  }
}

TEST_CASE("residual block emergence verifier") {
  SUBCASE("L_LN 0.5, L_A = L_F = 0.3 gives alpha 0.8 and holds for 10^4 starts") {
    const auto spec = make_residual_spec(16, 12, 0.3, 0.3, 0.5, 0.05, 21);
    CHECK(spec.alpha() == doctest::Approx(0.8));
    const auto rep = verify_basin_emergence(spec, 2.0, 10000, 22);
    CHECK(rep.passed);
    CHECK_FALSE(rep.abstained);
    CHECK(rep.n_violations == 0);
    CHECK(rep.worst_ratio <= 1.0 + 1e-12);
    CHECK(rep.offset == doctest::Approx(0.5 * 0.05));
  }
  SUBCASE("eps 0 is a pure contraction") {
    const auto spec = make_residual_spec(8, 20, 0.3, 0.3, 0.5, 0.0, 23);
    CHECK(spec.offset() == 0.0);
    const auto rep = verify_basin_emergence(spec, 1.0, 200, 24);
    CHECK(rep.passed);
    CHECK(rep.final_radius_max <= std::pow(0.8, 20) * 1.0 + 1e-12);
  }
  SUBCASE("alpha 1.44 abstains") {
    const auto spec = make_residual_spec(8, 5, 0.3, 0.3, 0.9, 0.01, 25);
    CHECK(spec.alpha() == doctest::Approx(1.44));
    const auto rep = verify_basin_emergence(spec, 1.0, 100, 26);
    CHECK(rep.abstained);
    CHECK_FALSE(rep.passed);
  }
}

TEST_CASE("manifold attractor") {
  const auto spec = make_manifold_spec(12, 4, 0.5, 0.01, 10.0, 31);
  CHECK((spec.p_t + spec.p_n - Matrix::Identity(12, 12)).norm() < 1e-12);
  CHECK((spec.p_t * spec.p_n).norm() < 1e-12);
  CHECK((spec.p_t * spec.p_t - spec.p_t).norm() < 1e-12);
  CHECK(spec.p_t.trace() == doctest::Approx(4.0));

  // Eigen oracle: the tangent block's spectrum spans [1, 1 + eps_T].
  const Matrix t_block = spec.basis.leftCols(4).transpose() * spec.jacobian * spec.basis.leftCols(4);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (t_block + t_block.transpose()));
  CHECK(eig.eigenvalues().minCoeff() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(eig.eigenvalues().maxCoeff() == doctest::Approx(1.01).epsilon(1e-12));

  for (std::uint64_t seed : {1, 2, 3}) {
    const auto rep = verify_manifold_attractor(spec, 30, 50, seed);
    CHECK(rep.passed);
    REQUIRE(rep.normal_ratio_max.size() == 31);
    for (std::size_t t = 0; t <= 30; ++t) {
      CHECK(rep.normal_ratio_min[t] >= 0.5);
      CHECK(rep.normal_ratio_max[t] <= 2.0);
      CHECK(rep.tangent_ratio_min[t] >= 0.5);
      CHECK(rep.tangent_ratio_max[t] <= 2.0);
    }
  }
}

TEST_CASE("separation lemma") {
  const Vector mu = Vector::Zero(8);
  const auto point = verify_separation_lemma(RadialLaw::kPointMass, mu, 1.0, 2.0, 10000, 1);
  CHECK(point.p_hat == 0.0);
  CHECK(point.bound == 0.5);
  CHECK(point.passed);
  for (RadialLaw law : {RadialLaw::kExponential, RadialLaw::kUniform}) {
    const auto rep = verify_separation_lemma(law, mu, 1.0, 4.0, 100000, 2);
    CHECK(rep.passed);
    CHECK(rep.p_hat <= rep.bound + 3.0 * rep.std_error);
    CHECK(rep.mean_radius == doctest::Approx(4.0).epsilon(0.02));
    CHECK(3.0 * rep.std_error < 0.2 * rep.bound);
  }
  // Exponential: P[R <= r] = 1 - exp(-r / rho*) exactly.
  const auto ex = verify_separation_lemma(RadialLaw::kExponential, mu, 1.0, 4.0, 100000, 3);
  CHECK(std::abs(ex.p_hat - (1.0 - std::exp(-0.25))) < 4.0 * ex.std_error);
  CHECK_THROWS_AS(verify_separation_lemma(RadialLaw::kUniform, mu, 1.0, 1.0, 10, 1), BasinError);
}

TEST_CASE("context insensitivity") {
  const Matrix a = oracle::random_matrix(1, 6, 41);
  const auto lin = linear_readout(a);
  CHECK(lin.kappa == doctest::Approx(a.norm()).epsilon(1e-12));
  const auto rep = verify_context_insensitivity(lin, Vector::Zero(6), 1.0, 0.1, 2000, 1);
  CHECK(rep.passed);
  CHECK(rep.lipschitz_ok);
  CHECK(rep.tightness >= 0.95);
  CHECK(rep.tightness <= 1.0 + 1e-9);

  const auto zero_eps = verify_context_insensitivity(lin, Vector::Zero(6), 1.0, 0.0, 100, 2);
  CHECK(zero_eps.max_change == 0.0);
  CHECK(zero_eps.passed);

  const auto con = verify_context_insensitivity(constant_readout(Vector::Ones(3)), Vector::Zero(6), 1.0, 0.5, 500, 3);
  CHECK(con.kappa == 0.0);
  CHECK(con.max_change == 0.0);
  CHECK(con.passed);

  const Matrix m = oracle::random_matrix(4, 6, 42);
  const auto soft = verify_context_insensitivity(softmax_readout(m), Vector::Zero(6), 1.0, 0.1, 2000, 4);
  CHECK(soft.lipschitz_ok);
  CHECK(soft.passed);

  Readout liar = linear_readout(a);
  liar.kappa *= 0.5;
  const auto bad = verify_context_insensitivity(liar, Vector::Zero(6), 1.0, 0.1, 500, 5);
  CHECK_FALSE(bad.lipschitz_ok);
  CHECK_FALSE(bad.passed);
}

TEST_CASE("synthetic factoid bundle") {
  SyntheticConfig c;
  const auto sb = make_synthetic_bundle(c);
  CHECK_NOTHROW(sb.bundle.validate());
  CHECK(sb.truth.d_signal == 3);
  CHECK(sb.truth.closed_form_rho_var == doctest::Approx(150.0));
  const auto rep = separation_report(sb.bundle);
  CHECK(rep.layers.back().rho_var.value == doctest::Approx(150.0).epsilon(0.25));

  // Entry layers agree with a direct scan of the stored states.
  for (std::size_t i = 0; i < sb.bundle.n_samples; i += 37) {
    int first = -1;
    for (std::size_t l = 0; l < sb.bundle.layer_count() && first < 0; ++l)
      if ((sb.bundle.state(i, l) - sb.truth.mu_ref).norm() <= sb.truth.basin_radius) first = static_cast<int>(l);
    CHECK(sb.truth.entry_layer[i] == first);
  }
  // Hallucinated trajectories end inside the basin; factual ones can only
  // touch it at the shared embedding layer.
  std::size_t hall_in = 0, fact_in = 0;
  for (std::size_t i = 0; i < sb.bundle.n_samples; ++i) {
    if (sb.bundle.labels[i]) hall_in += sb.truth.entry_layer[i] >= 0;
    else fact_in += sb.truth.entry_layer[i] >= 1;
  }
  CHECK(hall_in >= sb.bundle.count(1) * 95 / 100);
  CHECK(fact_in == 0);

  const auto again = make_synthetic_bundle(c);
  CHECK(again.bundle == sb.bundle);
  c.seed = 43;
  CHECK_FALSE(make_synthetic_bundle(c).bundle == sb.bundle);
}

TEST_CASE("synthetic generation and misconception bundles") {
  SyntheticConfig g;
  g.kind = TaskKind::kGeneration;
  const auto gen = make_synthetic_bundle(g);
  const double rho = separation_report(gen.bundle).layers.back().rho_var.value;
  CHECK(rho >= 0.8);
  CHECK(rho <= 1.25);

  SyntheticConfig m;
  m.kind = TaskKind::kMisconception;
  m.n = 900;
  m.dim = 16;
  const auto mis = make_synthetic_bundle(m);
  CHECK(mis.truth.cluster_spread == doctest::Approx(4.0));
  const Matrix hall = layer_slice(mis.bundle, m.n_layers, ClassFilter::kHallucinated);
  const auto part = partition_hallucinations(hall, 3, 0.9, 42);
  REQUIRE_FALSE(part.collapsed);
  for (Eigen::Index k = 0; k < 3; ++k) {
    double best = 1e300;
    for (Eigen::Index j = 0; j < 3; ++j)
      best = std::min(best, (part.centers.row(j) - mis.truth.cluster_centers.row(k)).norm());
    CHECK(best <= 0.2 * mis.truth.cluster_spread);
  }
}

TEST_CASE("synthetic options and errors") {
  SyntheticConfig c;
  c.attn_entropy = true;
  c.n = 100;
  const auto sb = make_synthetic_bundle(c);
  REQUIRE(sb.bundle.attn_entropy.has_value());
  CHECK(sb.bundle.attn_entropy->size() == 100 * 12);
  CHECK_NOTHROW(sb.bundle.validate());

  SyntheticConfig big;
  big.dim = 3;
  big.answer_modes = 16;
  CHECK_THROWS_WITH_AS(make_synthetic_bundle(big), doctest::Contains("infeasible dims"), BasinError);
  CHECK(signal_dimension(8) == 3);
  CHECK(signal_dimension(1) == 1);
  CHECK(signal_dimension(16) == 4);
  CHECK(parse_task_kind(to_string(TaskKind::kMisconception)) == TaskKind::kMisconception);
  CHECK_THROWS_AS(parse_task_kind("poetry"), BasinError);

  const auto ctx = make_context_bundle(c, 50);
  CHECK(ctx.n_samples == 50);
  CHECK(std::all_of(ctx.labels.begin(), ctx.labels.end(), [](auto v) { return v == 0; }));
  CHECK_THROWS_AS(make_context_bundle(c, 1), BasinError);
}
