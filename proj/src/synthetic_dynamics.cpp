#include "hbasin/synthetic_dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <Eigen/QR>
#include <Eigen/SVD>

#include "hbasin/parallel.hpp"

namespace hbasin {

namespace {

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

Matrix rotation_block(double rho, double theta) {
  Matrix b(2, 2);
  b << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  return rho * b;
}

Matrix block_rotation_scaling(std::size_t d, double rho, Rng& rng) {
  Matrix core = Matrix::Zero(d, d);
  std::size_t i = 0;
  for (; i + 1 < d; i += 2) core.block(i, i, 2, 2) = rotation_block(rho, std::numbers::pi * uniform01(rng));
  if (i < d) core(i, i) = rho;
  return core;
}

Trajectories finish(std::vector<Matrix> layers) {
  Trajectories t;
  for (auto& m : layers) {
    if (!m.allFinite()) {
      t.truncated = true;
      break;
    }
    t.layers.push_back(std::move(m));
  }
  return t;
}

Trajectories iterate_affine(const Matrix& j, const Vector& mu, const Matrix& initial, std::size_t steps,
                            std::size_t threads) {
  if (initial.cols() != mu.size()) throw BasinError("simulate: initial states have the wrong dimension");
  std::vector<Matrix> layers(steps + 1, Matrix(initial.rows(), initial.cols()));
  layers[0] = initial;
  parallel_for(static_cast<std::size_t>(initial.rows()), threads, [&](std::size_t i) {
    Vector delta = initial.row(i).transpose() - mu;
    for (std::size_t t = 1; t <= steps; ++t) {
      delta = j * delta;
      layers[t].row(i) = (mu + delta).transpose();
    }
  });
  return finish(std::move(layers));
}

Vector point_in_ball(const Vector& center, double r, Rng& rng) {
  const auto d = static_cast<double>(center.size());
  return center + random_unit(center.size(), rng) * (r * std::pow(uniform01(rng), 1.0 / d));
}

}  // namespace

double standard_normal(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return n(rng);
}

Vector gaussian_vector(std::size_t d, Rng& rng) {
  Vector v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = standard_normal(rng);
  return v;
}

Vector random_unit(std::size_t d, Rng& rng) {
  for (;;) {
    Vector v = gaussian_vector(d, rng);
    const double n = v.norm();
    if (n > 1e-12) return v / n;
  }
}

Matrix random_orthogonal(std::size_t d, Rng& rng) {
  Matrix g(d, d);
  for (std::size_t c = 0; c < d; ++c) g.col(c) = gaussian_vector(d, rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (std::size_t c = 0; c < d; ++c)
    if (r(c, c) < 0.0) q.col(c) = -q.col(c);
  return q;
}

Matrix rotation_scaling_jacobian(std::size_t d, double rho, Rng& rng) {
  const Matrix q = random_orthogonal(d, rng);
  return q * block_rotation_scaling(d, rho, rng) * q.transpose();
}

LinearMapSpec make_linear_spec(std::size_t d, double rho, double declared_alpha, std::uint64_t seed) {
  if (d == 0) throw BasinError("linear spec: dimension must be positive");
  if (!(rho >= 0.0)) throw BasinError("linear spec: spectral radius must be non-negative");
  Rng rng(derive_seed(seed, {stream::kVerifier, 1}));
  LinearMapSpec s;
  s.mu = gaussian_vector(d, rng);
  s.jacobian = rotation_scaling_jacobian(d, rho, rng);
  s.spectral_radius = rho;
  s.declared_alpha = declared_alpha;
  return s;
}

ManifoldSpec make_manifold_spec(std::size_t d, std::size_t k, double alpha_n, double eps_t, double mu_norm,
                                std::uint64_t seed) {
  if (k == 0 || k >= d) throw BasinError("manifold spec: tangent dimension must be in [1, d-1]");
  if (!(alpha_n >= 0.0 && alpha_n < 1.0)) throw BasinError("manifold spec: alpha_N must be in [0, 1)");
  if (!(eps_t >= 0.0)) throw BasinError("manifold spec: eps_T must be non-negative");
  Rng rng(derive_seed(seed, {stream::kVerifier, 2}));
  ManifoldSpec s;
  s.tangent_dim = k;
  s.alpha_n = alpha_n;
  s.eps_t = eps_t;
  s.mu = random_unit(d, rng) * mu_norm;
  s.basis = random_orthogonal(d, rng);

  Vector ev(k);
  for (std::size_t i = 0; i < k; ++i) ev[i] = 1.0 + eps_t * uniform01(rng);
  ev[0] = 1.0 + eps_t;
  if (k > 1) ev[k - 1] = 1.0;
  const Matrix u = random_orthogonal(k, rng);
  Matrix core = Matrix::Zero(d, d);
  core.topLeftCorner(k, k) = u * ev.asDiagonal() * u.transpose();
  core.bottomRightCorner(d - k, d - k) = alpha_n * random_orthogonal(d - k, rng);
  s.jacobian = s.basis * core * s.basis.transpose();
  const Matrix qt = s.basis.leftCols(k);
  s.p_t = qt * qt.transpose();
  s.p_n = Matrix::Identity(d, d) - s.p_t;
  return s;
}

Vector ResidualBlockSpec::step(std::size_t layer, const Vector& h) const {
  const Vector delta = h - mu[layer];
  const auto d = static_cast<double>(h.size());
  const Vector a = (b_dev[layer] * h).array().tanh().matrix() / std::sqrt(d);
  Vector u = delta + l_a * (q_a[layer] * delta) + c_a * eps * a +
             l_f * (w_ffn[layer] * delta).array().tanh().matrix();
  u.array() -= u.mean();
  return mu[layer + 1] + l_ln * u;
}

ResidualBlockSpec make_residual_spec(std::size_t d, std::size_t n_layers, double l_a, double l_f, double l_ln,
                                     double eps, std::uint64_t seed, double c_a) {
  if (d < 2 || n_layers == 0) throw BasinError("residual spec: need d >= 2 and at least one layer");
  if (l_a < 0 || l_f < 0 || l_ln <= 0 || eps < 0 || c_a < 0) throw BasinError("residual spec: constants must be non-negative");
  Rng rng(derive_seed(seed, {stream::kVerifier, 3}));
  ResidualBlockSpec s;
  s.l_a = l_a;
  s.l_f = l_f;
  s.l_ln = l_ln;
  s.eps = eps;
  s.c_a = c_a;
  for (std::size_t l = 0; l <= n_layers; ++l) s.mu.push_back(gaussian_vector(d, rng));
  for (std::size_t l = 0; l < n_layers; ++l) {
    s.q_a.push_back(random_orthogonal(d, rng));
    s.w_ffn.push_back(random_orthogonal(d, rng));
    Matrix b(d, d);
    for (std::size_t c = 0; c < d; ++c) b.col(c) = gaussian_vector(d, rng);
    s.b_dev.push_back(std::move(b));
  }
  return s;
}

Trajectories simulate_trajectories(const LinearMapSpec& spec, const Matrix& initial, std::size_t steps,
                                   std::size_t threads) {
  return iterate_affine(spec.jacobian, spec.mu, initial, steps, threads);
}

Trajectories simulate_trajectories(const ManifoldSpec& spec, const Matrix& initial, std::size_t steps,
                                   std::size_t threads) {
  return iterate_affine(spec.jacobian, spec.mu, initial, steps, threads);
}

Trajectories simulate_trajectories(const ResidualBlockSpec& spec, const Matrix& initial, std::size_t threads) {
  const std::size_t steps = spec.n_layers();
  if (steps == 0 || initial.cols() != spec.mu[0].size()) throw BasinError("simulate: residual spec/initial mismatch");
  std::vector<Matrix> layers(steps + 1, Matrix(initial.rows(), initial.cols()));
  layers[0] = initial;
  parallel_for(static_cast<std::size_t>(initial.rows()), threads, [&](std::size_t i) {
    Vector h = initial.row(i).transpose();
    for (std::size_t t = 0; t < steps; ++t) {
      h = spec.step(t, h);
      layers[t + 1].row(i) = h.transpose();
    }
  });
  return finish(std::move(layers));
}

RadiusDecayReport verify_radius_decay(const LinearMapSpec& spec, double r0, std::size_t layer0,
                                      std::size_t last_layer, std::size_t n, std::uint64_t seed,
                                      std::size_t threads) {
  if (last_layer < layer0) throw BasinError("radius decay: last layer precedes the entry layer");
  if (!(r0 > 0.0)) throw BasinError("radius decay: r0 must be positive");
  const std::size_t steps = last_layer - layer0;
  const auto d = static_cast<std::size_t>(spec.mu.size());
  Rng rng(derive_seed(seed, {stream::kVerifier, 10}));
  Matrix init(n, d);
  for (std::size_t i = 0; i < n; ++i) init.row(i) = (spec.mu + r0 * random_unit(d, rng)).transpose();
  const Trajectories tr = simulate_trajectories(spec, init, steps, threads);

  RadiusDecayReport rep;
  rep.alpha_bar = spec.declared_alpha;
  rep.r0 = r0;
  rep.layer0 = layer0;
  rep.last_layer = last_layer;
  rep.n_trajectories = n;
  rep.worst_excess = -std::numeric_limits<double>::infinity();
  std::vector<bool> bad(n, false);
  for (std::size_t t = 0; t < tr.layers.size(); ++t) {
    const double bound = std::pow(rep.alpha_bar, static_cast<double>(t)) * r0 + 1e-9;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = (tr.layers[t].row(i).transpose() - spec.mu).norm();
      rep.worst_excess = std::max(rep.worst_excess, r - bound);
      if (r > bound) bad[i] = true;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!bad[i]) continue;
    ++rep.n_violating;
    if (rep.counterexample.empty())
      for (const auto& layer : tr.layers) rep.counterexample.push_back((layer.row(i).transpose() - spec.mu).norm());
  }

  if (rep.alpha_bar < 1.0 && rep.alpha_bar >= 0.0) {
    double v = r0;
    std::size_t k = 0;
    while (v >= 1e-6 && k < 100000000) {
      v *= rep.alpha_bar;
      ++k;
    }
    rep.collapse_steps = k;
    rep.collapse_in_horizon = k < tr.layers.size();
    if (rep.collapse_in_horizon) {
      rep.collapse_holds = true;
      for (std::size_t i = 0; i < n; ++i)
        if (!((tr.layers[k].row(i).transpose() - spec.mu).norm() < 1e-6)) rep.collapse_holds = false;
    }
  }
  rep.passed = rep.n_violating == 0 && !tr.truncated && (!rep.collapse_in_horizon || rep.collapse_holds);
  return rep;
}

EmergenceReport verify_basin_emergence(const ResidualBlockSpec& spec, double r0, std::size_t n_starts,
                                       std::uint64_t seed, std::size_t threads) {
  EmergenceReport rep;
  rep.alpha = spec.alpha();
  rep.offset = spec.offset();
  rep.n_starts = n_starts;
  if (!(rep.alpha < 1.0)) {
    rep.abstained = true;
    return rep;
  }
  rep.limit_radius = rep.offset / (1.0 - rep.alpha);
  const std::size_t d = static_cast<std::size_t>(spec.mu[0].size());
  Rng rng(derive_seed(seed, {stream::kVerifier, 20}));
  Matrix init(n_starts, d);
  for (std::size_t i = 0; i < n_starts; ++i) init.row(i) = point_in_ball(spec.mu[0], r0, rng).transpose();
  const Trajectories tr = simulate_trajectories(spec, init, threads);
  rep.worst_ratio = 0.0;
  for (std::size_t t = 0; t + 1 < tr.layers.size(); ++t) {
    for (std::size_t i = 0; i < n_starts; ++i) {
      const double before = (tr.layers[t].row(i).transpose() - spec.mu[t]).norm();
      const double after = (tr.layers[t + 1].row(i).transpose() - spec.mu[t + 1]).norm();
      const double bound = rep.alpha * before + rep.offset;
      ++rep.n_checks;
      // Rounding allowance proportional to the magnitudes involved.
      const double slack = 1e-12 * (1.0 + before + spec.mu[t + 1].norm());
      if (after > bound + slack) ++rep.n_violations;
      if (bound > 0.0) rep.worst_ratio = std::max(rep.worst_ratio, after / bound);
    }
  }
  const std::size_t last = tr.layers.size() - 1;
  for (std::size_t i = 0; i < n_starts; ++i)
    rep.final_radius_max = std::max(rep.final_radius_max, (tr.layers[last].row(i).transpose() - spec.mu[last]).norm());
  rep.passed = rep.n_violations == 0 && !tr.truncated;
  return rep;
}

ManifoldReport verify_manifold_attractor(const ManifoldSpec& spec, std::size_t horizon, std::size_t n_trials,
                                         std::uint64_t seed) {
  const std::size_t d = static_cast<std::size_t>(spec.mu.size());
  Rng rng(derive_seed(seed, {stream::kVerifier, 30}));
  Matrix init(n_trials, d);
  for (std::size_t i = 0; i < n_trials; ++i) {
    const Vector ut = spec.p_t * gaussian_vector(d, rng);
    const Vector un = spec.p_n * gaussian_vector(d, rng);
    const double w = 0.2 + 0.6 * uniform01(rng);
    Vector delta = w * ut / ut.norm() + (1.0 - w) * un / un.norm();
    delta *= 1e-3 * spec.mu.norm() / delta.norm();
    init.row(i) = (spec.mu + delta).transpose();
  }
  const Trajectories tr = simulate_trajectories(spec, init, horizon);

  ManifoldReport rep;
  rep.horizon = horizon;
  rep.n_trials = n_trials;
  rep.passed = !tr.truncated;
  for (std::size_t t = 0; t < tr.layers.size(); ++t) {
    const double env_n = std::pow(spec.alpha_n, static_cast<double>(t));
    const double env_t = std::pow(1.0 + spec.eps_t, static_cast<double>(t));
    double nmin = std::numeric_limits<double>::infinity(), nmax = 0.0;
    double tmin = std::numeric_limits<double>::infinity(), tmax = 0.0;
    for (std::size_t i = 0; i < n_trials; ++i) {
      const Vector d0 = init.row(i).transpose() - spec.mu;
      const Vector dt = tr.layers[t].row(i).transpose() - spec.mu;
      const double rn = (spec.p_n * dt).norm() / (spec.p_n * d0).norm() / env_n;
      const double rt = (spec.p_t * dt).norm() / (spec.p_t * d0).norm() / env_t;
      nmin = std::min(nmin, rn);
      nmax = std::max(nmax, rn);
      tmin = std::min(tmin, rt);
      tmax = std::max(tmax, rt);
    }
    rep.normal_ratio_min.push_back(nmin);
    rep.normal_ratio_max.push_back(nmax);
    rep.tangent_ratio_min.push_back(tmin);
    rep.tangent_ratio_max.push_back(tmax);
    if (nmin < 0.5 || nmax > 2.0 || tmin < 0.5 || tmax > 2.0) rep.passed = false;
  }
  return rep;
}

std::string to_string(RadialLaw law) {
  switch (law) {
    case RadialLaw::kPointMass: return "point_mass";
    case RadialLaw::kExponential: return "exponential";
    case RadialLaw::kUniform: return "uniform";
  }
  return "unknown";
}

SeparationLemmaReport verify_separation_lemma(RadialLaw law, const Vector& mu, double r, double rho_star,
                                              std::size_t draws, std::uint64_t seed) {
  if (!(r > 0.0)) throw BasinError("separation lemma: radius must be positive");
  if (!(rho_star > r)) throw BasinError("separation lemma: precondition rho* > r violated");
  if (draws == 0) throw BasinError("separation lemma: need at least one draw");
  Rng rng(derive_seed(seed, {stream::kVerifier, 40, static_cast<std::uint64_t>(law)}));
  std::size_t inside = 0;
  double sum_r = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    double radius = rho_star;
    if (law == RadialLaw::kExponential) radius = -rho_star * std::log1p(-uniform01(rng));
    if (law == RadialLaw::kUniform) radius = 2.0 * rho_star * uniform01(rng);
    const Vector h = mu + radius * random_unit(mu.size(), rng);
    const double dist = (h - mu).norm();
    sum_r += dist;
    if (dist <= r) ++inside;
  }
  SeparationLemmaReport rep;
  rep.law = law;
  rep.r = r;
  rep.rho_star = rho_star;
  rep.draws = draws;
  rep.p_hat = static_cast<double>(inside) / static_cast<double>(draws);
  rep.std_error = std::sqrt(rep.p_hat * (1.0 - rep.p_hat) / static_cast<double>(draws));
  rep.bound = r / rho_star;
  rep.mean_radius = sum_r / static_cast<double>(draws);
  rep.passed = rep.p_hat <= rep.bound + 3.0 * rep.std_error;
  return rep;
}

Readout linear_readout(const Matrix& a) {
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinV);
  Readout r;
  r.name = "linear";
  r.kappa = std::sqrt(static_cast<double>(a.rows())) * svd.singularValues()[0];
  r.aligned = Vector(svd.matrixV().col(0));
  r.map = [a](const Vector& x) -> Vector { return a * x; };
  return r;
}

Readout softmax_readout(const Matrix& a) {
  Readout r;
  r.name = "softmax";
  r.kappa = a.rowwise().norm().maxCoeff();
  r.map = [a](const Vector& x) -> Vector {
    Vector z = a * x;
    z = (z.array() - z.maxCoeff()).exp();
    return z / z.sum();
  };
  return r;
}

Readout constant_readout(const Vector& c) {
  Readout r;
  r.name = "constant";
  r.kappa = 0.0;
  r.map = [c](const Vector&) -> Vector { return c; };
  return r;
}

InsensitivityReport verify_context_insensitivity(const Readout& ro, const Vector& center, double r, double eps,
                                                 std::size_t draws, std::uint64_t seed) {
  if (!(r >= 0.0) || !(eps >= 0.0)) throw BasinError("insensitivity: r and eps must be non-negative");
  Rng rng(derive_seed(seed, {stream::kVerifier, 50}));
  const std::size_t d = static_cast<std::size_t>(center.size());
  InsensitivityReport rep;
  rep.readout = ro.name;
  rep.kappa = ro.kappa;
  rep.eps = eps;
  rep.r = r;
  rep.draws = draws;
  rep.bound = ro.kappa * eps;

  // Check the declared constant on random pairs before trusting it.
  rep.lipschitz_ok = true;
  for (std::size_t i = 0; i < 2000; ++i) {
    const Vector x = point_in_ball(center, r + eps + 1.0, rng);
    const Vector y = point_in_ball(center, r + eps + 1.0, rng);
    const double dx = (x - y).norm();
    if (dx == 0.0) continue;
    const double dy = (ro.map(x) - ro.map(y)).lpNorm<1>();
    rep.lipschitz_worst = std::max(rep.lipschitz_worst, dy / dx);
    if (dy > ro.kappa * dx * (1.0 + 1e-9) + 1e-12) rep.lipschitz_ok = false;
  }

  for (std::size_t i = 0; i < draws; ++i) {
    const Vector h = point_in_ball(center, r, rng);
    Vector delta;
    if (ro.aligned && i < 2) {
      delta = (i == 0 ? eps : -eps) * *ro.aligned;
    } else {
      delta = random_unit(d, rng) * (eps * uniform01(rng));
    }
    const double change = (ro.map(h + delta) - ro.map(h)).lpNorm<1>();
    rep.max_change = std::max(rep.max_change, change);
  }
  rep.tightness = rep.bound > 0.0 ? rep.max_change / rep.bound : 0.0;
  rep.passed = rep.lipschitz_ok && rep.max_change <= rep.bound + 1e-9;
  return rep;
}

}  // namespace hbasin
