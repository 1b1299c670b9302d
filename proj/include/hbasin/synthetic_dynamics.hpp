#pragma once

// Layered maps with prescribed spectral structure, and numerical verifiers
// for the radial-contraction results: radius decay and collapse, residual
// block emergence constants, manifold attractors, fact/hallucination
// separation, and Lipschitz context insensitivity.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hbasin/common.hpp"
#include "hbasin/rng.hpp"

namespace hbasin {

double standard_normal(Rng& rng);
Vector gaussian_vector(std::size_t d, Rng& rng);
Vector random_unit(std::size_t d, Rng& rng);
/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix, sign-fixed).
Matrix random_orthogonal(std::size_t d, Rng& rng);
/// Q * blockdiag(rho R(theta_1), rho R(theta_2), ..., [rho]) * Q^T, so every
/// singular value equals rho and the spectral radius is exactly rho.
Matrix rotation_scaling_jacobian(std::size_t d, double rho, Rng& rng);

/// Trajectories stored layer-major: layers[t] is the [n, d] state matrix after t steps.
struct Trajectories {
  std::vector<Matrix> layers;
  bool truncated = false;  // a non-finite state appeared; later layers were dropped
  std::size_t steps() const { return layers.empty() ? 0 : layers.size() - 1; }
};

/// h(t+1) = mu + J (h(t) - mu) with a single fixed point mu for every layer.
struct LinearMapSpec {
  Matrix jacobian;
  Vector mu;
  double declared_alpha = 0.0;  // contraction constant the verifier is told to check
  double spectral_radius = 0.0; // exact by construction
};

LinearMapSpec make_linear_spec(std::size_t d, double rho, double declared_alpha, std::uint64_t seed);

/// Linear map whose Jacobian is blockdiag(T, alpha_N O) in the basis
/// [tangent | normal]: T symmetric with eigenvalues in [1, 1 + eps_T] (the
/// largest exactly 1 + eps_T, the smallest exactly 1) and O orthogonal.
struct ManifoldSpec {
  std::size_t tangent_dim = 0;
  double alpha_n = 0.5;
  double eps_t = 0.01;
  Vector mu;
  Matrix basis;     // orthogonal [d, d]; first tangent_dim columns span the tangent space
  Matrix jacobian;  // in ambient coordinates
  Matrix p_t, p_n;  // orthogonal projections, p_t + p_n = I
};

ManifoldSpec make_manifold_spec(std::size_t d, std::size_t tangent_dim, double alpha_n, double eps_t,
                                double mu_norm, std::uint64_t seed);

/// One residual block per layer, with deviation delta = h - mu(l):
///   attn(h) = attn(mu) + L_A Q_A delta + C_A eps a(h),  ||a(h)|| <= 1
///   ffn(h)  = L_F tanh(W delta),                      W orthogonal
///   h'      = mu(l+1) + L_LN P_V (delta + attn(h) - attn(mu) + ffn(h))
/// where P_V removes the mean across coordinates (the LayerNorm centering
/// projection). Hence ||h' - mu(l+1)|| <= L_LN (1 + L_A + L_F) ||delta|| + L_LN C_A eps.
struct ResidualBlockSpec {
  double l_a = 0.3, l_f = 0.3, l_ln = 0.5;
  double c_a = 1.0;
  double eps = 0.0;                // attention-uniformity deviation
  std::vector<Vector> mu;          // per layer 0..L
  std::vector<Matrix> q_a, w_ffn;  // per transition, orthogonal
  std::vector<Matrix> b_dev;       // per transition, drives a(h)

  double alpha() const { return l_ln * (1.0 + l_a + l_f); }
  double offset() const { return l_ln * c_a * eps; }
  std::size_t n_layers() const { return mu.empty() ? 0 : mu.size() - 1; }
  Vector step(std::size_t layer, const Vector& h) const;
};

ResidualBlockSpec make_residual_spec(std::size_t d, std::size_t n_layers, double l_a, double l_f, double l_ln,
                                     double eps, std::uint64_t seed, double c_a = 1.0);

Trajectories simulate_trajectories(const LinearMapSpec& spec, const Matrix& initial, std::size_t steps,
                                   std::size_t threads = 1);
Trajectories simulate_trajectories(const ManifoldSpec& spec, const Matrix& initial, std::size_t steps,
                                   std::size_t threads = 1);
Trajectories simulate_trajectories(const ResidualBlockSpec& spec, const Matrix& initial, std::size_t threads = 1);

struct RadiusDecayReport {
  double alpha_bar = 0.0;
  double r0 = 0.0;
  std::size_t layer0 = 0, last_layer = 0;
  std::size_t n_trajectories = 0;
  std::size_t n_violating = 0;     // trajectories exceeding the bound at some layer
  double worst_excess = 0.0;       // max over (r - bound), negative when all pass
  std::vector<double> counterexample;  // radii of the first violating trajectory
  std::size_t collapse_steps = 0;      // smallest k with alpha_bar^k r0 < 1e-6
  bool collapse_in_horizon = false;
  bool collapse_holds = false;         // every radius at collapse_steps is < 1e-6 (only if in horizon)
  bool passed = false;
};

/// Starts n trajectories on the sphere of radius r0 around mu at layer layer0,
/// iterates to last_layer, and checks r(l) <= alpha^(l - layer0) r0 + 1e-9
/// against the spec's declared alpha.
RadiusDecayReport verify_radius_decay(const LinearMapSpec& spec, double r0, std::size_t layer0, std::size_t last_layer,
                                      std::size_t n_trajectories, std::uint64_t seed, std::size_t threads = 1);

struct EmergenceReport {
  double alpha = 0.0;
  double offset = 0.0;
  bool abstained = false;  // alpha >= 1, nothing is claimed
  std::size_t n_starts = 0;
  std::size_t n_checks = 0;
  std::size_t n_violations = 0;
  double worst_ratio = 0.0;  // max ||delta'|| / (alpha ||delta|| + offset)
  double final_radius_max = 0.0;
  double limit_radius = 0.0;  // offset / (1 - alpha)
  bool passed = false;
};

EmergenceReport verify_basin_emergence(const ResidualBlockSpec& spec, double r0, std::size_t n_starts,
                                       std::uint64_t seed, std::size_t threads = 1);

struct ManifoldReport {
  std::size_t horizon = 0;
  std::size_t n_trials = 0;
  // Per step t = 0..horizon, extreme ratios over trials of the measured
  // component growth to the envelope (alpha_N^t resp. (1+eps_T)^t).
  std::vector<double> normal_ratio_min, normal_ratio_max;
  std::vector<double> tangent_ratio_min, tangent_ratio_max;
  bool passed = false;  // all ratios within [1/2, 2]
};

/// Perturbations with ||delta0|| = 1e-3 ||mu|| mixing both subspaces.
ManifoldReport verify_manifold_attractor(const ManifoldSpec& spec, std::size_t horizon, std::size_t n_trials,
                                         std::uint64_t seed);

enum class RadialLaw { kPointMass, kExponential, kUniform };
std::string to_string(RadialLaw law);

struct SeparationLemmaReport {
  RadialLaw law = RadialLaw::kPointMass;
  double r = 0.0, rho_star = 0.0;
  std::size_t draws = 0;
  double p_hat = 0.0;
  double std_error = 0.0;
  double bound = 0.0;  // r / rho_star
  double mean_radius = 0.0;
  bool passed = false;  // p_hat <= bound + 3 SE
};

/// Draws factual states mu + R u with u uniform on the sphere and R from a
/// radial law with mean rho_star (uniform on [0, 2 rho_star]).
SeparationLemmaReport verify_separation_lemma(RadialLaw law, const Vector& mu, double r, double rho_star,
                                              std::size_t draws, std::uint64_t seed);

struct Readout {
  std::string name;
  std::function<Vector(const Vector&)> map;
  double kappa = 0.0;            // declared Lipschitz constant from L2 input to L1 output
  std::optional<Vector> aligned; // unit input direction attaining kappa, when known
};

/// x -> A x, kappa = sqrt(m) ||A||_2 (exact for a single output row).
Readout linear_readout(const Matrix& a);
/// x -> softmax(A x), kappa = max row norm of A.
Readout softmax_readout(const Matrix& a);
Readout constant_readout(const Vector& c);

struct InsensitivityReport {
  std::string readout;
  double kappa = 0.0, eps = 0.0, r = 0.0;
  bool lipschitz_ok = false;   // the declared constant survived random pair checks
  double lipschitz_worst = 0.0;  // max ||f(x)-f(y)||_1 / ||x-y||
  std::size_t draws = 0;
  double max_change = 0.0;
  double bound = 0.0;          // kappa * eps
  double tightness = 0.0;      // max_change / bound (0 when bound is 0)
  bool passed = false;
};

InsensitivityReport verify_context_insensitivity(const Readout& readout, const Vector& center, double r, double eps,
                                                 std::size_t draws, std::uint64_t seed);

}  // namespace hbasin
