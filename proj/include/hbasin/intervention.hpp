#pragma once

// Offline causal interventions: interpolation toward the hallucination
// centroid with random and orthogonalized controls, and the steering vector
// with its geometry-driven strength controller.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hbasin/common.hpp"
#include "hbasin/detection.hpp"
#include "hbasin/reference_geometry.hpp"
#include "hbasin/traj_store.hpp"

namespace hbasin {

/// (1 - alpha) h_fact + alpha mu_hall, alpha in [0, 1].
Vector interpolate(const Vector& h_fact, const Vector& mu_hall, double alpha);

enum class Direction { kBasin = 0, kRandom = 1, kOrthogonal = 2 };
inline constexpr std::array<Direction, 3> kDirections = {Direction::kBasin, Direction::kRandom, Direction::kOrthogonal};
std::string to_string(Direction d);

/// 0, step, 2 step, ..., up to `last` (inclusive within rounding).
std::vector<double> make_grid(double first, double last, double step);

struct DoseResponse {
  std::size_t layer = 0;
  std::size_t n_samples = 0;
  std::vector<double> alphas;
  std::array<std::vector<double>, 3> p_hall;       // indexed by Direction
  std::array<std::vector<double>, 3> fold_change;  // p(alpha) / p(0)
  std::array<double, 3> max_fold{};
  // Sign of w.u over all samples: +1 all >= 0, -1 all <= 0, 0 mixed.
  std::array<int, 3> direction_sign{};
  std::array<bool, 3> monotone{};                  // p_hall follows direction_sign (only meaningful when != 0)
  Vector basin_axis;            // unit (mu_hall - mu_fact)
  Vector random_direction;      // fixed unit vector drawn from the seed
  Vector orthogonal_direction;  // random_direction Gram-Schmidt orthogonalized against basin_axis
  double orthogonal_cosine = 0.0;  // |<orthogonal_direction, basin_axis>|
};

/// Mean probe probability over the given factual states when each state h is
/// moved by alpha times its basin displacement (mu_hall - h), or by the same
/// per-sample length along a fixed random unit direction or along that
/// direction orthogonalized against the basin axis.
DoseResponse dose_response(const Matrix& fact_states, const Vector& mu_hall, const Vector& basin_axis,
                           const LinearProbe& probe, const std::vector<double>& alphas, std::uint64_t seed,
                           std::size_t threads = 1);

struct InterventionConfig {
  std::uint64_t seed = 42;
  double train_fraction = 0.7;
  std::vector<double> alphas = make_grid(0.0, 1.0, 0.1);
  LogisticOptions logistic;
  std::size_t threads = 1;
};

/// Splits the bundle, trains the probe and both class centroids on the
/// training part at `layer`, and runs dose_response on the factual test
/// states with basin axis mu_hall - mu_fact.
DoseResponse run_dose_response(const TrajectoryBundle& bundle, std::size_t layer, const InterventionConfig& config);

struct SteeringVector {
  Vector v;
  bool zero = false;
};

/// mu_fact - mu_hall.
SteeringVector steering_vector(const Matrix& fact, const Matrix& hall);

struct Controller {
  Vector w = Vector::Zero(2);  // over [min distance, mean kappa]
  double b = 0.0;
  double lambda_max = 0.5;
  double lambda(const Vector& phi) const;
};

struct SteeringArtifact {
  std::size_t dim = 0;
  std::vector<std::size_t> layers;
  std::map<std::size_t, Vector> vectors;    // per steering layer
  std::map<std::size_t, Vector> reference;  // mu for each steering layer and its successor
  Controller controller;
  double eps = kContractionEps;
  std::string model_id;
  std::string dataset_id;

  bool operator==(const SteeringArtifact& o) const;
};

inline constexpr int kArtifactVersion = 1;
inline constexpr const char* kArtifactFormat = "hbasin-steering";

std::vector<std::size_t> auto_layers(std::size_t n_layers);

/// Phi = [min over steering layers of ||h(l) - mu(l)||, mean of kappa(l)].
Vector steering_features(const TrajectoryBundle& b, std::size_t sample, const SteeringArtifact& artifact);
Vector steering_features(const TrajectoryBundle& b, std::size_t sample, const ReferenceState& ref,
                         const std::vector<std::size_t>& layers, double eps = kContractionEps);

struct SteeringConfig {
  std::vector<std::size_t> layers;  // empty = auto
  double lambda_max = 0.5;
  double train_fraction = 0.7;
  std::uint64_t seed = 42;
  LogisticOptions logistic;
};

struct SteeringFit {
  SteeringArtifact artifact;
  SplitIndex split;
};

/// Steering vectors and controller from the training split. The reference
/// supplies mu for the features; when absent it is built from the
/// hallucinated training samples.
SteeringFit fit_controller(const TrajectoryBundle& bundle, const ReferenceState* ref, const SteeringConfig& config);

/// h_i + lambda(phi_i) v(layer) for each row.
Matrix apply_steering_offline(const Matrix& states, const SteeringArtifact& artifact, std::size_t layer,
                              const Matrix& phi);
/// h_i + lambda v for a fixed strength.
Matrix apply_steering_fixed(const Matrix& states, const Vector& v, double lambda);

/// Mean probe probability of `states` after adding lambda v, for each lambda.
std::vector<double> steering_sweep(const Matrix& states, const Vector& v, const LinearProbe& probe,
                                   const std::vector<double>& lambdas);

std::string encode_f32_base64(const Vector& v);
Vector decode_f32_base64(const std::string& s, std::size_t dim);

std::string artifact_to_json(const SteeringArtifact& a);
SteeringArtifact artifact_from_json(const std::string& text);
void export_artifact(const SteeringArtifact& a, const std::filesystem::path& path);
SteeringArtifact import_artifact(const std::filesystem::path& path);

}  // namespace hbasin
