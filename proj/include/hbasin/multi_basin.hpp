#pragma once

// Multi-basin analysis of hallucinated states: seeded k-means with restarts,
// the within-cluster variance collapse test, Voronoi assignment, Gaussian
// softmax posteriors, and a one-vs-rest basin readout.

#include <cstdint>
#include <vector>

#include "hbasin/common.hpp"
#include "hbasin/detection.hpp"

namespace hbasin {

struct KMeansOptions {
  std::size_t restarts = 10;
  std::size_t max_iter = 300;
  std::size_t threads = 1;
};

struct KMeansResult {
  Matrix centers;                 // [K, d]
  std::vector<std::size_t> assignments;
  double inertia = 0.0;           // sum of squared distances to assigned centers
  std::vector<double> inertia_history;  // after seeding, then after each Lloyd step (winning restart)
  std::size_t iterations = 0;
  bool converged = false;         // assignments reached a fixed point
  bool reduce_k = false;          // fewer distinct points than K; K was lowered
  std::size_t restart = 0;        // index of the winning restart
};

/// Index of the nearest row of `centers`; ties go to the lowest index.
std::size_t nearest_center(const Vector& h, const Matrix& centers);

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, const KMeansOptions& opts = {});

/// Inertia of the best run for every K in [1, k_max].
std::vector<double> kmeans_sweep(const Matrix& points, std::size_t k_max, std::uint64_t seed,
                                 const KMeansOptions& opts = {});

struct BasinPartition {
  std::size_t k = 1;
  std::size_t k_requested = 1;
  Matrix centers;           // [K, d]; the single global mean when collapsed
  Vector mu_ref;            // mean of all hallucinated states
  double sigma2 = 0.0;      // within_var / d
  double within_var = 0.0;  // mean squared distance to the assigned center
  double total_var = 0.0;   // mean squared distance to mu_ref
  double tau = 0.9;
  bool collapsed = false;
  std::vector<std::size_t> assignments;
  double inertia = 0.0;
  bool reduce_k = false;
};

BasinPartition partition_hallucinations(const Matrix& hall, std::size_t k, double tau, std::uint64_t seed,
                                        const KMeansOptions& opts = {});

/// softmax_k(-||h - mu_k||^2 / (2 sigma2)); one-hot at the nearest center when sigma2 == 0.
Vector basin_posterior(const Vector& h, const Matrix& centers, double sigma2);
Vector basin_posterior(const Vector& h, const BasinPartition& partition);

struct BasinClassifier {
  Standardizer standardizer;
  std::vector<LogisticModel> models;  // one-vs-rest, one per basin
  std::vector<double> holdout_accuracy;  // per basin, on the held-out fifth
  double overall_accuracy = 0.0;
  double chance = 0.0;                   // 1/K
  double chance_margin = 0.0;            // 2 standard errors at chance
  bool near_chance = false;
  std::size_t n_train = 0, n_holdout = 0;

  std::size_t predict(const Vector& h) const;
};

/// Holds out every fifth sample of each basin (by position) for accuracy.
BasinClassifier fit_basin_classifier(const Matrix& hall, const std::vector<std::size_t>& assignments,
                                     const LogisticOptions& opts = {});

}  // namespace hbasin
