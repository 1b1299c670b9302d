#pragma once

// Reference states built from uninformative-context trajectories, and the
// radial statistics measured against them: radial distance, local
// contraction ratio, basin trapping rates, fixed-point residuals.

#include <optional>
#include <vector>

#include "hbasin/common.hpp"
#include "hbasin/traj_store.hpp"

namespace hbasin {

inline constexpr double kContractionEps = 1e-8;
inline constexpr double kRadiusQuantile = 0.95;
inline constexpr double kRadiusFloor = 1e-6;

struct ReferenceState {
  std::vector<Vector> mu;          // per layer 0..L
  std::vector<double> sigma_ctx;   // RMS distance of reference samples to mu
  std::vector<double> radius;      // basin radius per layer
  std::size_t n_contexts = 0;

  std::size_t layer_count() const { return mu.size(); }
  std::size_t dim() const { return mu.empty() ? 0 : static_cast<std::size_t>(mu.front().size()); }
};

struct ReferenceOptions {
  double radius_quantile = kRadiusQuantile;
  double radius_floor = kRadiusFloor;
};

/// Per-layer mean, RMS dispersion, and a radius equal to the requested
/// quantile (linear interpolation between order statistics) of the reference
/// samples' radial distances, floored at radius_floor. Labels are ignored.
ReferenceState build_reference(const TrajectoryBundle& ctx, const ReferenceOptions& opts = {});
/// Same, restricted to a subset of samples.
ReferenceState build_reference(const TrajectoryBundle& ctx, std::span<const std::size_t> samples,
                               const ReferenceOptions& opts = {});

/// Linearly interpolated quantile of an unsorted sample (q in [0,1]).
double quantile(std::vector<double> values, double q);

double radial_distance(const Vector& h, const ReferenceState& ref, std::size_t layer);
double radial_distance(const TrajectoryBundle& b, std::size_t sample, const ReferenceState& ref, std::size_t layer);

/// kappa = ||h(l+1) - mu(l+1)|| / (||h(l) - mu(l)|| + eps). At the last layer
/// there is no successor and the ratio is defined as 1.
double local_contraction_ratio(const TrajectoryBundle& b, std::size_t sample, const ReferenceState& ref,
                               std::size_t layer, double eps = kContractionEps);

struct ClassTrapping {
  std::size_t n = 0;
  std::size_t entered = 0;   // inside the basin at some layer
  std::size_t stayed = 0;    // entered and never left afterwards
  double entry_rate = 0.0;
  double irreversibility = 0.0;  // stayed / entered, 0 when nothing entered
  double escape_rate = 0.0;      // 1 - irreversibility when entered > 0
  std::vector<double> mean_kappa;  // per layer 0..L-1
};

struct TrappingReport {
  ClassTrapping fact;
  ClassTrapping hall;
  /// First layer at which each sample is inside its basin, -1 if never.
  std::vector<int> entry_layer;
};

TrappingReport trapping_stats(const TrajectoryBundle& bundle, const ReferenceState& ref,
                              double eps = kContractionEps);

struct FixedPointResidual {
  // One entry per layer transition l -> l+1, l = 0..L-1.
  std::vector<double> residual;          // ||mean_ctx h(l+1) - mu(l)||
  std::vector<double> ratio;             // residual / sigma_ctx(l); absolute residual when sigma is 0
  std::vector<bool> absolute;            // sigma_ctx(l) == 0, ratio holds the absolute residual
  std::vector<double> drift_from_start;  // ||mean_ctx h(l+1) - mu(0)|| / sigma_ctx(l+1)
  std::vector<bool> non_fixed_point;     // ratio above threshold
  double threshold = 1.5;
};

/// Empirical fixed-point check of the reference: how far the mean context
/// state moves across each layer, in units of the reference dispersion.
FixedPointResidual fixed_point_residual(const TrajectoryBundle& ctx, const ReferenceState& ref,
                                        double threshold = 1.5);

struct EntropyStats {
  // Indexed [layer] for layers 1..L (stored at index l-1).
  std::vector<double> mean_fact, std_fact, mean_hall, std_hall;
  std::size_t n_fact = 0, n_hall = 0;
};

EntropyStats attention_entropy_stats(const TrajectoryBundle& bundle);

}  // namespace hbasin
