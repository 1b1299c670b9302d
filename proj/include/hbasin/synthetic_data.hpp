#pragma once

// Synthetic trajectory bundles with known geometry and ground truth.
//
// Every sample starts from a shared embedding distribution around mu_ref and
// contracts geometrically toward a class-specific target:
//   h(l) = target + c^l (h(0) - target),   h(0) = mu_ref + s_emb * xi.
// Targets are built in an orthonormal frame [e_sep | signal | hall | rest]:
//   factoid        factual targets mu_ref + sep e_sep + one of |A| answer
//                  codes in d_signal = floor(log2(|A| + 1)) signal axes with
//                  per-axis variance sigma_sig^2; hallucinated targets
//                  mu_ref + N(0, sigma_0^2) on d_hall axes.
//   generation     both classes share one dispersed target law.
//   misconception  factual as in factoid; hallucinated targets drawn around K
//                  cluster centers at mutual distance cluster_distance.
// Optional nuisance variance (shared by both classes, uncontracted) can be put
// on the rest axes. With the defaults the rest axes carry no variance at all,
// so a fitted probe puts exactly zero weight on them.

#include <cstdint>
#include <string>
#include <vector>

#include "hbasin/common.hpp"
#include "hbasin/traj_store.hpp"

namespace hbasin {

enum class TaskKind { kFactoid, kGeneration, kMisconception };
std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& s);

struct SyntheticConfig {
  TaskKind kind = TaskKind::kFactoid;
  std::size_t n = 4000;
  std::size_t n_layers = 12;
  std::size_t dim = 32;
  double hall_fraction = 0.5;
  std::size_t answer_modes = 8;  // |A|
  double sigma_sig = 1.0;
  double sigma_0 = 0.1;
  std::size_t d_hall = 2;
  double separation = 10.0;      // distance of the factual mean from mu_ref
  double contraction = 0.5;      // c
  double embed_scale = 1.0;      // s_emb
  double nuisance_sigma = 0.0;   // per-axis std on the rest axes, both classes
  double generation_sigma = 1.0; // per-axis target std in generation mode
  std::size_t clusters = 3;
  double cluster_distance = 20.0;
  double cluster_sigma = 1.0;    // per-axis std around each cluster center
  bool attn_entropy = false;
  std::size_t attn_tokens = 16;  // entropies are on the scale of ln(attn_tokens)
  double basin_radius = 0.0;     // 0 = 3 sigma_0 sqrt(d_hall)
  bool random_frame = false;       // false = the frame is the identity (axis-aligned)
  bool shared_noise_axes = true;   // factoid hallucination noise starts at the first signal axis
  bool embed_active_only = true;   // embedding noise only on e_sep, signal and hall axes
  std::uint64_t seed = 42;
  std::string model_id = "synthetic";
};

struct SyntheticTruth {
  Matrix frame;          // [d, d] orthonormal axes, column 0 = e_sep
  Vector mu_ref;
  Vector mu_fact;        // population mean of factual targets
  Vector mu_hall;        // population mean of hallucinated targets
  std::size_t d_signal = 0;
  double expected_rho_var = 0.0;  // of the targets, i.e. at late layers
  double closed_form_rho_var = 0.0;  // d_signal sigma_sig^2 / (d_hall sigma_0^2)
  double basin_radius = 0.0;
  std::vector<int> entry_layer;   // first layer with ||h - mu_ref|| <= basin_radius, -1 never
  std::vector<std::size_t> cluster;  // misconception: generating cluster of each hallucinated sample
  Matrix cluster_centers;            // [K, d]
  double cluster_spread = 0.0;       // RMS distance to the own center, cluster_sigma sqrt(d)
};

struct SyntheticBundle {
  TrajectoryBundle bundle;
  SyntheticTruth truth;
};

/// Throws BasinError("infeasible dims ...") when the frame does not fit in d.
SyntheticBundle make_synthetic_bundle(const SyntheticConfig& config);

/// Uninformative-context trajectories for the same geometry: every sample
/// contracts toward mu_ref + N(0, sigma_0^2) on the hall axes. Labels are 0.
TrajectoryBundle make_context_bundle(const SyntheticConfig& config, std::size_t n_contexts);

std::size_t signal_dimension(std::size_t answer_modes);

}  // namespace hbasin
