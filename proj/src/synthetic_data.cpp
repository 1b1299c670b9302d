#include "hbasin/synthetic_data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "hbasin/rng.hpp"
#include "hbasin/synthetic_dynamics.hpp"

namespace hbasin {

namespace {

struct Frame {
  Matrix q;
  std::size_t d_signal = 0;
  std::size_t first_signal = 1, first_hall = 0, first_rest = 0;
};

Frame make_frame(const SyntheticConfig& c, Rng& rng) {
  Frame f;
  f.d_signal = signal_dimension(c.answer_modes);
  const std::size_t hall_axes = c.kind == TaskKind::kMisconception ? c.clusters : c.d_hall;
  f.first_hall = 1 + f.d_signal;
  f.first_rest = f.first_hall + hall_axes;
  if (c.shared_noise_axes && c.kind == TaskKind::kFactoid) {
    f.first_hall = f.first_signal;
    f.first_rest = 1 + std::max(f.d_signal, c.d_hall);
  }
  if (c.kind != TaskKind::kGeneration && f.first_rest > c.dim)
    throw BasinError("infeasible dims: 1 + d_signal + " + std::to_string(hall_axes) + " axes exceed d = " +
                     std::to_string(c.dim));
  f.q = random_orthogonal(c.dim, rng);
  if (!c.random_frame) f.q = Matrix::Identity(c.dim, c.dim);
  return f;
}

// Centered answer codes scaled so the mean squared norm is d_signal sigma_sig^2.
Matrix answer_codes(std::size_t modes, std::size_t d_signal, double sigma_sig) {
  Matrix codes(modes, d_signal);
  for (std::size_t m = 0; m < modes; ++m)
    for (std::size_t j = 0; j < d_signal; ++j) codes(m, j) = ((m >> j) & 1U) ? 1.0 : -1.0;
  codes.rowwise() -= codes.colwise().mean();
  const double ms = codes.rowwise().squaredNorm().mean();
  if (ms > 0.0) codes *= std::sqrt(static_cast<double>(d_signal) / ms) * sigma_sig;
  return codes;
}

void validate_config(const SyntheticConfig& c) {
  if (c.n < 4 || c.dim == 0 || c.n_layers == 0) throw BasinError("synthetic: need n >= 4, d >= 1, L >= 1");
  if (!(c.hall_fraction > 0.0 && c.hall_fraction < 1.0)) throw BasinError("synthetic: hall_fraction must be in (0,1)");
  if (c.answer_modes == 0) throw BasinError("synthetic: |A| must be at least 1");
  if (!(c.sigma_sig > 0.0) || !(c.sigma_0 > 0.0)) throw BasinError("synthetic: sigma_sig and sigma_0 must be positive");
  if (c.d_hall == 0) throw BasinError("synthetic: d_hall must be positive");
  if (!(c.contraction >= 0.0 && c.contraction < 1.0)) throw BasinError("synthetic: contraction must be in [0,1)");
  if (c.kind == TaskKind::kMisconception && c.clusters < 1) throw BasinError("synthetic: need at least one cluster");
}

Labels shuffled_labels(std::size_t n, double hall_fraction, Rng& rng) {
  auto n_hall = static_cast<std::size_t>(std::llround(hall_fraction * static_cast<double>(n)));
  n_hall = std::clamp<std::size_t>(n_hall, 2, n - 2);
  Labels labels(n, kFactual);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_hall), kHallucinated);
  shuffle_in_place(labels, rng);
  return labels;
}

Vector embedding_noise(const Frame& fr, const SyntheticConfig& c, Rng& rng) {
  if (!c.embed_active_only || c.kind == TaskKind::kGeneration) return gaussian_vector(c.dim, rng);
  Vector v = Vector::Zero(c.dim);
  for (std::size_t j = 0; j < std::min(fr.first_rest, c.dim); ++j) v += standard_normal(rng) * fr.q.col(j);
  return v;
}

void fill_trajectory(TrajectoryBundle& b, std::size_t i, const Vector& start, const Vector& target, double c,
                     const Vector& persistent) {
  double factor = 1.0;
  for (std::size_t l = 0; l < b.layer_count(); ++l) {
    const Vector h = target + factor * (start - target) + persistent;
    auto row = b.row(i, l);
    for (std::size_t j = 0; j < b.dim; ++j) row[j] = static_cast<float>(h[j]);
    factor *= c;
  }
}

}  // namespace

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kFactoid: return "factoid";
    case TaskKind::kGeneration: return "generation";
    case TaskKind::kMisconception: return "misconception";
  }
  return "unknown";
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "factoid") return TaskKind::kFactoid;
  if (s == "generation") return TaskKind::kGeneration;
  if (s == "misconception") return TaskKind::kMisconception;
  throw BasinError("unknown task kind: " + s);
}

std::size_t signal_dimension(std::size_t answer_modes) {
  return static_cast<std::size_t>(std::bit_width(answer_modes + 1) - 1);  // floor(log2(|A|+1))
}

SyntheticBundle make_synthetic_bundle(const SyntheticConfig& c) {
  validate_config(c);
  Rng rng(derive_seed(c.seed, {stream::kSynthetic, 1}));
  const Frame fr = make_frame(c, rng);
  const std::size_t d = c.dim;
  const std::size_t d_rest = d > fr.first_rest ? d - fr.first_rest : 0;

  SyntheticBundle out;
  SyntheticTruth& t = out.truth;
  t.frame = fr.q;
  t.d_signal = fr.d_signal;
  t.mu_ref = gaussian_vector(d, rng);
  t.basin_radius = c.basin_radius > 0.0 ? c.basin_radius : 3.0 * c.sigma_0 * std::sqrt(static_cast<double>(c.d_hall));
  t.closed_form_rho_var = static_cast<double>(fr.d_signal) * c.sigma_sig * c.sigma_sig /
                          (static_cast<double>(c.d_hall) * c.sigma_0 * c.sigma_0);

  const Vector e_sep = fr.q.col(0);
  const Matrix codes = answer_codes(c.answer_modes, fr.d_signal, c.sigma_sig);
  const double nuis_var = static_cast<double>(d_rest) * c.nuisance_sigma * c.nuisance_sigma;
  const double fact_var = codes.rowwise().squaredNorm().mean() + nuis_var;
  double hall_var = static_cast<double>(c.d_hall) * c.sigma_0 * c.sigma_0 + nuis_var;

  t.mu_fact = t.mu_ref + c.separation * e_sep;
  t.mu_hall = t.mu_ref;
  if (c.kind == TaskKind::kMisconception) {
    const std::size_t k = c.clusters;
    t.cluster_centers.resize(k, d);
    for (std::size_t j = 0; j < k; ++j)
      t.cluster_centers.row(j) = (t.mu_ref + (c.cluster_distance / std::sqrt(2.0)) * fr.q.col(fr.first_hall + j)).transpose();
    t.mu_hall = t.cluster_centers.colwise().mean().transpose();
    t.cluster_spread = c.cluster_sigma * std::sqrt(static_cast<double>(d));
    const double between = (t.cluster_centers.rowwise() - t.mu_hall.transpose()).rowwise().squaredNorm().mean();
    hall_var = between + t.cluster_spread * t.cluster_spread;
  }
  if (c.kind == TaskKind::kGeneration) {
    t.mu_fact = t.mu_ref;
    t.expected_rho_var = 1.0;
  } else {
    t.expected_rho_var = fact_var / hall_var;
  }

  TrajectoryBundle& b = out.bundle;
  b = TrajectoryBundle::zeros(c.n, c.n_layers, d);
  b.model_id = c.model_id;
  b.dataset_id = "synthetic-" + to_string(c.kind);
  b.labels = shuffled_labels(c.n, c.hall_fraction, rng);
  t.entry_layer.assign(c.n, -1);
  if (c.attn_entropy) b.attn_entropy = std::vector<float>(c.n * c.n_layers, 0.0f);

  std::size_t fact_seen = 0, hall_seen = 0;
  for (std::size_t i = 0; i < c.n; ++i) {
    const bool hall = b.labels[i] == kHallucinated;
    const Vector start = t.mu_ref + c.embed_scale * embedding_noise(fr, c, rng);
    Vector target = t.mu_ref;
    if (c.kind == TaskKind::kGeneration) {
      target += c.generation_sigma * gaussian_vector(d, rng);
    } else if (!hall) {
      target = t.mu_fact;
      const std::size_t mode = fact_seen++ % c.answer_modes;
      for (std::size_t j = 0; j < fr.d_signal; ++j) target += codes(mode, j) * fr.q.col(fr.first_signal + j);
    } else if (c.kind == TaskKind::kFactoid) {
      for (std::size_t j = 0; j < c.d_hall; ++j) target += c.sigma_0 * standard_normal(rng) * fr.q.col(fr.first_hall + j);
    } else {
      const std::size_t k = hall_seen++ % c.clusters;
      t.cluster.push_back(k);
      target = t.cluster_centers.row(k).transpose() + c.cluster_sigma * gaussian_vector(d, rng);
    }
    Vector persistent = Vector::Zero(d);
    if (c.nuisance_sigma > 0.0 && c.kind != TaskKind::kGeneration)
      for (std::size_t j = fr.first_rest; j < d; ++j) persistent += c.nuisance_sigma * standard_normal(rng) * fr.q.col(j);
    fill_trajectory(b, i, start, target, c.contraction, persistent);

    for (std::size_t l = 0; l < b.layer_count(); ++l) {
      if ((b.state(i, l) - t.mu_ref).norm() <= t.basin_radius) {
        t.entry_layer[i] = static_cast<int>(l);
        break;
      }
    }
    if (b.attn_entropy) {
      const double h_max = std::log(static_cast<double>(c.attn_tokens));
      for (std::size_t l = 1; l <= c.n_layers; ++l) {
        const double frac = static_cast<double>(l) / static_cast<double>(c.n_layers);
        const double base = hall ? h_max * (0.9 + 0.08 * frac) : h_max * 0.6;
        const double v = std::clamp(base + 0.05 * h_max * standard_normal(rng), 0.0, h_max);
        (*b.attn_entropy)[i * c.n_layers + (l - 1)] = static_cast<float>(v);
      }
    }
  }
  b.validate();
  return out;
}

TrajectoryBundle make_context_bundle(const SyntheticConfig& c, std::size_t n_contexts) {
  validate_config(c);
  if (n_contexts < 2) throw BasinError("synthetic: need at least two contexts");
  Rng frame_rng(derive_seed(c.seed, {stream::kSynthetic, 1}));
  const Frame fr = make_frame(c, frame_rng);
  const Vector mu_ref = gaussian_vector(c.dim, frame_rng);  // same draw order as make_synthetic_bundle

  Rng rng(derive_seed(c.seed, {stream::kSynthetic, 2}));
  TrajectoryBundle b = TrajectoryBundle::zeros(n_contexts, c.n_layers, c.dim);
  b.model_id = c.model_id;
  b.dataset_id = "synthetic-context";
  const std::size_t axes = c.kind == TaskKind::kMisconception ? 0 : c.d_hall;
  for (std::size_t i = 0; i < n_contexts; ++i) {
    const Vector start = mu_ref + c.embed_scale * embedding_noise(fr, c, rng);
    Vector target = mu_ref;
    for (std::size_t j = 0; j < axes; ++j) target += c.sigma_0 * standard_normal(rng) * fr.q.col(fr.first_hall + j);
    fill_trajectory(b, i, start, target, c.contraction, Vector::Zero(c.dim));
  }
  b.validate();
  return b;
}

}  // namespace hbasin
