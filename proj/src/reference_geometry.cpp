#include "hbasin/reference_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hbasin {

namespace {

void require_layer(const ReferenceState& ref, std::size_t layer) {
  if (layer >= ref.layer_count())
    throw BasinError("layer " + std::to_string(layer) + " outside reference (" +
                     std::to_string(ref.layer_count()) + " layers)");
}

double distance_to(std::span<const float> row, const Vector& mu) {
  double acc = 0.0;
  for (std::size_t k = 0; k < row.size(); ++k) {
    const double diff = static_cast<double>(row[k]) - mu[static_cast<Eigen::Index>(k)];
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

void check_dims(const TrajectoryBundle& b, const ReferenceState& ref) {
  if (b.dim != ref.dim()) throw BasinError("dimension mismatch between bundle and reference");
  if (b.layer_count() > ref.layer_count()) throw BasinError("bundle has more layers than the reference");
}

}  // namespace

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw BasinError("quantile of empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

ReferenceState build_reference(const TrajectoryBundle& ctx, const ReferenceOptions& opts) {
  std::vector<std::size_t> all(ctx.n_samples);
  std::iota(all.begin(), all.end(), std::size_t{0});
  return build_reference(ctx, all, opts);
}

ReferenceState build_reference(const TrajectoryBundle& ctx, std::span<const std::size_t> samples,
                               const ReferenceOptions& opts) {
  if (samples.size() < 2) throw BasinError("reference needs at least 2 context samples");
  ReferenceState ref;
  ref.n_contexts = samples.size();
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  for (std::size_t l = 0; l < ctx.layer_count(); ++l) {
    const Matrix x = gather_rows(ctx, l, samples);
    Vector mu = x.colwise().sum().transpose() * inv_n;
    std::vector<double> dist(samples.size());
    double sq = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      dist[static_cast<std::size_t>(i)] = (x.row(i).transpose() - mu).norm();
      sq += dist[static_cast<std::size_t>(i)] * dist[static_cast<std::size_t>(i)];
    }
    ref.sigma_ctx.push_back(std::sqrt(sq * inv_n));
    ref.radius.push_back(std::max(quantile(std::move(dist), opts.radius_quantile), opts.radius_floor));
    ref.mu.push_back(std::move(mu));
  }
  return ref;
}

double radial_distance(const Vector& h, const ReferenceState& ref, std::size_t layer) {
  require_layer(ref, layer);
  if (h.size() != ref.mu[layer].size()) throw BasinError("dimension mismatch in radial_distance");
  return (h - ref.mu[layer]).norm();
}

double radial_distance(const TrajectoryBundle& b, std::size_t sample, const ReferenceState& ref,
                       std::size_t layer) {
  require_layer(ref, layer);
  if (b.dim != ref.dim()) throw BasinError("dimension mismatch in radial_distance");
  return distance_to(b.row(sample, layer), ref.mu[layer]);
}

double local_contraction_ratio(const TrajectoryBundle& b, std::size_t sample, const ReferenceState& ref,
                               std::size_t layer, double eps) {
  if (layer >= b.n_layers) return 1.0;
  return radial_distance(b, sample, ref, layer + 1) / (radial_distance(b, sample, ref, layer) + eps);
}

TrappingReport trapping_stats(const TrajectoryBundle& bundle, const ReferenceState& ref, double eps) {
  check_dims(bundle, ref);
  TrappingReport report;
  report.entry_layer.assign(bundle.n_samples, -1);
  const std::size_t n_layers = bundle.n_layers;
  for (auto* c : {&report.fact, &report.hall}) c->mean_kappa.assign(n_layers, 0.0);

  std::vector<double> radial(bundle.layer_count());
  for (std::size_t i = 0; i < bundle.n_samples; ++i) {
    ClassTrapping& cls = bundle.labels[i] == kHallucinated ? report.hall : report.fact;
    ++cls.n;
    for (std::size_t l = 0; l < bundle.layer_count(); ++l) radial[l] = distance_to(bundle.row(i, l), ref.mu[l]);
    for (std::size_t l = 0; l < n_layers; ++l) cls.mean_kappa[l] += radial[l + 1] / (radial[l] + eps);

    int first = -1;
    for (std::size_t l = 0; l < bundle.layer_count(); ++l) {
      if (radial[l] <= ref.radius[l]) {
        first = static_cast<int>(l);
        break;
      }
    }
    report.entry_layer[i] = first;
    if (first < 0) continue;
    ++cls.entered;
    bool stays = true;
    for (auto l = static_cast<std::size_t>(first); l < bundle.layer_count(); ++l)
      if (radial[l] > ref.radius[l]) {
        stays = false;
        break;
      }
    if (stays) ++cls.stayed;
  }

  for (auto* c : {&report.fact, &report.hall}) {
    if (c->n > 0) {
      c->entry_rate = static_cast<double>(c->entered) / static_cast<double>(c->n);
      for (auto& k : c->mean_kappa) k /= static_cast<double>(c->n);
    }
    if (c->entered > 0) {
      c->irreversibility = static_cast<double>(c->stayed) / static_cast<double>(c->entered);
      c->escape_rate = static_cast<double>(c->entered - c->stayed) / static_cast<double>(c->entered);
    }
  }
  return report;
}

FixedPointResidual fixed_point_residual(const TrajectoryBundle& ctx, const ReferenceState& ref, double threshold) {
  check_dims(ctx, ref);
  if (ctx.n_layers < 1) throw BasinError("fixed-point residual needs at least one layer transition");
  if (ctx.n_samples == 0) throw BasinError("fixed-point residual needs context samples");
  FixedPointResidual out;
  out.threshold = threshold;
  for (std::size_t l = 0; l < ctx.n_layers; ++l) {
    const Matrix next = layer_slice(ctx, l + 1);
    const Vector mean_next = next.colwise().mean().transpose();
    const double residual = (mean_next - ref.mu[l]).norm();
    const double drift = (mean_next - ref.mu[0]).norm();
    const double sigma = ref.sigma_ctx[l];
    const bool absolute = !(sigma > 0.0);
    out.residual.push_back(residual);
    out.absolute.push_back(absolute);
    out.ratio.push_back(absolute ? residual : residual / sigma);
    out.drift_from_start.push_back(absolute ? drift : drift / sigma);
    out.non_fixed_point.push_back(out.ratio.back() > threshold);
  }
  return out;
}

EntropyStats attention_entropy_stats(const TrajectoryBundle& bundle) {
  if (!bundle.attn_entropy) throw BasinError("bundle has no attention entropy field");
  const std::size_t n_layers = bundle.n_layers;
  EntropyStats s;
  s.mean_fact.assign(n_layers, 0.0);
  s.mean_hall.assign(n_layers, 0.0);
  s.std_fact.assign(n_layers, 0.0);
  s.std_hall.assign(n_layers, 0.0);
  s.n_fact = bundle.count(kFactual);
  s.n_hall = bundle.count(kHallucinated);
  const auto& h = *bundle.attn_entropy;
  for (std::size_t i = 0; i < bundle.n_samples; ++i) {
    auto& mean = bundle.labels[i] == kHallucinated ? s.mean_hall : s.mean_fact;
    for (std::size_t l = 0; l < n_layers; ++l) mean[l] += h[i * n_layers + l];
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (s.n_fact) s.mean_fact[l] /= static_cast<double>(s.n_fact);
    if (s.n_hall) s.mean_hall[l] /= static_cast<double>(s.n_hall);
  }
  for (std::size_t i = 0; i < bundle.n_samples; ++i) {
    const bool hall = bundle.labels[i] == kHallucinated;
    auto& var = hall ? s.std_hall : s.std_fact;
    const auto& mean = hall ? s.mean_hall : s.mean_fact;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const double d = h[i * n_layers + l] - mean[l];
      var[l] += d * d;
    }
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (s.n_fact) s.std_fact[l] = std::sqrt(s.std_fact[l] / static_cast<double>(s.n_fact));
    if (s.n_hall) s.std_hall[l] = std::sqrt(s.std_hall[l] / static_cast<double>(s.n_hall));
  }
  return s;
}

}  // namespace hbasin
