#include "hbasin/detection.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <string>

#include "hbasin/parallel.hpp"
#include "hbasin/reference_geometry.hpp"
#include "hbasin/rng.hpp"

namespace hbasin {

namespace {

// log(1 + exp(-m)) without overflow.
double softplus_neg(double m) {
  return m > 0.0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
}

void check_training_data(const Matrix& x, const Labels& y) {
  if (static_cast<std::size_t>(x.rows()) != y.size()) throw BasinError("fit_logistic: row/label count mismatch");
  if (!x.allFinite()) throw BasinError("fit_logistic: non-finite features");
  bool has0 = false, has1 = false;
  for (auto v : y) {
    if (v > 1) throw BasinError("fit_logistic: labels must be 0 or 1");
    (v ? has1 : has0) = true;
  }
  if (!has0 || !has1) throw BasinError("fit_logistic: single class");
}

// Relative slack on f accepted by the approximate Wolfe test.
constexpr double kObjectiveSlack = 1e-12;

struct Objective {
  const Matrix& x;
  const Labels& y;
  double l2;

  // theta = [w; b]
  double value(const Vector& theta) const {
    const auto d = x.cols();
    const Vector z = x * theta.head(d);
    // Neumaier summation keeps the rounding noise of f near one ulp.
    double f = 0.5 * l2 * theta.head(d).squaredNorm(), c = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double yt = y[i] ? 1.0 : -1.0;
      const double v = softplus_neg(yt * (z[i] + theta[d]));
      const double t = f + v;
      c += std::abs(f) >= std::abs(v) ? (f - t) + v : (v - t) + f;
      f = t;
    }
    return f + c;
  }

  Vector gradient(const Vector& theta) const {
    const auto d = x.cols();
    const Vector z = x * theta.head(d);
    Vector coef(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double yt = y[i] ? 1.0 : -1.0;
      coef[i] = -yt * sigmoid(-yt * (z[i] + theta[d]));
    }
    Vector g(d + 1);
    g.head(d) = x.transpose() * coef + l2 * theta.head(d);
    g[d] = coef.sum();
    return g;
  }
};

}  // namespace

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Standardizer Standardizer::fit(const Matrix& x) {
  if (x.rows() == 0) throw BasinError("standardizer: empty input");
  Standardizer s;
  s.mean = x.colwise().mean().transpose();
  const Matrix xc = x.rowwise() - s.mean.transpose();
  s.scale = (xc.array().square().colwise().sum() / static_cast<double>(x.rows())).sqrt().transpose();
  s.scale = s.scale.cwiseMax(kStdFloor);
  // A constant column keeps its exact value as the mean so it standardizes to 0.
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    if (x.col(j).minCoeff() == x.col(j).maxCoeff()) s.mean[j] = x(0, j);
  return s;
}

Matrix Standardizer::transform(const Matrix& x) const {
  return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
}

Vector Standardizer::transform(const Vector& x) const { return (x - mean).cwiseQuotient(scale); }

Matrix Standardizer::inverse_transform(const Matrix& z) const {
  return (z.array().rowwise() * scale.transpose().array()).matrix().rowwise() + mean.transpose();
}

double LogisticModel::probability(const Vector& x) const { return sigmoid(decision(x)); }

Vector LogisticModel::probabilities(const Matrix& x) const {
  Vector z = x * w;
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = sigmoid(z[i] + b);
  return z;
}

double logistic_objective(const Matrix& x, const Labels& y, const Vector& w, double b, double l2) {
  Vector theta(w.size() + 1);
  theta << w, b;
  return Objective{x, y, l2}.value(theta);
}

Vector logistic_gradient(const Matrix& x, const Labels& y, const Vector& w, double b, double l2) {
  Vector theta(w.size() + 1);
  theta << w, b;
  return Objective{x, y, l2}.gradient(theta);
}

LogisticModel fit_logistic(const Matrix& x, const Labels& y, const LogisticOptions& opts) {
  check_training_data(x, y);
  if (!(opts.l2 >= 0.0) || opts.max_iter < 0 || opts.history < 1) throw BasinError("fit_logistic: bad options");
  const Objective obj{x, y, opts.l2};
  const auto d = x.cols();

  Vector theta = Vector::Zero(d + 1);
  double f = obj.value(theta);
  Vector g = obj.gradient(theta);

  LogisticModel model;
  model.l2 = opts.l2;
  model.tol = opts.tol;
  model.max_iter = opts.max_iter;
  model.objective_trace.push_back(f);

  std::deque<Vector> s_hist, y_hist;
  std::deque<double> rho_hist;
  int iter = 0;
  while (iter < opts.max_iter && g.norm() >= opts.tol) {
    // Two-loop recursion.
    Vector q = g;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t k = s_hist.size(); k-- > 0;) {
      alpha[k] = rho_hist[k] * s_hist[k].dot(q);
      q -= alpha[k] * y_hist[k];
    }
    if (!s_hist.empty()) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t k = 0; k < s_hist.size(); ++k) {
      const double beta = rho_hist[k] * y_hist[k].dot(q);
      q += (alpha[k] - beta) * s_hist[k];
    }
    Vector dir = -q;
    double gd = g.dot(dir);
    if (!(gd < 0.0)) {
      dir = -g;
      gd = -g.squaredNorm();
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }

    double t = s_hist.empty() ? std::min(1.0, 1.0 / g.norm()) : 1.0;
    bool accepted = false;
    Vector theta_new, g_new;
    double f_new = f;
    for (int bt = 0; bt < 60; ++bt) {
      theta_new = theta + t * dir;
      f_new = obj.value(theta_new);
      const double armijo = f + 1e-4 * t * gd;
      if (armijo < f && f_new <= armijo) {
        g_new = obj.gradient(theta_new);
        accepted = true;
        break;
      }
      // Approximate Wolfe test for when the decrease is below the rounding of f.
      if (f_new <= f + kObjectiveSlack * std::abs(f)) {
        g_new = obj.gradient(theta_new);
        const double gd_new = g_new.dot(dir);
        if (gd_new >= 0.9 * gd && gd_new <= (2.0 * 1e-4 - 1.0) * gd) {
          accepted = true;
          break;
        }
      }
      t *= 0.5;
    }
    if (!accepted) {
      // Near the optimum the Armijo test is below rounding; take the step
      // only if it does not increase the objective and shrinks the gradient.
      theta_new = theta + t * dir;
      f_new = obj.value(theta_new);
      g_new = obj.gradient(theta_new);
      if (!(f_new <= f && g_new.norm() < g.norm())) break;
    }
    ++iter;
    const Vector s = theta_new - theta;
    const Vector yv = g_new - g;
    const double sy = s.dot(yv);
    theta = std::move(theta_new);
    f = f_new;
    g = std::move(g_new);
    model.objective_trace.push_back(f);
    if (sy > 1e-300) {
      s_hist.push_back(s);
      y_hist.push_back(yv);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opts.history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
  }
  model.w = theta.head(d);
  model.b = theta[d];
  model.iterations = iter;
  model.grad_norm = g.norm();
  model.converged = model.grad_norm < opts.tol;
  return model;
}

LinearProbe train_probe(const Matrix& x, const Labels& y, const LogisticOptions& opts) {
  const Standardizer st = Standardizer::fit(x);
  const LogisticModel m = fit_logistic(st.transform(x), y, opts);
  LinearProbe p;
  p.w = m.w.cwiseQuotient(st.scale);
  p.b = m.b - p.w.dot(st.mean);
  return p;
}

double centroid_score(const Vector& h, const Vector& mu_fact, const Vector& mu_hall, double eps) {
  if (h.size() != mu_fact.size() || h.size() != mu_hall.size()) throw BasinError("centroid_score: dimension mismatch");
  return (h - mu_fact).norm() / ((h - mu_hall).norm() + eps);
}

double auroc(std::span<const double> scores, const Labels& labels) {
  if (scores.size() != labels.size()) throw BasinError("auroc: score/label count mismatch");
  const std::size_t n = scores.size();
  std::uint64_t pos = 0;
  for (auto v : labels) {
    if (v > 1) throw BasinError("auroc: labels must be 0 or 1");
    pos += v;
  }
  const std::uint64_t neg = n - pos;
  if (pos == 0 || neg == 0) throw BasinError("auroc: single class");
  for (double s : scores)
    if (std::isnan(s)) throw BasinError("auroc: NaN score");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of doubled mid-ranks of the positives; every quantity stays integral.
  unsigned __int128 rank2 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    std::uint64_t tied_pos = 0;
    for (std::size_t k = i; k < j; ++k) tied_pos += labels[order[k]];
    rank2 += static_cast<unsigned __int128>(tied_pos) * (i + 1 + j);
    i = j;
  }
  const unsigned __int128 total = static_cast<unsigned __int128>(2) * pos * neg;
  const unsigned __int128 u2 = rank2 - static_cast<unsigned __int128>(pos) * (pos + 1);

  // Round the smaller tail to the 2^-53 grid so that complementing scores
  // yields exactly 1 - auroc.
  const bool upper = 2 * u2 > total;
  const unsigned __int128 a = upper ? total - u2 : u2;
  const unsigned __int128 scale = static_cast<unsigned __int128>(1) << 53;
  const unsigned __int128 k = (a * scale + total / 2) / total;
  const double small = std::ldexp(static_cast<double>(static_cast<std::uint64_t>(k)), -53);
  return upper ? 1.0 - small : small;
}

Interval bootstrap_ci(std::span<const double> scores, const Labels& labels, std::size_t n_boot, std::uint64_t seed) {
  if (n_boot == 0) throw BasinError("bootstrap_ci: n_boot must be positive");
  const auto pos = indices_with_label(labels, kHallucinated);
  const auto neg = indices_with_label(labels, kFactual);
  if (pos.empty() || neg.empty()) throw BasinError("bootstrap_ci: single class");

  Rng rng(seed);
  std::vector<double> values;
  values.reserve(n_boot);
  std::vector<double> s(scores.size());
  Labels l(scores.size());
  for (std::size_t b = 0; b < n_boot; ++b) {
    // Stratified resampling keeps both classes in every draw.
    std::size_t k = 0;
    for (std::size_t i = 0; i < pos.size(); ++i, ++k) {
      s[k] = scores[pos[uniform_index(rng, pos.size())]];
      l[k] = kHallucinated;
    }
    for (std::size_t i = 0; i < neg.size(); ++i, ++k) {
      s[k] = scores[neg[uniform_index(rng, neg.size())]];
      l[k] = kFactual;
    }
    values.push_back(auroc(s, l));
  }
  Interval ci;
  ci.low = quantile(values, 0.025);
  ci.high = quantile(values, 0.975);
  return ci;
}

double LayerDetector::centroid(const Vector& h, double eps) const {
  return centroid_score(standardizer.transform(h), fact.mean, hall.mean, eps);
}

double LayerDetector::mahalanobis_ratio(const Vector& h, double eps) const {
  const Vector z = standardizer.transform(h);
  return mahalanobis_sq(z, fact) / (mahalanobis_sq(z, hall) + eps);
}

LayerDetector fit_layer_detector(const TrajectoryBundle& bundle, std::size_t layer,
                                 std::span<const std::size_t> train_idx) {
  LayerDetector det;
  const Matrix train = gather_rows(bundle, layer, train_idx);
  det.standardizer = Standardizer::fit(train);
  const auto fi = indices_with_label(bundle.labels, kFactual, train_idx);
  const auto hi = indices_with_label(bundle.labels, kHallucinated, train_idx);
  det.fact = class_moments(det.standardizer.transform(gather_rows(bundle, layer, fi)), true);
  det.hall = class_moments(det.standardizer.transform(gather_rows(bundle, layer, hi)), true);
  return det;
}

DetectionResult evaluate_dataset(const TrajectoryBundle& bundle, const DetectionConfig& cfg) {
  if (cfg.splits == 0) throw BasinError("detect: splits must be positive");
  bundle.validate();
  const std::size_t n_layers = bundle.layer_count();

  std::vector<SplitIndex> splits;
  for (std::size_t s = 0; s < cfg.splits; ++s)
    splits.push_back(stratified_split(bundle.labels, cfg.train_fraction, cfg.seed + s));

  struct Cell {
    double auc_c = 0, auc_m = 0;
    Interval ci_c, ci_m;
  };
  std::vector<Cell> cells(cfg.splits * n_layers);
  parallel_for(cells.size(), cfg.threads, [&](std::size_t job) {
    const std::size_t s = job / n_layers;
    const std::size_t layer = job % n_layers;
    try {
      const SplitIndex& split = splits[s];
      const LayerDetector det = fit_layer_detector(bundle, layer, split.train_idx);
      const MahalanobisSolver mf(det.fact.mean, *det.fact.cov);
      const MahalanobisSolver mh(det.hall.mean, *det.hall.cov);
      std::vector<double> sc, sm;
      Labels lab;
      for (std::size_t i : split.test_idx) {
        const Vector z = det.standardizer.transform(bundle.state(i, layer));
        sc.push_back(centroid_score(z, det.fact.mean, det.hall.mean, cfg.eps));
        sm.push_back(mf.distance_sq(z) / (mh.distance_sq(z) + cfg.eps));
        lab.push_back(bundle.labels[i]);
      }
      Cell& c = cells[job];
      c.auc_c = auroc(sc, lab);
      c.auc_m = auroc(sm, lab);
      const std::uint64_t bseed = derive_seed(cfg.seed, {stream::kBootstrap, s, layer});
      c.ci_c = bootstrap_ci(sc, lab, cfg.n_boot, bseed);
      c.ci_m = bootstrap_ci(sm, lab, cfg.n_boot, bseed);
    } catch (const BasinError& e) {
      throw BasinError("layer " + std::to_string(layer) + ": " + e.what());
    }
  });

  DetectionResult res;
  res.config = cfg;
  res.n_samples = bundle.n_samples;
  const double k = static_cast<double>(cfg.splits);
  for (std::size_t layer = 0; layer < n_layers; ++layer) {
    LayerDetection row;
    row.layer = layer;
    double lc = 0, hc = 0, lm = 0, hm = 0;
    for (std::size_t s = 0; s < cfg.splits; ++s) {
      const Cell& c = cells[s * n_layers + layer];
      row.split_auroc_centroid.push_back(c.auc_c);
      row.split_auroc_maha.push_back(c.auc_m);
      row.auroc_centroid += c.auc_c;
      row.auroc_maha += c.auc_m;
      lc += c.ci_c.low;
      hc += c.ci_c.high;
      lm += c.ci_m.low;
      hm += c.ci_m.high;
    }
    row.auroc_centroid /= k;
    row.auroc_maha /= k;
    // Mean of per-split bounds, widened if needed to contain the split mean.
    row.ci_centroid = {std::min(lc / k, row.auroc_centroid), std::max(hc / k, row.auroc_centroid), false};
    row.ci_maha = {std::min(lm / k, row.auroc_maha), std::max(hm / k, row.auroc_maha), false};
    res.layers.push_back(std::move(row));
  }
  for (std::size_t layer = 1; layer < n_layers; ++layer)
    if (res.layers[layer].auroc_centroid > res.layers[res.best_layer].auroc_centroid) res.best_layer = layer;
  res.basin_exists = res.layers[res.best_layer].auroc_centroid >= cfg.theta;
  return res;
}

std::vector<SweepRow> layer_sweep_report(const DetectionResult& r) {
  if (r.layers.empty()) throw BasinError("layer_sweep_report: empty result");
  std::vector<SweepRow> rows;
  for (const auto& l : r.layers) {
    SweepRow row;
    row.layer = l.layer;
    row.auroc_centroid = l.auroc_centroid;
    row.ci_centroid_low = l.ci_centroid.low;
    row.ci_centroid_high = l.ci_centroid.high;
    row.auroc_maha = l.auroc_maha;
    row.ci_maha_low = l.ci_maha.low;
    row.ci_maha_high = l.ci_maha.high;
    row.n = r.n_samples;
    row.basin = r.basin_exists && l.layer == r.best_layer;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace hbasin
