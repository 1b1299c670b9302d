#include "hbasin/multi_basin.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "hbasin/parallel.hpp"
#include "hbasin/rng.hpp"

namespace hbasin {

namespace {

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t distinct_rows(const Matrix& x) {
  std::set<std::vector<double>> seen;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::vector<double> r(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) r[j] = x(i, j);
    seen.insert(std::move(r));
  }
  return seen.size();
}

double assign_all(const Matrix& x, const Matrix& centers, std::vector<std::size_t>& a) {
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    a[i] = nearest_center(x.row(i).transpose(), centers);
    inertia += (x.row(i) - centers.row(a[i])).squaredNorm();
  }
  return inertia;
}

KMeansResult lloyd_run(const Matrix& x, std::size_t k, std::uint64_t seed, std::size_t max_iter) {
  const auto n = static_cast<std::size_t>(x.rows());
  Rng rng(seed);
  Matrix centers(k, x.cols());

  // k-means++ seeding.
  centers.row(0) = x.row(static_cast<Eigen::Index>(uniform_index(rng, n)));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = (x.row(i) - centers.row(0)).squaredNorm();
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = uniform01(rng) * total;
      double acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(uniform_index(rng, n));
    }
    centers.row(c) = x.row(pick);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], (x.row(i) - centers.row(c)).squaredNorm());
  }

  KMeansResult r;
  r.assignments.assign(n, 0);
  double inertia = assign_all(x, centers, r.assignments);
  r.inertia_history.push_back(inertia);
  for (std::size_t it = 0; it < max_iter; ++it) {
    // Update step; an emptied cluster takes the point farthest from its center.
    Matrix sums = Matrix::Zero(k, x.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(r.assignments[i]) += x.row(i);
      ++counts[r.assignments[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        centers.row(c) = sums.row(c) / static_cast<double>(counts[c]);
      }
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = 0;
      double best = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[r.assignments[i]] <= 1) continue;
        const double dd = (x.row(i) - centers.row(r.assignments[i])).squaredNorm();
        if (dd > best) {
          best = dd;
          far = i;
        }
      }
      --counts[r.assignments[far]];
      r.assignments[far] = c;
      counts[c] = 1;
      centers.row(c) = x.row(far);
    }
    std::vector<std::size_t> next(n);
    const double next_inertia = assign_all(x, centers, next);
    r.inertia_history.push_back(next_inertia);
    inertia = next_inertia;
    r.iterations = it + 1;
    if (next == r.assignments) {
      r.converged = true;
      break;
    }
    r.assignments = std::move(next);
  }
  r.centers = std::move(centers);
  r.inertia = inertia;
  return r;
}

}  // namespace

std::size_t nearest_center(const Vector& h, const Matrix& centers) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    const double dd = (centers.row(c).transpose() - h).squaredNorm();
    if (dd < best_d) {
      best_d = dd;
      best = static_cast<std::size_t>(c);
    }
  }
  return best;
}

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, const KMeansOptions& opts) {
  if (k == 0) throw BasinError("kmeans: K must be positive");
  if (static_cast<std::size_t>(points.rows()) < k) throw BasinError("kmeans: fewer points than clusters");
  if (opts.restarts == 0) throw BasinError("kmeans: restarts must be positive");
  bool reduce = false;
  const std::size_t distinct = distinct_rows(points);
  if (distinct < k) {
    k = distinct;
    reduce = true;
  }
  std::vector<KMeansResult> runs(opts.restarts);
  parallel_for(opts.restarts, opts.threads, [&](std::size_t r) {
    runs[r] = lloyd_run(points, k, derive_seed(seed, {stream::kKmeans, k, r}), opts.max_iter);
    runs[r].restart = r;
  });
  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r)
    if (runs[r].inertia < runs[best].inertia) best = r;
  KMeansResult out = std::move(runs[best]);
  out.reduce_k = reduce;
  return out;
}

std::vector<double> kmeans_sweep(const Matrix& points, std::size_t k_max, std::uint64_t seed,
                                 const KMeansOptions& opts) {
  std::vector<double> out;
  for (std::size_t k = 1; k <= k_max; ++k) out.push_back(kmeans(points, k, seed, opts).inertia);
  return out;
}

BasinPartition partition_hallucinations(const Matrix& hall, std::size_t k, double tau, std::uint64_t seed,
                                        const KMeansOptions& opts) {
  if (static_cast<std::size_t>(hall.rows()) < std::max<std::size_t>(k, 2))
    throw BasinError("partition: need at least max(K, 2) hallucinated samples");
  BasinPartition p;
  p.k_requested = k;
  p.tau = tau;
  const double n = static_cast<double>(hall.rows());
  const double d = static_cast<double>(hall.cols());
  p.mu_ref = hall.colwise().mean().transpose();
  p.total_var = (hall.rowwise() - p.mu_ref.transpose()).rowwise().squaredNorm().sum() / n;

  const KMeansResult km = kmeans(hall, k, seed, opts);
  p.reduce_k = km.reduce_k;
  p.inertia = km.inertia;
  p.within_var = km.inertia / n;
  const bool no_gain = !(p.total_var > 0.0) || p.within_var / p.total_var >= tau;
  if (no_gain || km.centers.rows() < 2) {
    p.collapsed = true;
    p.k = 1;
    p.centers = p.mu_ref.transpose();
    p.within_var = p.total_var;
    p.assignments.assign(hall.rows(), 0);
  } else {
    p.k = static_cast<std::size_t>(km.centers.rows());
    p.centers = km.centers;
    p.assignments.resize(hall.rows());
    for (Eigen::Index i = 0; i < hall.rows(); ++i) p.assignments[i] = nearest_center(hall.row(i).transpose(), p.centers);
  }
  p.sigma2 = p.within_var / d;
  return p;
}

Vector basin_posterior(const Vector& h, const Matrix& centers, double sigma2) {
  if (centers.rows() == 0 || centers.cols() != h.size()) throw BasinError("basin_posterior: dimension mismatch");
  const auto k = centers.rows();
  Vector out = Vector::Zero(k);
  if (!(sigma2 > 0.0)) {
    out[static_cast<Eigen::Index>(nearest_center(h, centers))] = 1.0;
    return out;
  }
  for (Eigen::Index c = 0; c < k; ++c) out[c] = -(centers.row(c).transpose() - h).squaredNorm() / (2.0 * sigma2);
  const double m = out.maxCoeff();
  out = (out.array() - m).exp();
  return out / out.sum();
}

Vector basin_posterior(const Vector& h, const BasinPartition& p) {
  if (p.collapsed) throw BasinError("basin_posterior: partition collapsed to a single basin");
  return basin_posterior(h, p.centers, p.sigma2);
}

std::size_t BasinClassifier::predict(const Vector& h) const {
  const Vector z = standardizer.transform(h);
  std::size_t best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < models.size(); ++c) {
    const double v = models[c].decision(z);
    if (v > best_v) {
      best_v = v;
      best = c;
    }
  }
  return best;
}

BasinClassifier fit_basin_classifier(const Matrix& hall, const std::vector<std::size_t>& assignments,
                                     const LogisticOptions& opts) {
  if (static_cast<std::size_t>(hall.rows()) != assignments.size())
    throw BasinError("basin classifier: row/assignment count mismatch");
  std::size_t k = 0;
  for (auto a : assignments) k = std::max(k, a + 1);
  if (k < 2) throw BasinError("basin classifier: need at least 2 basins");
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < assignments.size(); ++i) members[assignments[i]].push_back(i);
  for (std::size_t c = 0; c < k; ++c)
    if (members[c].size() < 2) throw BasinError("basin classifier: basin " + std::to_string(c) + " has fewer than 2 points");

  std::vector<std::size_t> train, hold;
  for (const auto& m : members)
    for (std::size_t j = 0; j < m.size(); ++j) ((j % 5 == 4) ? hold : train).push_back(m[j]);
  std::sort(train.begin(), train.end());
  std::sort(hold.begin(), hold.end());

  BasinClassifier clf;
  Matrix xt(train.size(), hall.cols());
  for (std::size_t i = 0; i < train.size(); ++i) xt.row(i) = hall.row(train[i]);
  clf.standardizer = Standardizer::fit(xt);
  const Matrix zt = clf.standardizer.transform(xt);
  for (std::size_t c = 0; c < k; ++c) {
    Labels y(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) y[i] = assignments[train[i]] == c ? 1 : 0;
    clf.models.push_back(fit_logistic(zt, y, opts));
  }
  clf.n_train = train.size();
  clf.n_holdout = hold.size();
  clf.holdout_accuracy.assign(k, 0.0);
  std::vector<std::size_t> seen(k, 0);
  std::size_t correct = 0;
  for (std::size_t i : hold) {
    const std::size_t truth = assignments[i];
    ++seen[truth];
    if (clf.predict(hall.row(i).transpose()) == truth) {
      ++correct;
      clf.holdout_accuracy[truth] += 1.0;
    }
  }
  for (std::size_t c = 0; c < k; ++c)
    clf.holdout_accuracy[c] = seen[c] ? clf.holdout_accuracy[c] / static_cast<double>(seen[c]) : 0.0;
  clf.overall_accuracy = hold.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(hold.size());
  clf.chance = 1.0 / static_cast<double>(k);
  clf.chance_margin = hold.empty() ? 1.0
                                   : 2.0 * std::sqrt(clf.chance * (1.0 - clf.chance) / static_cast<double>(hold.size()));
  clf.near_chance = clf.overall_accuracy <= clf.chance + clf.chance_margin;
  return clf;
}

}  // namespace hbasin
