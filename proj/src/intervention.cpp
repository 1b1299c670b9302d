#include "hbasin/intervention.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "json.hpp"
#include "hbasin/parallel.hpp"
#include "hbasin/rng.hpp"
#include "hbasin/synthetic_dynamics.hpp"

namespace hbasin {

using nlohmann::json;

namespace {

int sign_of_all(const std::vector<double>& dots) {
  bool nonneg = true, nonpos = true;
  for (double v : dots) {
    if (v < 0.0) nonneg = false;
    if (v > 0.0) nonpos = false;
  }
  if (nonneg) return 1;
  if (nonpos) return -1;
  return 0;
}

bool follows(const std::vector<double>& p, int sign) {
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (sign > 0 && p[i] < p[i - 1]) return false;
    if (sign < 0 && p[i] > p[i - 1]) return false;
  }
  return sign != 0;
}

Vector round_to_float(const Vector& v) { return v.cast<float>().cast<double>(); }

}  // namespace

Vector interpolate(const Vector& h_fact, const Vector& mu_hall, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw BasinError("interpolate: alpha must be in [0, 1]");
  if (h_fact.size() != mu_hall.size()) throw BasinError("interpolate: dimension mismatch");
  return (1.0 - alpha) * h_fact + alpha * mu_hall;
}

std::string to_string(Direction d) {
  switch (d) {
    case Direction::kBasin: return "basin";
    case Direction::kRandom: return "random";
    case Direction::kOrthogonal: return "orthogonal";
  }
  return "unknown";
}

std::vector<double> make_grid(double first, double last, double step) {
  if (!(step > 0.0) || !(last >= first)) throw BasinError("grid: need step > 0 and last >= first");
  std::vector<double> g;
  const auto n = static_cast<std::size_t>(std::floor((last - first) / step + 1e-9));
  for (std::size_t i = 0; i <= n; ++i) g.push_back(first + static_cast<double>(i) * step);
  return g;
}

DoseResponse dose_response(const Matrix& fact, const Vector& mu_hall, const Vector& basin_axis,
                           const LinearProbe& probe, const std::vector<double>& alphas, std::uint64_t seed,
                           std::size_t threads) {
  if (alphas.empty() || alphas.front() != 0.0) throw BasinError("dose_response: grid must start at 0");
  for (std::size_t i = 1; i < alphas.size(); ++i)
    if (!(alphas[i] > alphas[i - 1])) throw BasinError("dose_response: grid must be strictly increasing");
  if (alphas.back() > 1.0) throw BasinError("dose_response: alpha must be in [0, 1]");
  if (fact.rows() == 0) throw BasinError("dose_response: no factual states");
  const auto n = static_cast<std::size_t>(fact.rows());
  const auto d = static_cast<std::size_t>(fact.cols());
  if (static_cast<std::size_t>(mu_hall.size()) != d || static_cast<std::size_t>(probe.w.size()) != d ||
      static_cast<std::size_t>(basin_axis.size()) != d)
    throw BasinError("dose_response: dimension mismatch");
  const double axis_norm = basin_axis.norm();
  if (!(axis_norm > 0.0)) throw BasinError("dose_response: degenerate direction (zero basin axis)");

  DoseResponse out;
  out.n_samples = n;
  out.alphas = alphas;
  out.basin_axis = basin_axis / axis_norm;
  Rng rng(derive_seed(seed, {stream::kControl}));
  out.random_direction = random_unit(d, rng);
  Vector uo = out.random_direction - out.random_direction.dot(out.basin_axis) * out.basin_axis;
  uo -= uo.dot(out.basin_axis) * out.basin_axis;  // second pass leaves only rounding
  if (!(uo.norm() > 1e-12)) throw BasinError("dose_response: degenerate direction (random control parallel to basin)");
  out.orthogonal_direction = uo / uo.norm();
  out.orthogonal_cosine = std::abs(out.orthogonal_direction.dot(out.basin_axis));

  // Per-sample displacement norms and unit directions, fixed before any fan-out.
  std::vector<double> norms(n);
  std::vector<Vector> basin_dirs(n);
  std::array<std::vector<double>, 3> dots;
  for (std::size_t i = 0; i < n; ++i) {
    const Vector disp = mu_hall - fact.row(i).transpose();
    norms[i] = disp.norm();
    if (!(norms[i] > 0.0)) throw BasinError("dose_response: degenerate direction (factual state equals mu_hall)");
    basin_dirs[i] = disp / norms[i];
    dots[0].push_back(probe.w.dot(basin_dirs[i]));
    dots[1].push_back(probe.w.dot(out.random_direction));
    dots[2].push_back(probe.w.dot(out.orthogonal_direction));
  }

  const std::size_t na = alphas.size();
  std::vector<double> cell(3 * na);
  parallel_for(3 * na, threads, [&](std::size_t job) {
    const std::size_t k = job / na;
    const double a = alphas[job % na];
    const Vector& fixed = k == 1 ? out.random_direction : out.orthogonal_direction;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Vector h = fact.row(i).transpose();
      const Vector moved = k == 0 ? interpolate(h, mu_hall, a) : Vector(h + (a * norms[i]) * fixed);
      sum += probe.probability(moved);
    }
    cell[job] = sum / static_cast<double>(n);
  });

  for (std::size_t k = 0; k < 3; ++k) {
    out.p_hall[k].assign(cell.begin() + static_cast<std::ptrdiff_t>(k * na),
                         cell.begin() + static_cast<std::ptrdiff_t>((k + 1) * na));
    const double p0 = out.p_hall[k][0];
    if (!(p0 > 0.0)) throw BasinError("dose_response: zero baseline probability, fold change undefined");
    out.fold_change[k].clear();
    for (double p : out.p_hall[k]) out.fold_change[k].push_back(p / p0);
    out.fold_change[k][0] = 1.0;
    out.max_fold[k] = *std::max_element(out.fold_change[k].begin(), out.fold_change[k].end());
    out.direction_sign[k] = sign_of_all(dots[k]);
    out.monotone[k] = follows(out.p_hall[k], out.direction_sign[k]);
  }
  return out;
}

DoseResponse run_dose_response(const TrajectoryBundle& bundle, std::size_t layer, const InterventionConfig& cfg) {
  bundle.validate();
  if (layer >= bundle.layer_count()) throw BasinError("layer " + std::to_string(layer) + " out of range");
  const SplitIndex split = stratified_split(bundle.labels, cfg.train_fraction, cfg.seed);
  const Matrix train = gather_rows(bundle, layer, split.train_idx);
  Labels y;
  for (std::size_t i : split.train_idx) y.push_back(bundle.labels[i]);
  const LinearProbe probe = train_probe(train, y, cfg.logistic);
  const auto hall_train = indices_with_label(bundle.labels, kHallucinated, split.train_idx);
  const auto fact_train = indices_with_label(bundle.labels, kFactual, split.train_idx);
  const Vector mu_hall = gather_rows(bundle, layer, hall_train).colwise().mean().transpose();
  const Vector mu_fact = gather_rows(bundle, layer, fact_train).colwise().mean().transpose();
  const auto fact_test = indices_with_label(bundle.labels, kFactual, split.test_idx);
  DoseResponse out = dose_response(gather_rows(bundle, layer, fact_test), mu_hall, mu_hall - mu_fact, probe,
                                   cfg.alphas, cfg.seed, cfg.threads);
  out.layer = layer;
  return out;
}

SteeringVector steering_vector(const Matrix& fact, const Matrix& hall) {
  if (fact.rows() == 0 || hall.rows() == 0) throw BasinError("steering_vector: empty class");
  if (fact.cols() != hall.cols()) throw BasinError("steering_vector: dimension mismatch");
  SteeringVector s;
  s.v = (fact.colwise().mean() - hall.colwise().mean()).transpose();
  s.zero = !(s.v.norm() > 0.0);
  return s;
}

double Controller::lambda(const Vector& phi) const { return lambda_max * sigmoid(w.dot(phi) + b); }

bool SteeringArtifact::operator==(const SteeringArtifact& o) const {
  auto same_map = [](const std::map<std::size_t, Vector>& a, const std::map<std::size_t, Vector>& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [k, v] : a) {
      auto it = b.find(k);
      if (it == b.end() || it->second.size() != v.size() || it->second != v) return false;
    }
    return true;
  };
  return dim == o.dim && layers == o.layers && same_map(vectors, o.vectors) && same_map(reference, o.reference) &&
         controller.w == o.controller.w && controller.b == o.controller.b &&
         controller.lambda_max == o.controller.lambda_max && eps == o.eps && model_id == o.model_id &&
         dataset_id == o.dataset_id;
}

std::vector<std::size_t> auto_layers(std::size_t n_layers) {
  if (n_layers < 2) throw BasinError("auto layers: need at least 2 transformer layers");
  std::vector<std::size_t> l = {n_layers / 3, (2 * n_layers) / 3};
  if (l[0] == l[1]) l.pop_back();
  return l;
}

Vector steering_features(const TrajectoryBundle& b, std::size_t sample, const ReferenceState& ref,
                         const std::vector<std::size_t>& layers, double eps) {
  if (layers.empty()) throw BasinError("steering features: no layers");
  double min_d = std::numeric_limits<double>::infinity();
  double kappa = 0.0;
  for (std::size_t l : layers) {
    min_d = std::min(min_d, radial_distance(b, sample, ref, l));
    kappa += local_contraction_ratio(b, sample, ref, l, eps);
  }
  Vector phi(2);
  phi << min_d, kappa / static_cast<double>(layers.size());
  return phi;
}

Vector steering_features(const TrajectoryBundle& b, std::size_t sample, const SteeringArtifact& a) {
  double min_d = std::numeric_limits<double>::infinity();
  double kappa = 0.0;
  auto mu = [&](std::size_t l) -> const Vector& {
    auto it = a.reference.find(l);
    if (it == a.reference.end()) throw BasinError("steering features: artifact lacks reference for layer " + std::to_string(l));
    return it->second;
  };
  for (std::size_t l : a.layers) {
    const double dl = (b.state(sample, l) - mu(l)).norm();
    min_d = std::min(min_d, dl);
    if (l + 1 < b.layer_count()) {
      kappa += (b.state(sample, l + 1) - mu(l + 1)).norm() / (dl + a.eps);
    } else {
      kappa += 1.0;
    }
  }
  Vector phi(2);
  phi << min_d, kappa / static_cast<double>(a.layers.size());
  return phi;
}

SteeringFit fit_controller(const TrajectoryBundle& bundle, const ReferenceState* ref_in, const SteeringConfig& cfg) {
  bundle.validate();
  if (!(cfg.lambda_max > 0.0)) throw BasinError("steer-fit: lambda_max must be positive");
  if (bundle.count(kFactual) == 0 || bundle.count(kHallucinated) == 0) throw BasinError("steer-fit: single class");
  SteeringFit fit;
  fit.split = stratified_split(bundle.labels, cfg.train_fraction, cfg.seed);
  const auto& train = fit.split.train_idx;
  const auto fact_idx = indices_with_label(bundle.labels, kFactual, train);
  const auto hall_idx = indices_with_label(bundle.labels, kHallucinated, train);

  SteeringArtifact& a = fit.artifact;
  a.dim = bundle.dim;
  a.model_id = bundle.model_id;
  a.dataset_id = bundle.dataset_id;
  a.layers = cfg.layers.empty() ? auto_layers(bundle.n_layers) : cfg.layers;
  std::sort(a.layers.begin(), a.layers.end());
  a.layers.erase(std::unique(a.layers.begin(), a.layers.end()), a.layers.end());
  for (std::size_t l : a.layers)
    if (l >= bundle.layer_count()) throw BasinError("steer-fit: layer " + std::to_string(l) + " out of range");

  const ReferenceState own = ref_in ? ReferenceState{} : build_reference(bundle, hall_idx);
  const ReferenceState& ref = ref_in ? *ref_in : own;
  if (ref.layer_count() != bundle.layer_count() || ref.dim() != bundle.dim)
    throw BasinError("steer-fit: reference shape does not match the bundle");

  // Vectors and reference are stored at float32 precision, as they are replayed.
  for (std::size_t l : a.layers) {
    const SteeringVector sv = steering_vector(gather_rows(bundle, l, fact_idx), gather_rows(bundle, l, hall_idx));
    if (sv.zero) throw BasinError("steer-fit: zero steering vector at layer " + std::to_string(l));
    a.vectors[l] = round_to_float(sv.v);
    a.reference[l] = round_to_float(ref.mu[l]);
    if (l + 1 < bundle.layer_count()) a.reference[l + 1] = round_to_float(ref.mu[l + 1]);
  }

  Matrix phi(train.size(), 2);
  Labels y;
  for (std::size_t i = 0; i < train.size(); ++i) {
    phi.row(i) = steering_features(bundle, train[i], a).transpose();
    y.push_back(bundle.labels[train[i]]);
  }
  const LinearProbe p = train_probe(phi, y, cfg.logistic);
  a.controller.w = p.w;
  a.controller.b = p.b;
  a.controller.lambda_max = cfg.lambda_max;
  return fit;
}

Matrix apply_steering_offline(const Matrix& states, const SteeringArtifact& a, std::size_t layer, const Matrix& phi) {
  auto it = a.vectors.find(layer);
  if (it == a.vectors.end()) throw BasinError("apply steering: layer " + std::to_string(layer) + " is not a steering layer");
  if (static_cast<std::size_t>(states.cols()) != a.dim) throw BasinError("apply steering: dimension mismatch");
  if (phi.rows() != states.rows() || phi.cols() != 2) throw BasinError("apply steering: need one feature pair per state");
  Matrix out = states;
  for (Eigen::Index i = 0; i < states.rows(); ++i) {
    const double lam = a.controller.lambda(phi.row(i).transpose());
    out.row(i) += lam * it->second.transpose();
  }
  return out;
}

Matrix apply_steering_fixed(const Matrix& states, const Vector& v, double lambda) {
  if (states.cols() != v.size()) throw BasinError("apply steering: dimension mismatch");
  Matrix out = states;
  if (lambda != 0.0) out.rowwise() += lambda * v.transpose();
  return out;
}

std::vector<double> steering_sweep(const Matrix& states, const Vector& v, const LinearProbe& probe,
                                   const std::vector<double>& lambdas) {
  if (states.rows() == 0) throw BasinError("steering sweep: no states");
  std::vector<double> out;
  for (double lam : lambdas) {
    const Matrix s = apply_steering_fixed(states, v, lam);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < s.rows(); ++i) sum += probe.probability(s.row(i).transpose());
    out.push_back(sum / static_cast<double>(s.rows()));
  }
  return out;
}

std::string encode_f32_base64(const Vector& v) {
  std::vector<unsigned char> raw(static_cast<std::size_t>(v.size()) * 4);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v[i]));
    for (int k = 0; k < 4; ++k) raw[i * 4 + k] = static_cast<unsigned char>(bits >> (8 * k));
  }
  std::string out(4 * ((raw.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), raw.data(), static_cast<int>(raw.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

Vector decode_f32_base64(const std::string& s, std::size_t dim) {
  if (s.size() != 4 * ((dim * 4 + 2) / 3)) throw BasinError("malformed artifact: vector length does not match dim");
  std::vector<unsigned char> raw(s.size() / 4 * 3 + 3);
  const int n = EVP_DecodeBlock(raw.data(), reinterpret_cast<const unsigned char*>(s.data()), static_cast<int>(s.size()));
  if (n < 0 || static_cast<std::size_t>(n) < dim * 4) throw BasinError("malformed artifact: bad base64");
  Vector v(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(raw[i * 4 + k]) << (8 * k);
    const float f = std::bit_cast<float>(bits);
    if (!std::isfinite(f)) throw BasinError("malformed artifact: non-finite vector entry");
    v[i] = f;
  }
  return v;
}

std::string artifact_to_json(const SteeringArtifact& a) {
  json j;
  j["format"] = kArtifactFormat;
  j["version"] = kArtifactVersion;
  j["dim"] = a.dim;
  j["layers"] = a.layers;
  j["eps"] = a.eps;
  j["model_id"] = a.model_id;
  j["dataset_id"] = a.dataset_id;
  j["encoding"] = "base64-f32le";
  j["controller"] = {{"features", {"min_distance", "mean_kappa"}},
                     {"weights", {a.controller.w[0], a.controller.w[1]}},
                     {"bias", a.controller.b},
                     {"lambda_max", a.controller.lambda_max}};
  json vecs = json::object(), refs = json::object();
  for (const auto& [l, v] : a.vectors) vecs[std::to_string(l)] = encode_f32_base64(v);
  for (const auto& [l, v] : a.reference) refs[std::to_string(l)] = encode_f32_base64(v);
  j["vectors"] = vecs;
  j["reference"] = refs;
  return j.dump(2) + "\n";
}

SteeringArtifact artifact_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw BasinError(std::string("malformed artifact: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kArtifactFormat) throw BasinError("malformed artifact: unknown format");
    const int version = j.at("version").get<int>();
    if (version != kArtifactVersion)
      throw BasinError("version mismatch: artifact version " + std::to_string(version) + ", expected " +
                       std::to_string(kArtifactVersion));
    SteeringArtifact a;
    a.dim = j.at("dim").get<std::size_t>();
    a.layers = j.at("layers").get<std::vector<std::size_t>>();
    a.eps = j.at("eps").get<double>();
    a.model_id = j.value("model_id", "");
    a.dataset_id = j.value("dataset_id", "");
    const auto& c = j.at("controller");
    const auto w = c.at("weights").get<std::vector<double>>();
    if (w.size() != 2) throw BasinError("malformed artifact: controller needs 2 weights");
    a.controller.w = Vector(2);
    a.controller.w << w[0], w[1];
    a.controller.b = c.at("bias").get<double>();
    a.controller.lambda_max = c.at("lambda_max").get<double>();
    const auto& vecs = j.at("vectors");
    const auto& refs = j.at("reference");
    for (std::size_t l : a.layers) {
      const std::string key = std::to_string(l);
      if (!vecs.contains(key)) throw BasinError("missing layer key " + key + " in vectors");
      if (!refs.contains(key)) throw BasinError("missing layer key " + key + " in reference");
      a.vectors[l] = decode_f32_base64(vecs.at(key).get<std::string>(), a.dim);
    }
    for (const auto& [key, val] : refs.items())
      a.reference[static_cast<std::size_t>(std::stoul(key))] = decode_f32_base64(val.get<std::string>(), a.dim);
    return a;
  } catch (const json::exception& e) {
    throw BasinError(std::string("malformed artifact: ") + e.what());
  } catch (const std::logic_error&) {
    throw BasinError("malformed artifact: bad layer key in reference");
  }
}

void export_artifact(const SteeringArtifact& a, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw BasinError("cannot open " + path.string() + " for writing");
  f << artifact_to_json(a);
  if (!f) throw BasinError("write failed: " + path.string());
}

SteeringArtifact import_artifact(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw BasinError("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return artifact_from_json(ss.str());
}

}  // namespace hbasin
