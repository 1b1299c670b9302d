#include "hbasin/cli.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "hbasin/detection.hpp"
#include "hbasin/intervention.hpp"
#include "hbasin/multi_basin.hpp"
#include "hbasin/parallel.hpp"
#include "hbasin/reference_geometry.hpp"
#include "hbasin/report_io.hpp"
#include "hbasin/rng.hpp"
#include "hbasin/separation_metrics.hpp"
#include "hbasin/synthetic_data.hpp"
#include "hbasin/synthetic_dynamics.hpp"
#include "hbasin/traj_store.hpp"

namespace hbasin::cli {

std::vector<std::size_t> parse_layers(const std::string& spec, std::size_t n_layers) {
  if (spec == "mid") return {n_layers / 2};
  if (spec == "last") return {n_layers};
  if (spec == "auto") return auto_layers(n_layers);
  std::vector<std::size_t> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw BasinError("bad layer list: " + spec);
    const auto l = std::stoul(item);
    if (l > n_layers) throw BasinError("layer " + item + " out of range 0.." + std::to_string(n_layers));
    out.push_back(l);
  }
  if (out.empty()) throw BasinError("bad layer list: " + spec);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<double> parse_grid(const std::string& spec) {
  std::vector<double> parts;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ':')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw BasinError("bad grid: " + spec);
    }
    if (used != item.size()) throw BasinError("bad grid: " + spec);
    parts.push_back(v);
  }
  if (parts.size() != 3) throw BasinError("bad grid (want first:last:step): " + spec);
  return make_grid(parts[0], parts[1], parts[2]);
}

namespace {

struct Output {
  std::string path = "-";
  std::string format = "auto";  // auto | json | csv

  bool csv() const {
    if (format == "csv") return true;
    if (format == "json") return false;
    return path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
  }
};

struct Input {
  std::string name;
  std::string path;
};

// Writes a result document: JSON with config, input hashes and result, or a
// CSV table preceded by the same metadata as comment lines.
void emit(const Output& o, const std::string& command, const Json& config, const std::vector<Input>& inputs,
          const Json& result, const std::function<CsvTable()>& table, std::ostream& out) {
  Json hashes = Json::object();
  for (const auto& in : inputs) hashes[in.name] = {{"path", in.path}, {"sha1", file_blob_sha1(in.path)}};
  std::string text;
  if (o.csv()) {
    if (!table) throw BasinError(command + ": no CSV layout, use --format json");
    CsvTable t = table();
    std::vector<std::pair<std::string, std::string>> meta{{"command", command}, {"config", rounded(config).dump()}};
    for (const auto& in : inputs) meta.emplace_back(in.name + "_sha1", hashes[in.name]["sha1"].get<std::string>());
    meta.insert(meta.end(), t.comments.begin(), t.comments.end());
    t.comments = std::move(meta);
    text = t.str();
  } else {
    text = dump_json({{"command", command}, {"config", config}, {"inputs", hashes}, {"result", result}});
  }
  if (o.path == "-") out << text;
  else write_text_file(o.path, text);
}

std::size_t resolve_layer(const std::string& spec, std::size_t n_layers) {
  const auto ls = parse_layers(spec, n_layers);
  if (ls.size() != 1) throw BasinError("expected a single layer, got " + spec);
  return ls.front();
}

void add_output(CLI::App* sub, Output& o) {
  sub->add_option("--out", o.path, "Output file, - for stdout");
  sub->add_option("--format", o.format, "auto (by extension), json or csv")
      ->check(CLI::IsMember({"auto", "json", "csv"}));
}

// ---- analyze ---------------------------------------------------------------

struct AnalyzeOpts {
  std::string bundle;
  std::string pca_out;
  std::string pca_layer = "last";
  std::size_t pca_k = 3;
  Output out;
};

void cmd_analyze(const AnalyzeOpts& o, std::size_t threads, std::ostream& os) {
  const TrajectoryBundle b = read_bundle(o.bundle);
  const SeparationReport rep = separation_report(b, threads);
  const std::size_t layer = resolve_layer(o.pca_layer, b.n_layers);
  Json config = {{"bundle", o.bundle}, {"pca_layer", o.pca_layer}, {"pca_k", o.pca_k}};
  Json result = to_json(rep);
  result["model_id"] = b.model_id;
  result["dataset_id"] = b.dataset_id;
  if (!o.pca_out.empty()) {
    const PcaResult pca = pca_project(layer_slice(b, layer), o.pca_k);
    std::vector<std::size_t> idx(b.n_samples);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    CsvTable t = pca_table(pca, idx, b.labels);
    t.comments = {{"command", "analyze"},
                  {"config", rounded(config).dump()},
                  {"bundle_sha1", file_blob_sha1(o.bundle)},
                  {"layer", std::to_string(layer)}};
    write_text_file(o.pca_out, t.str());
    result["pca"] = {{"layer", layer},
                     {"explained_variance", to_json(pca.explained_variance)},
                     {"rank_deficient", pca.rank_deficient}};
  }
  emit(o.out, "analyze", config, {{"bundle", o.bundle}}, result, [&] { return separation_table(rep); }, os);
}

// ---- detect ----------------------------------------------------------------

struct DetectOpts {
  std::string bundle;
  DetectionConfig cfg;
  Output out;
};

void cmd_detect(DetectOpts o, std::size_t threads, std::ostream& os) {
  const TrajectoryBundle b = read_bundle(o.bundle);
  o.cfg.threads = threads;
  const DetectionResult r = evaluate_dataset(b, o.cfg);
  const Json config = {{"bundle", o.bundle},         {"splits", o.cfg.splits}, {"seed", o.cfg.seed},
                       {"train_fraction", o.cfg.train_fraction}, {"theta", o.cfg.theta},
                       {"n_boot", o.cfg.n_boot},     {"eps", o.cfg.eps}};
  emit(o.out, "detect", config, {{"bundle", o.bundle}}, to_json(r),
       [&] {
         CsvTable t = sweep_table(layer_sweep_report(r));
         t.comments = {{"best_layer", std::to_string(r.best_layer)},
                       {"basin_exists", r.basin_exists ? "true" : "false"}};
         return t;
       },
       os);
}

// ---- multibasin ------------------------------------------------------------

struct MultiOpts {
  std::string bundle;
  std::size_t k = 3;
  double tau = 0.9;
  std::string layer = "last";
  std::size_t restarts = 10;
  std::size_t max_iter = 300;
  std::uint64_t seed = 42;
  std::size_t sweep = 0;
  std::string pca_out;
  Output out;
};

void cmd_multibasin(const MultiOpts& o, std::size_t threads, std::ostream& os) {
  const TrajectoryBundle b = read_bundle(o.bundle);
  const std::size_t layer = resolve_layer(o.layer, b.n_layers);
  const Matrix hall = layer_slice(b, layer, ClassFilter::kHallucinated);
  const KMeansOptions km{o.restarts, o.max_iter, threads};
  const BasinPartition p = partition_hallucinations(hall, o.k, o.tau, o.seed, km);
  const Json config = {{"bundle", o.bundle}, {"K", o.k},         {"tau", o.tau},   {"layer", o.layer},
                       {"restarts", o.restarts}, {"max_iter", o.max_iter}, {"seed", o.seed}, {"sweep", o.sweep}};
  Json result = {{"layer", layer}, {"partition", to_json(p)}};
  if (!p.collapsed && p.k >= 2) result["classifier"] = to_json(fit_basin_classifier(hall, p.assignments));
  if (o.sweep > 0) result["inertia_sweep"] = kmeans_sweep(hall, o.sweep, o.seed, km);
  if (!o.pca_out.empty()) {
    const PcaResult pca = pca_project(hall, 2);
    const auto idx = indices_with_label(b.labels, kHallucinated);
    CsvTable t = pca_table(pca, idx, b.labels, p.assignments);
    t.comments = {{"command", "multibasin"},
                  {"config", rounded(config).dump()},
                  {"bundle_sha1", file_blob_sha1(o.bundle)}};
    write_text_file(o.pca_out, t.str());
  }
  emit(o.out, "multibasin", config, {{"bundle", o.bundle}}, result,
       [&] {
         CsvTable t;
         t.header = {"basin", "size"};
         for (std::size_t k = 0; k < p.k; ++k) {
           const auto n = std::count(p.assignments.begin(), p.assignments.end(), k);
           t.rows.push_back({std::to_string(k), std::to_string(n)});
         }
         t.comments = {{"collapsed", p.collapsed ? "true" : "false"},
                       {"sigma2", format_number(p.sigma2)},
                       {"within_var", format_number(p.within_var)},
                       {"total_var", format_number(p.total_var)}};
         return t;
       },
       os);
}

// ---- intervene -------------------------------------------------------------

struct InterveneOpts {
  std::string bundle;
  std::string grid = "0:1:0.1";
  std::string layer = "mid";
  std::uint64_t seed = 42;
  double train_fraction = 0.7;
  double l2 = 1.0;
  Output out;
};

void cmd_intervene(const InterveneOpts& o, std::size_t threads, std::ostream& os) {
  const TrajectoryBundle b = read_bundle(o.bundle);
  InterventionConfig cfg;
  cfg.seed = o.seed;
  cfg.train_fraction = o.train_fraction;
  cfg.alphas = parse_grid(o.grid);
  cfg.logistic.l2 = o.l2;
  cfg.threads = threads;
  const std::size_t layer = resolve_layer(o.layer, b.n_layers);
  const DoseResponse d = run_dose_response(b, layer, cfg);
  const Json config = {{"bundle", o.bundle}, {"grid", o.grid}, {"layer", o.layer}, {"seed", o.seed},
                       {"train_fraction", o.train_fraction}, {"l2", o.l2}};
  emit(o.out, "intervene", config, {{"bundle", o.bundle}}, to_json(d),
       [&] {
         CsvTable t = dose_table(d);
         t.comments = {{"layer", std::to_string(d.layer)}, {"n_samples", std::to_string(d.n_samples)}};
         return t;
       },
       os);
}

// ---- steer-fit -------------------------------------------------------------

struct SteerOpts {
  std::string bundle;
  std::string ref;
  std::string layers = "auto";
  double lambda_max = 0.5;
  double train_fraction = 0.7;
  std::uint64_t seed = 42;
  double l2 = 1.0;
  std::string out = "-";
};

void cmd_steer_fit(const SteerOpts& o, std::ostream& os) {
  const TrajectoryBundle b = read_bundle(o.bundle);
  std::optional<ReferenceState> ref;
  if (!o.ref.empty()) ref = build_reference(read_bundle(o.ref));
  SteeringConfig cfg;
  cfg.layers = parse_layers(o.layers, b.n_layers);
  cfg.lambda_max = o.lambda_max;
  cfg.train_fraction = o.train_fraction;
  cfg.seed = o.seed;
  cfg.logistic.l2 = o.l2;
  const SteeringFit fit = fit_controller(b, ref ? &*ref : nullptr, cfg);

  // The artifact keeps full precision so that replay matches the fit exactly.
  Json doc = Json::parse(artifact_to_json(fit.artifact));
  doc["config"] = {{"bundle", o.bundle}, {"ref", o.ref},     {"layers", o.layers},
                   {"lambda_max", o.lambda_max}, {"train_fraction", o.train_fraction},
                   {"seed", o.seed},     {"l2", o.l2}};
  Json inputs = {{"bundle", {{"path", o.bundle}, {"sha1", file_blob_sha1(o.bundle)}}}};
  if (!o.ref.empty()) inputs["ref"] = {{"path", o.ref}, {"sha1", file_blob_sha1(o.ref)}};
  doc["inputs"] = inputs;
  doc["reference_source"] = o.ref.empty() ? "hallucinated training samples" : "context bundle";
  const std::string text = doc.dump(2) + "\n";
  if (o.out == "-") os << text;
  else write_text_file(o.out, text);
}

// ---- report ----------------------------------------------------------------

struct ReportOpts {
  std::string bundle;
  std::string ref;
  double radius_quantile = kRadiusQuantile;
  double eps = kContractionEps;
  Output out;
};

void cmd_report(const ReportOpts& o, std::ostream& os) {
  const TrajectoryBundle b = read_bundle(o.bundle);
  const ReferenceOptions ropts{o.radius_quantile, kRadiusFloor};
  std::optional<TrajectoryBundle> ctx;
  ReferenceState ref;
  if (!o.ref.empty()) {
    ctx = read_bundle(o.ref);
    ref = build_reference(*ctx, ropts);
  } else {
    const auto hall = indices_with_label(b.labels, kHallucinated);
    ref = build_reference(b, hall, ropts);
  }
  if (ref.dim() != b.dim || ref.layer_count() != b.layer_count())
    throw BasinError("reference shape does not match the bundle");
  const TrappingReport trap = trapping_stats(b, ref, o.eps);
  std::optional<EntropyStats> ent;
  if (b.attn_entropy) ent = attention_entropy_stats(b);

  const Json config = {{"bundle", o.bundle}, {"ref", o.ref}, {"radius_quantile", o.radius_quantile}, {"eps", o.eps}};
  Json result = {{"reference", to_json(ref)},
                 {"reference_source", ctx ? "context bundle" : "hallucinated samples"},
                 {"trapping", to_json(trap)}};
  if (ctx) result["fixed_point"] = to_json(fixed_point_residual(*ctx, ref));
  if (ent) result["attention_entropy"] = to_json(*ent);
  std::vector<Input> inputs{{"bundle", o.bundle}};
  if (ctx) inputs.push_back({"ref", o.ref});
  emit(o.out, "report", config, inputs, result,
       [&] {
         CsvTable t;
         t.header = {"layer", "sigma_ctx", "radius", "kappa_fact", "kappa_hall",
                     "entropy_mean_fact", "entropy_std_fact", "entropy_mean_hall", "entropy_std_hall"};
         const double nan = std::nan("");
         for (std::size_t l = 0; l < b.layer_count(); ++l) {
           const bool has_kappa = l < b.n_layers;
           const bool has_ent = ent && l >= 1;
           t.rows.push_back({std::to_string(l), format_number(ref.sigma_ctx[l]), format_number(ref.radius[l]),
                             format_number(has_kappa ? trap.fact.mean_kappa[l] : nan),
                             format_number(has_kappa ? trap.hall.mean_kappa[l] : nan),
                             format_number(has_ent ? ent->mean_fact[l - 1] : nan),
                             format_number(has_ent ? ent->std_fact[l - 1] : nan),
                             format_number(has_ent ? ent->mean_hall[l - 1] : nan),
                             format_number(has_ent ? ent->std_hall[l - 1] : nan)});
         }
         t.comments = {{"entry_rate_fact", format_number(trap.fact.entry_rate)},
                       {"entry_rate_hall", format_number(trap.hall.entry_rate)},
                       {"irreversibility_fact", format_number(trap.fact.irreversibility)},
                       {"irreversibility_hall", format_number(trap.hall.irreversibility)}};
         return t;
       },
       os);
}

// ---- simulate --------------------------------------------------------------

struct SimulateOpts {
  std::string theorem;
  std::uint64_t seed = 42;
  std::size_t dim = 16;
  std::size_t layers = 30;
  std::size_t n = 1000;
  double alpha = 0.9;        // decay: declared contraction
  double rho = 0.0;          // decay: actual spectral radius, 0 = alpha
  double r0 = 1.0;
  double l_ln = 0.5, l_a = 0.3, l_f = 0.3, eps = 0.01;
  std::size_t tangent = 4;
  double alpha_n = 0.5, eps_t = 0.01;
  std::size_t draws = 3;     // manifold: spec draws
  std::string law = "all";
  double r = 1.0, rho_star = 4.0;
  std::string readout = "linear";
  std::size_t outputs = 4;
  std::string modes = "2,4,8,16";
  std::string out = "-";
};

Json simulate_result(const SimulateOpts& o, std::size_t threads) {
  const std::string& t = o.theorem;
  if (t == "decay") {
    const double rho = o.rho > 0.0 ? o.rho : o.alpha;
    const LinearMapSpec spec = make_linear_spec(o.dim, rho, o.alpha, derive_seed(o.seed, {stream::kVerifier, 1}));
    return to_json(verify_radius_decay(spec, o.r0, 0, o.layers, o.n, o.seed, threads));
  }
  if (t == "emergence") {
    const ResidualBlockSpec spec = make_residual_spec(o.dim, o.layers, o.l_a, o.l_f, o.l_ln, o.eps,
                                                      derive_seed(o.seed, {stream::kVerifier, 2}));
    return to_json(verify_basin_emergence(spec, o.r0, o.n, o.seed, threads));
  }
  if (t == "manifold") {
    Json runs = Json::array();
    bool all = true;
    for (std::size_t k = 0; k < o.draws; ++k) {
      const ManifoldSpec spec = make_manifold_spec(o.dim, o.tangent, o.alpha_n, o.eps_t, 10.0,
                                                   derive_seed(o.seed, {stream::kVerifier, 3, k}));
      const ManifoldReport rep = verify_manifold_attractor(spec, o.layers, 8, derive_seed(o.seed, {4, k}));
      all = all && rep.passed;
      runs.push_back(to_json(rep));
    }
    return {{"draws", runs}, {"passed", all}};
  }
  if (t == "separation") {
    std::vector<RadialLaw> laws;
    if (o.law == "all") laws = {RadialLaw::kPointMass, RadialLaw::kExponential, RadialLaw::kUniform};
    else if (o.law == "point") laws = {RadialLaw::kPointMass};
    else if (o.law == "exponential") laws = {RadialLaw::kExponential};
    else if (o.law == "uniform") laws = {RadialLaw::kUniform};
    else throw BasinError("unknown radial law: " + o.law);
    Json runs = Json::array();
    bool all = true;
    const Vector mu = Vector::Zero(static_cast<Eigen::Index>(o.dim));
    for (std::size_t k = 0; k < laws.size(); ++k) {
      const auto rep = verify_separation_lemma(laws[k], mu, o.r, o.rho_star, o.n, derive_seed(o.seed, {5, k}));
      all = all && rep.passed;
      runs.push_back(to_json(rep));
    }
    return {{"laws", runs}, {"passed", all}};
  }
  if (t == "insensitivity") {
    Rng rng(derive_seed(o.seed, {stream::kVerifier, 6}));
    Matrix a(static_cast<Eigen::Index>(o.outputs), static_cast<Eigen::Index>(o.dim));
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = standard_normal(rng);
    Readout ro;
    if (o.readout == "linear") ro = linear_readout(a);
    else if (o.readout == "softmax") ro = softmax_readout(a);
    else if (o.readout == "constant") ro = constant_readout(Vector::Ones(static_cast<Eigen::Index>(o.outputs)));
    else throw BasinError("unknown readout: " + o.readout);
    const Vector center = gaussian_vector(o.dim, rng);
    return to_json(verify_context_insensitivity(ro, center, o.r, o.eps, o.n, o.seed));
  }
  if (t == "taskvar") {
    std::vector<std::size_t> modes;
    std::stringstream ss(o.modes);
    std::string item;
    while (std::getline(ss, item, ',')) modes.push_back(std::stoul(item));
    Json rows = Json::array();
    double prev = -1.0;
    bool increasing = true;
    for (std::size_t m : modes) {
      SyntheticConfig c;
      c.answer_modes = m;
      c.seed = o.seed;
      const SyntheticBundle sb = make_synthetic_bundle(c);
      const auto& b = sb.bundle;
      const VarianceRatio vr = variance_ratio(layer_slice(b, b.n_layers, ClassFilter::kFactual),
                                              layer_slice(b, b.n_layers, ClassFilter::kHallucinated));
      increasing = increasing && vr.value > prev;
      prev = vr.value;
      rows.push_back({{"answer_modes", m},
                      {"d_signal", sb.truth.d_signal},
                      {"rho_var", vr.value},
                      {"closed_form", sb.truth.closed_form_rho_var},
                      {"relative_error", std::abs(vr.value / sb.truth.closed_form_rho_var - 1.0)}});
    }
    return {{"rows", rows}, {"strictly_increasing", increasing}};
  }
  throw BasinError("unknown theorem: " + t);
}

void cmd_simulate(const SimulateOpts& o, std::size_t threads, std::ostream& os) {
  const Json config = {{"theorem", o.theorem}, {"seed", o.seed},   {"dim", o.dim},     {"layers", o.layers},
                       {"n", o.n},             {"alpha", o.alpha}, {"rho", o.rho},     {"r0", o.r0},
                       {"l_ln", o.l_ln},       {"l_a", o.l_a},     {"l_f", o.l_f},     {"eps", o.eps},
                       {"tangent", o.tangent}, {"alpha_n", o.alpha_n}, {"eps_t", o.eps_t}, {"draws", o.draws},
                       {"law", o.law},         {"r", o.r},         {"rho_star", o.rho_star},
                       {"readout", o.readout}, {"outputs", o.outputs}, {"modes", o.modes}};
  emit(Output{o.out, "json"}, "simulate", config, {}, simulate_result(o, threads), nullptr, os);
}

// ---- synth -----------------------------------------------------------------

struct SynthOpts {
  SyntheticConfig cfg;
  std::string kind = "factoid";
  std::string out;
  std::size_t contexts = 0;
  std::string ctx_out;
};

void cmd_synth(SynthOpts o, std::ostream& os) {
  o.cfg.kind = parse_task_kind(o.kind);
  const SyntheticBundle sb = make_synthetic_bundle(o.cfg);
  write_bundle(sb.bundle, o.out);
  Json result = {{"out", o.out},
                 {"sha1", file_blob_sha1(o.out)},
                 {"d_signal", sb.truth.d_signal},
                 {"expected_rho_var", sb.truth.expected_rho_var},
                 {"closed_form_rho_var", sb.truth.closed_form_rho_var},
                 {"basin_radius", sb.truth.basin_radius}};
  if (o.contexts > 0) {
    if (o.ctx_out.empty()) throw BasinError("--contexts needs --ctx-out");
    write_bundle(make_context_bundle(o.cfg, o.contexts), o.ctx_out);
    result["ctx_out"] = o.ctx_out;
    result["ctx_sha1"] = file_blob_sha1(o.ctx_out);
  }
  const auto& c = o.cfg;
  const Json config = {{"kind", o.kind},
                       {"n", c.n},
                       {"layers", c.n_layers},
                       {"dim", c.dim},
                       {"hall_fraction", c.hall_fraction},
                       {"modes", c.answer_modes},
                       {"sigma_sig", c.sigma_sig},
                       {"sigma_0", c.sigma_0},
                       {"d_hall", c.d_hall},
                       {"separation", c.separation},
                       {"contraction", c.contraction},
                       {"embed_scale", c.embed_scale},
                       {"clusters", c.clusters},
                       {"cluster_distance", c.cluster_distance},
                       {"cluster_sigma", c.cluster_sigma},
                       {"attn_entropy", c.attn_entropy},
                       {"seed", c.seed},
                       {"contexts", o.contexts}};
  os << dump_json({{"command", "synth"}, {"config", config}, {"result", result}});
}

void print_error(std::ostream& err, const std::string& command, const std::string& message) {
  err << Json{{"error", {{"command", command}, {"message", message}}}}.dump() << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hallucination basin analysis of layerwise hidden-state trajectories", "hbasin"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "Worker threads, 0 = all cores (results do not depend on it)");

  AnalyzeOpts an;
  auto* s_an = app.add_subcommand("analyze", "Per-layer separation geometry and PCA projections");
  s_an->add_option("--bundle", an.bundle, "Trajectory bundle (.hbtj)")->required();
  s_an->add_option("--pca-out", an.pca_out, "CSV file for PCA projections of all samples");
  s_an->add_option("--pca-layer", an.pca_layer, "Layer for PCA: index, mid or last");
  s_an->add_option("--pca-k", an.pca_k, "Number of components")->check(CLI::Range(1, 3));
  add_output(s_an, an.out);

  DetectOpts de;
  auto* s_de = app.add_subcommand("detect", "Layerwise centroid and Mahalanobis detection with bootstrap CIs");
  s_de->add_option("--bundle", de.bundle, "Trajectory bundle (.hbtj)")->required();
  s_de->add_option("--splits", de.cfg.splits, "Random stratified splits")->check(CLI::PositiveNumber);
  s_de->add_option("--seed", de.cfg.seed, "Master seed");
  s_de->add_option("--train-fraction", de.cfg.train_fraction, "Training share")->check(CLI::Range(0.0, 1.0));
  s_de->add_option("--theta", de.cfg.theta, "Basin-exists threshold on the best-layer centroid AUROC");
  s_de->add_option("--n-boot", de.cfg.n_boot, "Bootstrap resamples per split")->check(CLI::PositiveNumber);
  add_output(s_de, de.out);

  MultiOpts mb;
  auto* s_mb = app.add_subcommand("multibasin", "K-means partition of hallucinated states into basins");
  s_mb->add_option("--bundle", mb.bundle, "Trajectory bundle (.hbtj)")->required();
  s_mb->add_option("--K", mb.k, "Number of basins")->check(CLI::PositiveNumber);
  s_mb->add_option("--tau", mb.tau, "Collapse threshold on within/total variance");
  s_mb->add_option("--layer", mb.layer, "Layer index, mid or last");
  s_mb->add_option("--restarts", mb.restarts, "K-means restarts")->check(CLI::PositiveNumber);
  s_mb->add_option("--max-iter", mb.max_iter, "Lloyd iterations per restart")->check(CLI::PositiveNumber);
  s_mb->add_option("--seed", mb.seed, "Master seed");
  s_mb->add_option("--sweep", mb.sweep, "Also report inertia for K = 1..N (0 = off)");
  s_mb->add_option("--pca-out", mb.pca_out, "CSV file for 2-D PCA projections with basin ids");
  add_output(s_mb, mb.out);

  InterveneOpts iv;
  auto* s_iv = app.add_subcommand("intervene", "Dose-response of interpolation toward the basin with controls");
  s_iv->add_option("--bundle", iv.bundle, "Trajectory bundle (.hbtj)")->required();
  s_iv->add_option("--grid", iv.grid, "Interpolation grid first:last:step");
  s_iv->add_option("--layer", iv.layer, "Layer index, mid or last");
  s_iv->add_option("--seed", iv.seed, "Master seed");
  s_iv->add_option("--train-fraction", iv.train_fraction, "Training share")->check(CLI::Range(0.0, 1.0));
  s_iv->add_option("--l2", iv.l2, "L2 strength of the probe")->check(CLI::NonNegativeNumber);
  add_output(s_iv, iv.out);

  SteerOpts st;
  auto* s_st = app.add_subcommand("steer-fit", "Fit steering vectors and the adaptive strength controller");
  s_st->add_option("--bundle", st.bundle, "Trajectory bundle (.hbtj)")->required();
  s_st->add_option("--ref", st.ref, "Context bundle for the reference (default: hallucinated training samples)");
  s_st->add_option("--layers", st.layers, "auto, mid, last or a comma list");
  s_st->add_option("--lambda-max", st.lambda_max, "Upper bound of the steering strength")
      ->check(CLI::NonNegativeNumber);
  s_st->add_option("--train-fraction", st.train_fraction, "Training share")->check(CLI::Range(0.0, 1.0));
  s_st->add_option("--seed", st.seed, "Master seed");
  s_st->add_option("--l2", st.l2, "L2 strength of the controller fit")->check(CLI::NonNegativeNumber);
  s_st->add_option("--out", st.out, "Artifact file, - for stdout");

  SimulateOpts si;
  auto* s_si = app.add_subcommand("simulate", "Numerical checks of the contraction results on synthetic maps");
  s_si->add_option("--theorem", si.theorem, "decay, emergence, separation, manifold, insensitivity or taskvar")
      ->required()
      ->check(CLI::IsMember({"decay", "emergence", "separation", "manifold", "insensitivity", "taskvar"}));
  s_si->add_option("--seed", si.seed, "Master seed");
  s_si->add_option("--dim", si.dim, "State dimension")->check(CLI::PositiveNumber);
  s_si->add_option("--layers", si.layers, "Layers (steps) to simulate")->check(CLI::PositiveNumber);
  s_si->add_option("--n", si.n, "Trajectories, starts or draws")->check(CLI::PositiveNumber);
  s_si->add_option("--alpha", si.alpha, "decay: declared contraction constant");
  s_si->add_option("--rho", si.rho, "decay: spectral radius of the map (0 = alpha)");
  s_si->add_option("--r0", si.r0, "Initial radius");
  s_si->add_option("--l-ln", si.l_ln, "emergence: LayerNorm Lipschitz constant");
  s_si->add_option("--l-a", si.l_a, "emergence: attention Lipschitz constant");
  s_si->add_option("--l-f", si.l_f, "emergence: FFN Lipschitz constant");
  s_si->add_option("--eps", si.eps, "emergence: attention deviation; insensitivity: perturbation size");
  s_si->add_option("--tangent", si.tangent, "manifold: tangent dimension");
  s_si->add_option("--alpha-n", si.alpha_n, "manifold: normal contraction");
  s_si->add_option("--eps-t", si.eps_t, "manifold: tangential slack");
  s_si->add_option("--draws", si.draws, "manifold: random spec draws")->check(CLI::PositiveNumber);
  s_si->add_option("--law", si.law, "separation: point, exponential, uniform or all");
  s_si->add_option("--r", si.r, "separation and insensitivity: basin radius");
  s_si->add_option("--rho-star", si.rho_star, "separation: mean factual radial distance");
  s_si->add_option("--readout", si.readout, "insensitivity: linear, softmax or constant");
  s_si->add_option("--outputs", si.outputs, "insensitivity: readout output dimension");
  s_si->add_option("--modes", si.modes, "taskvar: answer cardinalities");
  s_si->add_option("--out", si.out, "Output file, - for stdout");

  ReportOpts rp;
  auto* s_rp = app.add_subcommand("report", "Reference radii, trapping rates, fixed-point residuals, entropies");
  s_rp->add_option("--bundle", rp.bundle, "Trajectory bundle (.hbtj)")->required();
  s_rp->add_option("--ref", rp.ref, "Context bundle for the reference (default: hallucinated samples)");
  s_rp->add_option("--radius-quantile", rp.radius_quantile, "Quantile of reference distances used as radius")
      ->check(CLI::Range(0.0, 1.0));
  s_rp->add_option("--eps", rp.eps, "Division guard of the contraction ratio");
  add_output(s_rp, rp.out);

  SynthOpts sy;
  auto* s_sy = app.add_subcommand("synth", "Write a synthetic bundle with known geometry");
  s_sy->add_option("--kind", sy.kind, "factoid, generation or misconception")
      ->check(CLI::IsMember({"factoid", "generation", "misconception"}));
  s_sy->add_option("--n", sy.cfg.n, "Samples");
  s_sy->add_option("--layers", sy.cfg.n_layers, "Transformer layers L");
  s_sy->add_option("--dim", sy.cfg.dim, "Hidden dimension");
  s_sy->add_option("--hall-fraction", sy.cfg.hall_fraction, "Share of hallucinated samples");
  s_sy->add_option("--modes", sy.cfg.answer_modes, "Answer cardinality |A|");
  s_sy->add_option("--sigma-sig", sy.cfg.sigma_sig, "Per-axis factual signal scale");
  s_sy->add_option("--sigma-0", sy.cfg.sigma_0, "Hallucination noise scale");
  s_sy->add_option("--d-hall", sy.cfg.d_hall, "Hallucination noise dimension");
  s_sy->add_option("--separation", sy.cfg.separation, "Distance of the factual mean from the reference");
  s_sy->add_option("--contraction", sy.cfg.contraction, "Per-layer contraction factor");
  s_sy->add_option("--embed-scale", sy.cfg.embed_scale, "Embedding noise scale");
  s_sy->add_option("--clusters", sy.cfg.clusters, "misconception: number of basins");
  s_sy->add_option("--cluster-distance", sy.cfg.cluster_distance, "misconception: distance between centers");
  s_sy->add_option("--cluster-sigma", sy.cfg.cluster_sigma, "misconception: per-axis spread");
  s_sy->add_flag("--attn-entropy", sy.cfg.attn_entropy, "Also store attention entropies");
  s_sy->add_option("--seed", sy.cfg.seed, "Seed");
  s_sy->add_option("--out", sy.out, "Bundle file")->required();
  s_sy->add_option("--contexts", sy.contexts, "Also write this many context trajectories");
  s_sy->add_option("--ctx-out", sy.ctx_out, "Context bundle file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  const std::size_t nt = resolve_threads(threads);
  std::string command = "hbasin";
  try {
    if (s_an->parsed()) {
      command = "analyze";
      cmd_analyze(an, nt, out);
    } else if (s_de->parsed()) {
      command = "detect";
      cmd_detect(de, nt, out);
    } else if (s_mb->parsed()) {
      command = "multibasin";
      cmd_multibasin(mb, nt, out);
    } else if (s_iv->parsed()) {
      command = "intervene";
      cmd_intervene(iv, nt, out);
    } else if (s_st->parsed()) {
      command = "steer-fit";
      cmd_steer_fit(st, out);
    } else if (s_si->parsed()) {
      command = "simulate";
      cmd_simulate(si, nt, out);
    } else if (s_rp->parsed()) {
      command = "report";
      cmd_report(rp, out);
    } else if (s_sy->parsed()) {
      command = "synth";
      cmd_synth(sy, out);
    }
  } catch (const std::exception& e) {
    print_error(err, command, e.what());
    return kExitFailure;
  }
  return kExitOk;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"hbasin"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace hbasin::cli
