#include "hbasin/report_io.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include <openssl/evp.h>

namespace hbasin {

double round_sig(double v, int digits) {
  if (!std::isfinite(v) || v == 0.0) return v;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return std::strtod(buf, nullptr);
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", kSignificantDigits, v == 0.0 ? 0.0 : v);
  return buf;
}

Json rounded(const Json& j) {
  if (j.is_object()) {
    Json out = Json::object();
    for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = rounded(it.value());
    return out;
  }
  if (j.is_array()) {
    Json out = Json::array();
    for (const auto& e : j) out.push_back(rounded(e));
    return out;
  }
  if (j.is_number_float()) {
    const double v = j.get<double>();
    if (!std::isfinite(v)) return nullptr;
    return round_sig(v == 0.0 ? 0.0 : v);
  }
  return j;
}

std::string dump_json(const Json& j) { return rounded(j).dump(2) + "\n"; }

std::string git_blob_sha1(std::span<const std::uint8_t> bytes) {
  const std::string head = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw BasinError("sha1: out of memory");
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, head.data(), head.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw BasinError("sha1: digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 15];
  }
  return out;
}

std::string file_blob_sha1(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BasinError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return git_blob_sha1(bytes);
}

std::string CsvTable::str() const {
  std::ostringstream os;
  for (const auto& [k, v] : comments) os << "# " << k << '=' << v << '\n';
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
    os << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return os.str();
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  throw BasinError("csv: missing column " + name);
}

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream is(text);
  std::string line;
  bool have_header = false;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::string body = line.substr(1);
      if (!body.empty() && body[0] == ' ') body.erase(0, 1);
      const auto eq = body.find('=');
      if (eq == std::string::npos) t.comments.emplace_back(body, "");
      else t.comments.emplace_back(body.substr(0, eq), body.substr(eq + 1));
      continue;
    }
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (!have_header) {
      t.header = std::move(cells);
      have_header = true;
    } else {
      if (cells.size() != t.header.size()) throw BasinError("csv: row width does not match the header");
      t.rows.push_back(std::move(cells));
    }
  }
  if (!have_header) throw BasinError("csv: no header");
  return t;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BasinError("cannot write " + path.string());
  out << text;
  if (!out.flush()) throw BasinError("write failed: " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BasinError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Json to_json(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Json to_json(const Matrix& m) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(to_json(Vector(m.row(i).transpose())));
  return a;
}

Json to_json(const Interval& ci) { return {{"low", ci.low}, {"high", ci.high}, {"widened", ci.widened}}; }

Json to_json(const DetectionResult& r) {
  Json layers = Json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"layer", l.layer},
                      {"auroc_centroid", l.auroc_centroid},
                      {"auroc_maha", l.auroc_maha},
                      {"ci95_centroid", to_json(l.ci_centroid)},
                      {"ci95_maha", to_json(l.ci_maha)},
                      {"split_auroc_centroid", l.split_auroc_centroid},
                      {"split_auroc_maha", l.split_auroc_maha}});
  }
  return {{"layers", layers},
          {"best_layer", r.best_layer},
          {"n_samples", r.n_samples},
          {"basin_exists", r.basin_exists},
          {"theta_basin", r.config.theta}};
}

Json to_json(const SeparationReport& r) {
  Json layers = Json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"layer", l.layer},
                      {"rho_var", l.rho_var.infinite ? Json(nullptr) : Json(l.rho_var.value)},
                      {"rho_var_infinite", l.rho_var.infinite},
                      {"var_fact", l.rho_var.var_fact},
                      {"var_hall", l.rho_var.var_hall},
                      {"fisher", l.fisher_degenerate ? Json(nullptr) : Json(l.fisher)},
                      {"fisher_degenerate", l.fisher_degenerate},
                      {"basin_sep", l.basin_sep},
                      {"n_fact", l.n_fact},
                      {"n_hall", l.n_hall}});
  }
  return {{"layers", layers}};
}

Json to_json(const ReferenceState& ref) {
  return {{"n_contexts", ref.n_contexts}, {"sigma_ctx", ref.sigma_ctx}, {"radius", ref.radius}};
}

namespace {
Json class_trapping(const ClassTrapping& c) {
  return {{"n", c.n},
          {"entered", c.entered},
          {"stayed", c.stayed},
          {"entry_rate", c.entry_rate},
          {"irreversibility", c.irreversibility},
          {"escape_rate", c.escape_rate},
          {"mean_kappa", c.mean_kappa}};
}
}  // namespace

Json to_json(const TrappingReport& r) {
  return {{"factual", class_trapping(r.fact)}, {"hallucinated", class_trapping(r.hall)}};
}

Json to_json(const FixedPointResidual& r) {
  return {{"residual", r.residual},
          {"ratio", r.ratio},
          {"absolute", r.absolute},
          {"drift_from_start", r.drift_from_start},
          {"non_fixed_point", r.non_fixed_point},
          {"threshold", r.threshold}};
}

Json to_json(const EntropyStats& s) {
  return {{"mean_fact", s.mean_fact}, {"std_fact", s.std_fact}, {"mean_hall", s.mean_hall},
          {"std_hall", s.std_hall},   {"n_fact", s.n_fact},     {"n_hall", s.n_hall}};
}

Json to_json(const BasinPartition& p) {
  return {{"k", p.k},
          {"k_requested", p.k_requested},
          {"centers", to_json(p.centers)},
          {"sigma2", p.sigma2},
          {"within_var", p.within_var},
          {"total_var", p.total_var},
          {"tau", p.tau},
          {"collapsed", p.collapsed},
          {"inertia", p.inertia},
          {"reduce_k", p.reduce_k},
          {"assignments", p.assignments}};
}

Json to_json(const BasinClassifier& c) {
  return {{"holdout_accuracy", c.holdout_accuracy},
          {"overall_accuracy", c.overall_accuracy},
          {"chance", c.chance},
          {"chance_margin", c.chance_margin},
          {"near_chance", c.near_chance},
          {"n_train", c.n_train},
          {"n_holdout", c.n_holdout}};
}

Json to_json(const DoseResponse& d) {
  Json dirs = Json::object();
  for (Direction dir : kDirections) {
    const auto i = static_cast<std::size_t>(dir);
    dirs[to_string(dir)] = {{"p_hall", d.p_hall[i]},
                            {"fold_change", d.fold_change[i]},
                            {"max_fold", d.max_fold[i]},
                            {"direction_sign", d.direction_sign[i]},
                            {"monotone", d.monotone[i]}};
  }
  return {{"layer", d.layer},
          {"n_samples", d.n_samples},
          {"alphas", d.alphas},
          {"directions", dirs},
          {"orthogonal_cosine", d.orthogonal_cosine}};
}

Json to_json(const RadiusDecayReport& r) {
  return {{"alpha_bar", r.alpha_bar},
          {"r0", r.r0},
          {"layer0", r.layer0},
          {"last_layer", r.last_layer},
          {"n_trajectories", r.n_trajectories},
          {"n_violating", r.n_violating},
          {"worst_excess", r.worst_excess},
          {"counterexample", r.counterexample},
          {"collapse_steps", r.collapse_steps},
          {"collapse_in_horizon", r.collapse_in_horizon},
          {"collapse_holds", r.collapse_holds},
          {"passed", r.passed}};
}

Json to_json(const EmergenceReport& r) {
  return {{"alpha", r.alpha},
          {"offset", r.offset},
          {"abstained", r.abstained},
          {"n_starts", r.n_starts},
          {"n_checks", r.n_checks},
          {"n_violations", r.n_violations},
          {"worst_ratio", r.worst_ratio},
          {"final_radius_max", r.final_radius_max},
          {"limit_radius", r.limit_radius},
          {"passed", r.passed}};
}

Json to_json(const ManifoldReport& r) {
  return {{"horizon", r.horizon},
          {"n_trials", r.n_trials},
          {"normal_ratio_min", r.normal_ratio_min},
          {"normal_ratio_max", r.normal_ratio_max},
          {"tangent_ratio_min", r.tangent_ratio_min},
          {"tangent_ratio_max", r.tangent_ratio_max},
          {"passed", r.passed}};
}

Json to_json(const SeparationLemmaReport& r) {
  return {{"law", to_string(r.law)}, {"r", r.r},         {"rho_star", r.rho_star},
          {"draws", r.draws},        {"p_hat", r.p_hat}, {"std_error", r.std_error},
          {"bound", r.bound},        {"mean_radius", r.mean_radius}, {"passed", r.passed}};
}

Json to_json(const InsensitivityReport& r) {
  return {{"readout", r.readout},         {"kappa", r.kappa},
          {"eps", r.eps},                 {"r", r.r},
          {"lipschitz_ok", r.lipschitz_ok}, {"lipschitz_worst", r.lipschitz_worst},
          {"draws", r.draws},             {"max_change", r.max_change},
          {"bound", r.bound},             {"tightness", r.tightness},
          {"passed", r.passed}};
}

CsvTable sweep_table(const std::vector<SweepRow>& rows) {
  CsvTable t;
  t.header = {"layer", "auroc_centroid", "ci_centroid_low", "ci_centroid_high", "auroc_maha",
              "ci_maha_low", "ci_maha_high", "n", "basin"};
  for (const auto& r : rows) {
    t.rows.push_back({std::to_string(r.layer), format_number(r.auroc_centroid), format_number(r.ci_centroid_low),
                      format_number(r.ci_centroid_high), format_number(r.auroc_maha), format_number(r.ci_maha_low),
                      format_number(r.ci_maha_high), std::to_string(r.n), r.basin ? "1" : "0"});
  }
  return t;
}

std::vector<SweepRow> sweep_from_table(const CsvTable& t) {
  const std::size_t c_layer = t.column("layer"), c_ac = t.column("auroc_centroid"),
                    c_acl = t.column("ci_centroid_low"), c_ach = t.column("ci_centroid_high"),
                    c_am = t.column("auroc_maha"), c_aml = t.column("ci_maha_low"), c_amh = t.column("ci_maha_high"),
                    c_n = t.column("n"), c_b = t.column("basin");
  std::vector<SweepRow> out;
  for (const auto& r : t.rows) {
    SweepRow s;
    s.layer = std::stoul(r[c_layer]);
    s.auroc_centroid = std::stod(r[c_ac]);
    s.ci_centroid_low = std::stod(r[c_acl]);
    s.ci_centroid_high = std::stod(r[c_ach]);
    s.auroc_maha = std::stod(r[c_am]);
    s.ci_maha_low = std::stod(r[c_aml]);
    s.ci_maha_high = std::stod(r[c_amh]);
    s.n = std::stoul(r[c_n]);
    s.basin = r[c_b] == "1";
    out.push_back(s);
  }
  return out;
}

CsvTable separation_table(const SeparationReport& r) {
  CsvTable t;
  t.header = {"layer", "rho_var", "var_fact", "var_hall", "fisher", "basin_sep", "n_fact", "n_hall"};
  for (const auto& l : r.layers) {
    t.rows.push_back({std::to_string(l.layer), format_number(l.rho_var.infinite ? INFINITY : l.rho_var.value),
                      format_number(l.rho_var.var_fact), format_number(l.rho_var.var_hall),
                      l.fisher_degenerate ? "nan" : format_number(l.fisher), format_number(l.basin_sep),
                      std::to_string(l.n_fact), std::to_string(l.n_hall)});
  }
  return t;
}

CsvTable dose_table(const DoseResponse& d) {
  CsvTable t;
  t.header = {"alpha", "p_basin", "p_random", "p_orthogonal", "fold_basin", "fold_random", "fold_orthogonal"};
  for (std::size_t a = 0; a < d.alphas.size(); ++a) {
    std::vector<std::string> row{format_number(d.alphas[a])};
    for (const auto& p : d.p_hall) row.push_back(format_number(p[a]));
    for (const auto& f : d.fold_change) row.push_back(format_number(f[a]));
    t.rows.push_back(std::move(row));
  }
  return t;
}

CsvTable pca_table(const PcaResult& pca, std::span<const std::size_t> sample_index, const Labels& labels,
                   std::span<const std::size_t> basin) {
  CsvTable t;
  t.header = {"sample", "label"};
  for (Eigen::Index k = 0; k < pca.projections.cols(); ++k) t.header.push_back("pc" + std::to_string(k + 1));
  if (!basin.empty()) t.header.push_back("basin");
  for (Eigen::Index i = 0; i < pca.projections.rows(); ++i) {
    const auto s = sample_index[static_cast<std::size_t>(i)];
    std::vector<std::string> row{std::to_string(s), std::to_string(static_cast<int>(labels[s]))};
    for (Eigen::Index k = 0; k < pca.projections.cols(); ++k) row.push_back(format_number(pca.projections(i, k)));
    if (!basin.empty()) row.push_back(std::to_string(basin[static_cast<std::size_t>(i)]));
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace hbasin
