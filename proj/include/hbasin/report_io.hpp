#pragma once

// Machine-readable reports. JSON objects have sorted keys and every double is
// rounded to 6 significant digits before printing, so reruns are
// byte-identical. CSV tables start with "# key=value" comment lines.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hbasin/detection.hpp"
#include "hbasin/intervention.hpp"
#include "hbasin/multi_basin.hpp"
#include "hbasin/reference_geometry.hpp"
#include "hbasin/separation_metrics.hpp"
#include "hbasin/synthetic_dynamics.hpp"

namespace hbasin {

using Json = nlohmann::json;

inline constexpr int kSignificantDigits = 6;

double round_sig(double v, int digits = kSignificantDigits);
/// %.6g, with "inf", "-inf" and "nan" for non-finite values.
std::string format_number(double v);

/// Recursively rounds doubles; non-finite doubles become null.
Json rounded(const Json& j);
/// rounded(j) printed with 2-space indentation and a trailing newline.
std::string dump_json(const Json& j);

/// SHA-1 of "blob <size>\0" + bytes, as git hash-object computes it.
std::string git_blob_sha1(std::span<const std::uint8_t> bytes);
std::string file_blob_sha1(const std::filesystem::path& path);

struct CsvTable {
  std::vector<std::pair<std::string, std::string>> comments;  // "# key=value"
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string str() const;
  /// Column index by name; throws BasinError when missing.
  std::size_t column(const std::string& name) const;
};
/// Plain comma separated values (no quoting), '#' lines as comments.
CsvTable parse_csv(const std::string& text);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

Json to_json(const Vector& v);
Json to_json(const Matrix& m);  // array of rows
Json to_json(const Interval& ci);
Json to_json(const DetectionResult& r);
Json to_json(const SeparationReport& r);
Json to_json(const ReferenceState& ref);  // per-layer dispersion and radius, no mu
Json to_json(const TrappingReport& r);
Json to_json(const FixedPointResidual& r);
Json to_json(const EntropyStats& s);
Json to_json(const BasinPartition& p);
Json to_json(const BasinClassifier& c);
Json to_json(const DoseResponse& d);
Json to_json(const RadiusDecayReport& r);
Json to_json(const EmergenceReport& r);
Json to_json(const ManifoldReport& r);
Json to_json(const SeparationLemmaReport& r);
Json to_json(const InsensitivityReport& r);

/// One row per layer: layer, centroid AUROC and CI, Mahalanobis AUROC and CI, n, basin.
CsvTable sweep_table(const std::vector<SweepRow>& rows);
std::vector<SweepRow> sweep_from_table(const CsvTable& t);
/// One row per layer: layer, rho_var, var_fact, var_hall, fisher, basin_sep, n_fact, n_hall.
CsvTable separation_table(const SeparationReport& r);
/// One row per alpha: p_hall and fold change for each direction.
CsvTable dose_table(const DoseResponse& d);
/// sample, label, pc1..pck, plus basin when assignments are given.
CsvTable pca_table(const PcaResult& pca, std::span<const std::size_t> sample_index, const Labels& labels,
                   std::span<const std::size_t> basin = {});

}  // namespace hbasin
