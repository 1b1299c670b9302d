#include "hbasin/traj_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "hbasin/rng.hpp"

namespace hbasin {

namespace {

constexpr char kMagic[4] = {'H', 'B', 'T', 'J'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kPreamble = 16;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

void put_floats(std::vector<std::uint8_t>& out, const std::vector<float>& values) {
  for (float f : values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
}

std::vector<float> get_floats(const std::uint8_t* p, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i));
  return out;
}

bool all_finite(const std::vector<float>& v) {
  return std::all_of(v.begin(), v.end(), [](float f) { return std::isfinite(f); });
}

}  // namespace

TrajectoryBundle TrajectoryBundle::zeros(std::size_t n, std::size_t n_layers, std::size_t dim) {
  TrajectoryBundle b;
  b.n_samples = n;
  b.n_layers = n_layers;
  b.dim = dim;
  b.states.assign(n * (n_layers + 1) * dim, 0.0f);
  b.labels.assign(n, kFactual);
  return b;
}

Vector TrajectoryBundle::state(std::size_t sample, std::size_t layer) const {
  const auto r = row(sample, layer);
  Vector v(static_cast<Eigen::Index>(dim));
  for (std::size_t k = 0; k < dim; ++k) v[static_cast<Eigen::Index>(k)] = r[k];
  return v;
}

std::size_t TrajectoryBundle::count(std::uint8_t label) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

void TrajectoryBundle::validate() const {
  if (dim == 0) throw BasinError("invalid bundle: dim must be positive");
  if (states.size() != n_samples * layer_count() * dim) throw BasinError("invalid states: shape mismatch");
  if (!all_finite(states)) throw BasinError("invalid states: non-finite value");
  if (labels.size() != n_samples) throw BasinError("invalid labels: length differs from sample count");
  for (auto l : labels)
    if (l > 1) throw BasinError("invalid labels: value outside {0,1}");
  if (attn_entropy) {
    if (attn_entropy->size() != n_samples * n_layers) throw BasinError("invalid attn_entropy: shape mismatch");
    for (float h : *attn_entropy)
      if (!std::isfinite(h) || h < 0.0f) throw BasinError("invalid attn_entropy: negative or non-finite");
  }
  if (sample_ids && sample_ids->size() != n_samples) throw BasinError("invalid sample_ids: length mismatch");
}

std::vector<std::uint8_t> encode_bundle(const TrajectoryBundle& b) {
  b.validate();
  const std::size_t states_bytes = b.states.size() * 4;
  const std::size_t entropy_bytes = b.attn_entropy ? b.attn_entropy->size() * 4 : 0;

  nlohmann::json header;
  header["model_id"] = b.model_id;
  header["dataset_id"] = b.dataset_id;
  header["n_samples"] = b.n_samples;
  header["n_layers"] = b.n_layers;
  header["dim"] = b.dim;
  header["has_attn_entropy"] = b.attn_entropy.has_value();
  header["has_sample_ids"] = b.sample_ids.has_value();
  header["arrays"]["states"] = {{"offset", 0}, {"dtype", "f32le"}, {"shape", {b.n_samples, b.layer_count(), b.dim}}};
  if (b.attn_entropy)
    header["arrays"]["attn_entropy"] = {
        {"offset", states_bytes}, {"dtype", "f32le"}, {"shape", {b.n_samples, b.n_layers}}};
  header["arrays"]["labels"] = {{"offset", states_bytes + entropy_bytes}, {"dtype", "u8"}, {"shape", {b.n_samples}}};
  if (b.sample_ids) header["sample_ids"] = *b.sample_ids;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kPreamble + text.size() + states_bytes + entropy_bytes + b.n_samples);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  put_floats(out, b.states);
  if (b.attn_entropy) put_floats(out, *b.attn_entropy);
  out.insert(out.end(), b.labels.begin(), b.labels.end());
  return out;
}

TrajectoryBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPreamble) throw BasinError("truncated: file shorter than preamble");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw BasinError("bad magic");
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kVersion) throw BasinError("version mismatch: expected 1, found " + std::to_string(version));
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - kPreamble) throw BasinError("truncated: header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kPreamble, bytes.begin() + kPreamble + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw BasinError(std::string("malformed header: ") + e.what());
  }

  TrajectoryBundle b;
  try {
    b.model_id = header.at("model_id").get<std::string>();
    b.dataset_id = header.at("dataset_id").get<std::string>();
    b.n_samples = header.at("n_samples").get<std::size_t>();
    b.n_layers = header.at("n_layers").get<std::size_t>();
    b.dim = header.at("dim").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw BasinError(std::string("malformed header: ") + e.what());
  }

  const std::uint8_t* payload = bytes.data() + kPreamble + header_len;
  const std::size_t payload_size = bytes.size() - kPreamble - header_len;
  // Shapes larger than the payload are rejected before any size arithmetic can overflow.
  const std::size_t per_sample = b.layer_count() * b.dim;
  if (b.dim != 0 && (b.layer_count() > payload_size / b.dim || b.n_samples > payload_size / (per_sample * 4)))
    throw BasinError("truncated: payload for states");
  if (!header.contains("arrays") || !header["arrays"].is_object()) throw BasinError("malformed header: no arrays");
  const auto& arrays = header["arrays"];
  auto locate = [&](const char* name, std::size_t nbytes) -> const std::uint8_t* {
    std::size_t offset = 0;
    try {
      offset = arrays.at(name).at("offset").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw BasinError(std::string("malformed header: ") + e.what());
    }
    if (offset > payload_size || nbytes > payload_size - offset)
      throw BasinError(std::string("truncated: payload for ") + name);
    return payload + offset;
  };

  const std::size_t n_states = b.n_samples * b.layer_count() * b.dim;
  b.states = get_floats(locate("states", n_states * 4), n_states);
  if (header.value("has_attn_entropy", false)) {
    const std::size_t n_ent = b.n_samples * b.n_layers;
    b.attn_entropy = get_floats(locate("attn_entropy", n_ent * 4), n_ent);
  }
  const std::uint8_t* lab = locate("labels", b.n_samples);
  b.labels.assign(lab, lab + b.n_samples);
  if (header.value("has_sample_ids", false)) {
    try {
      b.sample_ids = header.at("sample_ids").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw BasinError(std::string("malformed header: ") + e.what());
    }
  }
  b.validate();
  return b;
}

void write_bundle(const TrajectoryBundle& bundle, const std::filesystem::path& path) {
  const auto bytes = encode_bundle(bundle);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BasinError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw BasinError("write failed: " + path.string());
}

TrajectoryBundle read_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BasinError("cannot open bundle: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_bundle(bytes);
}

SplitIndex stratified_split(const Labels& labels, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0)) throw BasinError("empty train split: fraction must be > 0");
  if (!(fraction < 1.0)) throw BasinError("empty test split: fraction must be < 1");
  SplitIndex split;
  split.seed = seed;
  split.fraction = fraction;
  for (std::uint8_t c : {kFactual, kHallucinated}) {
    auto idx = indices_with_label(labels, c);
    if (idx.size() < 2) throw BasinError("stratified split needs at least 2 samples per class");
    Rng rng(derive_seed(seed, {stream::kSplit, c}));
    shuffle_in_place(idx, rng);
    auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    split.train_idx.insert(split.train_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.test_idx.insert(split.test_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(split.train_idx.begin(), split.train_idx.end());
  std::sort(split.test_idx.begin(), split.test_idx.end());
  return split;
}

std::vector<std::size_t> indices_with_label(const Labels& labels, std::uint8_t label,
                                            std::span<const std::size_t> pool) {
  std::vector<std::size_t> out;
  if (pool.empty()) {
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) out.push_back(i);
  } else {
    for (auto i : pool)
      if (labels.at(i) == label) out.push_back(i);
  }
  return out;
}

Matrix gather_rows(const TrajectoryBundle& bundle, std::size_t layer, std::span<const std::size_t> indices) {
  if (layer > bundle.n_layers)
    throw BasinError("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(bundle.n_layers) + "]");
  Matrix m(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(bundle.dim));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= bundle.n_samples) throw BasinError("sample index out of range");
    const auto src = bundle.row(indices[r], layer);
    for (std::size_t k = 0; k < bundle.dim; ++k) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = src[k];
  }
  return m;
}

Matrix layer_slice(const TrajectoryBundle& bundle, std::size_t layer, ClassFilter which) {
  std::vector<std::size_t> idx;
  switch (which) {
    case ClassFilter::kAll:
      idx.resize(bundle.n_samples);
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      break;
    case ClassFilter::kFactual:
      idx = indices_with_label(bundle.labels, kFactual);
      if (idx.empty()) throw BasinError("empty class: no factual samples");
      break;
    case ClassFilter::kHallucinated:
      idx = indices_with_label(bundle.labels, kHallucinated);
      if (idx.empty()) throw BasinError("empty class: no hallucinated samples");
      break;
  }
  return gather_rows(bundle, layer, idx);
}

}  // namespace hbasin
