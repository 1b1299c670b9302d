#pragma once

// Trajectory bundles: last-token hidden states for N samples over layers
// 0..L (layer 0 is the embedding output), plus binary labels.
//
// On-disk "HBTJ" container, all integers little-endian:
//   bytes 0..3   magic "HBTJ"
//   bytes 4..7   u32 format version (= 1)
//   bytes 8..15  u64 header length H
//   H bytes      UTF-8 JSON header (ids, shapes, payload offsets, flags)
//   payload      states  f32le [N, L+1, d]
//                attn_entropy f32le [N, L]   (only when present)
//                labels  u8 [N]
// Payload offsets in the header are relative to the first payload byte.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hbasin/common.hpp"

namespace hbasin {

struct TrajectoryBundle {
  std::string model_id;
  std::string dataset_id;
  std::size_t n_samples = 0;
  std::size_t n_layers = 0;  // L; states hold L+1 layers
  std::size_t dim = 0;
  std::vector<float> states;  // row-major [N, L+1, d]
  Labels labels;
  std::optional<std::vector<float>> attn_entropy;  // [N, L]
  std::optional<std::vector<std::string>> sample_ids;

  /// Zero-filled bundle with the given shape; labels default to factual.
  static TrajectoryBundle zeros(std::size_t n, std::size_t n_layers, std::size_t dim);

  std::size_t layer_count() const { return n_layers + 1; }

  std::span<const float> row(std::size_t sample, std::size_t layer) const {
    return {states.data() + (sample * layer_count() + layer) * dim, dim};
  }
  std::span<float> row(std::size_t sample, std::size_t layer) {
    return {states.data() + (sample * layer_count() + layer) * dim, dim};
  }
  /// Hidden state promoted to double.
  Vector state(std::size_t sample, std::size_t layer) const;

  std::size_t count(std::uint8_t label) const;

  /// Throws BasinError when any invariant fails ("invalid states", ...).
  void validate() const;

  bool operator==(const TrajectoryBundle&) const = default;
};

struct SplitIndex {
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;
  std::uint64_t seed = 0;
  double fraction = 0.0;
};

enum class ClassFilter { kAll, kFactual, kHallucinated };

void write_bundle(const TrajectoryBundle& bundle, const std::filesystem::path& path);
TrajectoryBundle read_bundle(const std::filesystem::path& path);

/// Serialized byte image (exactly what write_bundle puts on disk).
std::vector<std::uint8_t> encode_bundle(const TrajectoryBundle& bundle);
TrajectoryBundle decode_bundle(std::span<const std::uint8_t> bytes);

/// Stratified split: indices of each class are shuffled with a seeded
/// Fisher-Yates pass and the first round(fraction * n_c) go to train (clamped
/// so that both sides keep at least one sample of each class). Both index
/// lists are returned sorted.
SplitIndex stratified_split(const Labels& labels, double fraction, std::uint64_t seed);
inline SplitIndex stratified_split(const TrajectoryBundle& b, double fraction, std::uint64_t seed) {
  return stratified_split(b.labels, fraction, seed);
}

/// States of one layer as an [n, d] matrix for the selected class.
Matrix layer_slice(const TrajectoryBundle& bundle, std::size_t layer, ClassFilter which = ClassFilter::kAll);
/// States of one layer for an explicit list of sample indices.
Matrix gather_rows(const TrajectoryBundle& bundle, std::size_t layer, std::span<const std::size_t> indices);
/// Indices (subset of `pool`, or all samples when empty) carrying `label`.
std::vector<std::size_t> indices_with_label(const Labels& labels, std::uint8_t label,
                                            std::span<const std::size_t> pool = {});

}  // namespace hbasin
