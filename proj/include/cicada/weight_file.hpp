#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cicada/catalog.hpp"
#include "cicada/common.hpp"

namespace cicada {

// On-disk layout, all fields packed:
//   u32 magic 0x43494341 ("CICA", big-endian)
//   u16 version (=1), u16 dtype (0 = F32)     little-endian
//   u32 layer_index, u64 element_count        little-endian
//   u32 crc32(payload)                        little-endian
//   payload: element_count little-endian IEEE-754 binary32
inline constexpr std::uint32_t kShardMagic = 0x43494341u;
inline constexpr std::uint16_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderBytes = 24;

enum class DType : std::uint16_t { F32 = 0 };

struct WeightShard {
  LayerIndex layer_index = 0;
  DType dtype = DType::F32;
  std::uint64_t element_count = 0;
  std::vector<std::byte> payload;
  std::uint32_t checksum = 0;

  /// Decodes element k of the payload.
  float value(std::size_t k) const;
  std::vector<float> values() const;
  bool checksum_ok() const noexcept;

  bool operator==(const WeightShard&) const = default;
};

WeightShard make_shard(LayerIndex layer, std::span<const float> values);

std::vector<std::byte> serialize_shard(const WeightShard& shard);

/// Throws FormatError (magic/version/dtype), Truncated, CorruptShard.
WeightShard parse_weight_shard(std::span<const std::byte> bytes);

WeightShard read_shard_file(const std::filesystem::path& path);

/// Deterministic payload for a layer: SplitMix64 seeded with
/// mix_seed(seed, layer_index), each value symmetric_float() / sqrt(cols).
std::vector<float> generate_layer_weights(const LayerSpec& layer, std::uint64_t seed);

struct ManifestEntry {
  std::filesystem::path path;
  LayerIndex layer_index = 0;
  std::uint64_t element_count = 0;
  std::uint32_t crc32 = 0;

  bool operator==(const ManifestEntry&) const = default;
};

using Manifest = std::vector<ManifestEntry>;

std::filesystem::path shard_path(const std::filesystem::path& dir, LayerIndex layer);

/// Writes layer_NNNN.cicw for every layer plus manifest.json into dir.
Manifest write_weight_files(const ModelDescriptor& model, std::uint64_t seed,
                            const std::filesystem::path& dir);

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

}  // namespace cicada
