#include "cicada/weight_file.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cicada/crc32.hpp"
#include "cicada/rng.hpp"

namespace cicada {
namespace {

template <typename T>
void put_le(std::vector<std::byte>& out, T v) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::byte>(u & 0xFFu));
    u = static_cast<U>(u >> 8);
  }
}

template <typename T>
T get_le(std::span<const std::byte> in, std::size_t offset) {
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    u |= static_cast<std::make_unsigned_t<T>>(std::to_integer<unsigned>(in[offset + i])) << (8 * i);
  }
  return static_cast<T>(u);
}

void encode_f32(std::byte* dst, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) {
    dst[i] = static_cast<std::byte>(bits & 0xFFu);
    bits >>= 8;
  }
}

}  // namespace

float WeightShard::value(std::size_t k) const {
  return std::bit_cast<float>(get_le<std::uint32_t>(payload, 4 * k));
}

std::vector<float> WeightShard::values() const {
  std::vector<float> out(static_cast<std::size_t>(element_count));
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = value(k);
  return out;
}

bool WeightShard::checksum_ok() const noexcept { return crc32(payload) == checksum; }

WeightShard make_shard(LayerIndex layer, std::span<const float> values) {
  WeightShard s;
  s.layer_index = layer;
  s.element_count = values.size();
  s.payload.resize(4 * values.size());
  for (std::size_t k = 0; k < values.size(); ++k) encode_f32(s.payload.data() + 4 * k, values[k]);
  s.checksum = crc32(s.payload);
  return s;
}

std::vector<std::byte> serialize_shard(const WeightShard& shard) {
  std::vector<std::byte> out;
  out.reserve(kShardHeaderBytes + shard.payload.size());
  // Magic is big-endian on the wire so the file starts with "CICA".
  for (int shift = 24; shift >= 0; shift -= 8)
    out.push_back(static_cast<std::byte>((kShardMagic >> shift) & 0xFFu));
  put_le<std::uint16_t>(out, kShardVersion);
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(shard.dtype));
  put_le<std::uint32_t>(out, shard.layer_index);
  put_le<std::uint64_t>(out, shard.element_count);
  put_le<std::uint32_t>(out, shard.checksum);
  out.insert(out.end(), shard.payload.begin(), shard.payload.end());
  return out;
}

WeightShard parse_weight_shard(std::span<const std::byte> bytes) {
  if (bytes.size() < 4) throw Error(ErrorKind::Truncated, "shard shorter than magic");
  std::uint32_t magic = 0;
  for (int i = 0; i < 4; ++i) magic = (magic << 8) | std::to_integer<std::uint32_t>(bytes[i]);
  if (magic != kShardMagic) throw Error(ErrorKind::FormatError, "bad shard magic");
  if (bytes.size() < kShardHeaderBytes) throw Error(ErrorKind::Truncated, "shard header truncated");
  if (get_le<std::uint16_t>(bytes, 4) != kShardVersion)
    throw Error(ErrorKind::FormatError, "unsupported shard version");
  if (get_le<std::uint16_t>(bytes, 6) != static_cast<std::uint16_t>(DType::F32))
    throw Error(ErrorKind::FormatError, "unsupported dtype");

  WeightShard s;
  s.layer_index = get_le<std::uint32_t>(bytes, 8);
  s.element_count = get_le<std::uint64_t>(bytes, 12);
  s.checksum = get_le<std::uint32_t>(bytes, 20);
  const auto body = bytes.subspan(kShardHeaderBytes);
  if (s.element_count > body.size() / 4 || body.size() < 4 * s.element_count)
    throw Error(ErrorKind::Truncated, "payload holds " + std::to_string(body.size()) +
                                          " bytes, header promises " +
                                          std::to_string(s.element_count) + " floats");
  if (body.size() != 4 * s.element_count)
    throw Error(ErrorKind::FormatError, "trailing bytes after payload");
  s.payload.assign(body.begin(), body.end());
  if (!s.checksum_ok()) throw Error(ErrorKind::CorruptShard, "payload CRC mismatch");
  return s;
}

WeightShard read_shard_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::NotFound, path.string());
  std::vector<std::byte> bytes;
  in.seekg(0, std::ios::end);
  bytes.resize(static_cast<std::size_t>(in.tellg()));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw Error(ErrorKind::Io, "read failed for " + path.string());
  try {
    return parse_weight_shard(bytes);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

std::vector<float> generate_layer_weights(const LayerSpec& layer, std::uint64_t seed) {
  SplitMix64 rng(mix_seed(seed, layer.layer_index));
  const float scale = 1.0f / std::sqrt(static_cast<float>(layer.kernel_cols));
  std::vector<float> values(static_cast<std::size_t>(layer.param_count));
  for (auto& v : values) v = rng.symmetric_float() * scale;
  return values;
}

std::filesystem::path shard_path(const std::filesystem::path& dir, LayerIndex layer) {
  std::ostringstream name;
  name << "layer_" << std::setw(4) << std::setfill('0') << layer << ".cicw";
  return dir / name.str();
}

Manifest write_weight_files(const ModelDescriptor& model, std::uint64_t seed,
                            const std::filesystem::path& dir) {
  validate_model(model);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, dir.string() + ": " + ec.message());

  Manifest manifest;
  for (const auto& layer : model.layers) {
    const auto shard = make_shard(layer.layer_index, generate_layer_weights(layer, seed));
    const auto bytes = serialize_shard(shard);
    const auto path = shard_path(dir, layer.layer_index);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
    manifest.push_back({path, layer.layer_index, shard.element_count, shard.checksum});
  }
  save_manifest(manifest, dir / "manifest.json");
  return manifest;
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  auto arr = nlohmann::json::array();
  for (const auto& e : manifest) {
    arr.push_back({{"path", e.path.filename().string()},
                   {"layer_index", e.layer_index},
                   {"element_count", e.element_count},
                   {"crc32", e.crc32}});
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << arr.dump(2) << '\n';
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  Manifest manifest;
  try {
    for (const auto& e : nlohmann::json::parse(in)) {
      manifest.push_back({path.parent_path() / e.at("path").get<std::string>(),
                          e.at("layer_index").get<LayerIndex>(),
                          e.at("element_count").get<std::uint64_t>(),
                          e.at("crc32").get<std::uint32_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::FormatError, path.string() + ": " + e.what());
  }
  return manifest;
}

}  // namespace cicada
