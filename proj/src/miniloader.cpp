#include "cicada/miniloader.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include "cicada/rng.hpp"

namespace cicada {

std::uint64_t ParameterBlock::payload_bytes() const noexcept {
  return state_ == BlockState::PlaceholderCompressed ? (len_ + 7) / 8 : 4 * len_;
}

ParameterBlock register_parameters(const LayerSpec& spec, RegistrationMode mode,
                                   std::uint64_t init_seed) {
  if (spec.param_count == 0)
    throw Error(ErrorKind::DegenerateLayer, "layer " + std::to_string(spec.layer_index) +
                                                " has no parameters");
  ParameterBlock b;
  b.layer_ = spec.layer_index;
  b.len_ = spec.param_count;
  const auto n = static_cast<std::size_t>(spec.param_count);
  switch (mode) {
    case RegistrationMode::MiniCompressed:
      b.state_ = BlockState::PlaceholderCompressed;
      b.bits_.assign((n + 7) / 8, 0);
      break;
    case RegistrationMode::FullSkipInit:
      b.state_ = BlockState::FullPrecision;
      b.values_.assign(n, 0.0f);
      break;
    case RegistrationMode::FullWithInit: {
      b.state_ = BlockState::FullPrecision;
      b.values_.resize(n);
      SplitMix64 rng(mix_seed(init_seed, spec.layer_index));
      const float scale = 1.0f / std::sqrt(static_cast<float>(std::max<std::uint32_t>(1, spec.kernel_cols)));
      for (auto& v : b.values_) v = rng.symmetric_float() * scale;
      break;
    }
  }
  return b;
}

Micros registration_cost(const LayerSpec& spec, RegistrationMode mode, double skip_factor) {
  if (mode == RegistrationMode::FullWithInit) return spec.allocate_cost;
  return std::max<Micros>(1, std::llround(static_cast<double>(spec.allocate_cost) * skip_factor));
}

void restore_and_apply(ParameterBlock& block, const WeightShard& shard) {
  if (shard.element_count != block.len_)
    throw Error(ErrorKind::ShapeMismatch,
                "layer " + std::to_string(block.layer_) + ": block holds " +
                    std::to_string(block.len_) + " parameters, shard " +
                    std::to_string(shard.element_count));
  if (!shard.checksum_ok())
    throw Error(ErrorKind::CorruptShard, "layer " + std::to_string(block.layer_));

  std::vector<float> values(static_cast<std::size_t>(block.len_));
  std::memcpy(values.data(), shard.payload.data(), shard.payload.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t k = 0; k < values.size(); ++k) values[k] = shard.value(k);
  }
  block.values_ = std::move(values);
  block.bits_.clear();
  block.bits_.shrink_to_fit();
  block.state_ = BlockState::FullPrecision;
}

std::vector<float> forward_affine(const ParameterBlock& block, std::span<const float> input,
                                  const LayerSpec& spec) {
  if (!block.materialized())
    throw Error(ErrorKind::NotMaterialized,
                "layer " + std::to_string(block.layer_index()) + " still holds placeholders");
  if (input.size() != spec.kernel_cols)
    throw Error(ErrorKind::ShapeMismatch, "layer " + std::to_string(spec.layer_index) +
                                              " expects " + std::to_string(spec.kernel_cols) +
                                              " inputs, got " + std::to_string(input.size()));
  if (block.logical_len() != spec.param_count)
    throw Error(ErrorKind::ShapeMismatch, "block does not match layer shape");

  const auto values = block.values();
  const std::size_t rows = spec.kernel_rows;
  const std::size_t cols = spec.kernel_cols;
  const float* bias = values.data() + rows * cols;
  std::vector<float> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* w = values.data() + r * cols;
    float acc = 0.0f;
    for (std::size_t c = 0; c < cols; ++c) acc += w[c] * input[c];
    out[r] = acc + bias[r];
  }
  return out;
}

std::uint64_t resident_memory(std::span<const ParameterBlock> blocks) noexcept {
  return std::accumulate(blocks.begin(), blocks.end(), std::uint64_t{0},
                         [](std::uint64_t s, const ParameterBlock& b) { return s + b.resident_bytes(); });
}

}  // namespace cicada
