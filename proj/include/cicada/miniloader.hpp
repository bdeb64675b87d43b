#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cicada/catalog.hpp"
#include "cicada/common.hpp"
#include "cicada/weight_file.hpp"

namespace cicada {

/// Fixed bookkeeping bytes attributed to every parameter block. Kept out of
/// compression-ratio comparisons.
inline constexpr std::uint64_t kBlockHeaderBytes = 32;

/// skip_factor default: fraction of allocate_cost still paid when the
/// default initializer is bypassed.
inline constexpr double kDefaultSkipFactor = 0.19;

enum class RegistrationMode { FullWithInit, FullSkipInit, MiniCompressed };

enum class BlockState { PlaceholderCompressed, FullPrecision };

/// Parameter storage of one layer. Either a packed 1-bit placeholder
/// bitset (never read) or full-precision values, never both.
class ParameterBlock {
 public:
  ParameterBlock() = default;

  LayerIndex layer_index() const noexcept { return layer_; }
  std::uint64_t logical_len() const noexcept { return len_; }
  BlockState state() const noexcept { return state_; }
  bool materialized() const noexcept { return state_ == BlockState::FullPrecision; }

  std::span<const std::uint8_t> placeholder_bits() const noexcept { return bits_; }
  std::span<const float> values() const noexcept { return values_; }

  std::uint64_t payload_bytes() const noexcept;
  std::uint64_t resident_bytes() const noexcept { return payload_bytes() + kBlockHeaderBytes; }

 private:
  friend ParameterBlock register_parameters(const LayerSpec&, RegistrationMode, std::uint64_t);
  friend void restore_and_apply(ParameterBlock&, const WeightShard&);

  LayerIndex layer_ = 0;
  std::uint64_t len_ = 0;
  BlockState state_ = BlockState::PlaceholderCompressed;
  std::vector<std::uint8_t> bits_;
  std::vector<float> values_;
};

/// Allocates parameter storage for a layer. FullWithInit fills values with
/// the pseudo-initializer: SplitMix64(mix_seed(init_seed, layer_index)),
/// each value symmetric_float() / sqrt(kernel_cols). Throws DegenerateLayer
/// when param_count is zero.
ParameterBlock register_parameters(const LayerSpec& spec, RegistrationMode mode,
                                   std::uint64_t init_seed = 0);

/// Simulated time consumed by register_parameters.
Micros registration_cost(const LayerSpec& spec, RegistrationMode mode,
                         double skip_factor = kDefaultSkipFactor);

/// Construction time of the layer: instantiation plus registration.
inline Micros construction_cost(const LayerSpec& spec, RegistrationMode mode,
                                double skip_factor = kDefaultSkipFactor) {
  return spec.instantiate_cost + registration_cost(spec, mode, skip_factor);
}

/// Overwrites the block with the shard payload, restoring full precision.
/// Throws ShapeMismatch or CorruptShard; the block is untouched on error.
void restore_and_apply(ParameterBlock& block, const WeightShard& shard);

/// y[r] = sum_c W[r,c] * x[c] + b[r] with W row-major followed by b,
/// accumulated in float in column order. Throws NotMaterialized on
/// placeholders and ShapeMismatch on bad input length.
std::vector<float> forward_affine(const ParameterBlock& block, std::span<const float> input,
                                  const LayerSpec& spec);

std::uint64_t resident_memory(std::span<const ParameterBlock> blocks) noexcept;

}  // namespace cicada
