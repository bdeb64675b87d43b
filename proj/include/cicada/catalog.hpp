#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cicada/common.hpp"

namespace cicada {

enum class ModelFamily { ResNetLike, VGGLike, LLaMALike, OPTLike, Custom };

std::string_view to_string(ModelFamily f);
ModelFamily family_from_string(std::string_view s);

/// One layer of a synthetic model. The layer computes an affine map
/// y = W x + b with W of shape kernel_rows x kernel_cols.
struct LayerSpec {
  LayerIndex layer_index = 0;
  std::string name;
  std::uint64_t param_count = 0;
  std::uint64_t weight_bytes = 0;
  Micros instantiate_cost = 0;
  Micros allocate_cost = 0;
  Micros apply_cost = 0;
  Micros compute_cost = 0;
  std::uint32_t kernel_rows = 0;
  std::uint32_t kernel_cols = 0;

  /// Time the retrieval of this layer's weights takes at the model's bandwidth.
  Micros retrieval_cost = 0;

  bool operator==(const LayerSpec&) const = default;
};

struct ModelDescriptor {
  std::string model_id;
  ModelFamily family = ModelFamily::Custom;
  std::vector<LayerSpec> layers;
  std::uint64_t total_weight_bytes = 0;
  /// Bytes per microsecond used to derive retrieval_cost.
  double retrieval_bandwidth = 0.0;

  std::size_t layer_count() const noexcept { return layers.size(); }
  Micros construction_cost() const noexcept;

  bool operator==(const ModelDescriptor&) const = default;
};

/// Calibration knobs of the cost model.
struct CostProfile {
  /// allocate / (instantiate + allocate).
  double allocation_fraction = 0.5;
  /// retrieval duration / apply duration.
  double retrieval_apply_ratio = 7.0;
  /// Bytes per microsecond. Zero selects auto-calibration so that total
  /// retrieval time is retrieval_construction_ratio x total construction.
  double retrieval_bandwidth = 0.0;
  double retrieval_construction_ratio = 0.2077;
  /// compute_cost / instantiate_cost.
  double compute_ratio = 1.2;
  /// Relative jitter applied to per-layer costs and widths.
  double jitter = 0.2;
  /// Scales weight sizes relative to the reference model sizes.
  double size_factor = 1.0 / 64.0;
  /// Total construction time of the model when >0; otherwise the family base.
  Micros construction_total = 0;
  /// Width of Custom layers (kernel is width x width).
  std::uint32_t custom_width = 1;

  void validate() const;
};

struct FamilyBase {
  ModelFamily family;
  std::string_view reference;
  std::size_t default_layers;
  std::uint64_t reference_bytes;
  Micros construction_total;
};

const FamilyBase& family_base(ModelFamily f);

/// Deterministic for (family, layer_count, seed, profile). Consecutive
/// layers chain: kernel_cols(i + 1) == kernel_rows(i).
ModelDescriptor generate_model(ModelFamily family, std::size_t layer_count, std::uint64_t seed,
                               const CostProfile& profile = {});

/// Throws DegenerateModel / ShapeMismatch on broken descriptors (empty,
/// non-contiguous indices, bad parameter arithmetic, unchained dims).
void validate_model(const ModelDescriptor& model);

void to_json(nlohmann::json& j, const LayerSpec& l);
void from_json(const nlohmann::json& j, LayerSpec& l);
void to_json(nlohmann::json& j, const ModelDescriptor& m);
void from_json(const nlohmann::json& j, ModelDescriptor& m);

void save_model(const ModelDescriptor& model, const std::filesystem::path& path);
ModelDescriptor load_model(const std::filesystem::path& path);

}  // namespace cicada
