#include "cicada/catalog.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "cicada/rng.hpp"

namespace cicada {
namespace {

// Reference sizes from the model-size table; construction totals for
// ResNet50 and OPT-6.7B are the measured endpoints, VGG and LLaMA are
// interpolated.
constexpr std::array<FamilyBase, 5> kFamilies{{
    {ModelFamily::ResNetLike, "ResNet50", 10, 98'000'000ULL, 74'020},
    {ModelFamily::VGGLike, "VGG11", 5, 506'000'000ULL, 150'000},
    {ModelFamily::LLaMALike, "LLaMA-3.2-1B", 34, 4'710'000'000ULL, 450'000},
    {ModelFamily::OPTLike, "OPT-6.7B", 35, 25'400'000'000ULL, 1'150'310},
    {ModelFamily::Custom, "custom", 1, 0, 0},
}};

constexpr Micros kCustomLayerConstruction = 10'000;

Micros round_cost(double v) { return std::max<Micros>(1, std::llround(v)); }

}  // namespace

std::string_view to_string(ModelFamily f) {
  switch (f) {
    case ModelFamily::ResNetLike: return "ResNetLike";
    case ModelFamily::VGGLike: return "VGGLike";
    case ModelFamily::LLaMALike: return "LLaMALike";
    case ModelFamily::OPTLike: return "OPTLike";
    case ModelFamily::Custom: return "Custom";
  }
  return "Custom";
}

ModelFamily family_from_string(std::string_view s) {
  for (const auto& b : kFamilies) {
    if (s == to_string(b.family)) return b.family;
  }
  if (s == "resnet") return ModelFamily::ResNetLike;
  if (s == "vgg") return ModelFamily::VGGLike;
  if (s == "llama") return ModelFamily::LLaMALike;
  if (s == "opt") return ModelFamily::OPTLike;
  if (s == "custom") return ModelFamily::Custom;
  throw Error(ErrorKind::Config, "unknown model family '" + std::string(s) + "'");
}

const FamilyBase& family_base(ModelFamily f) {
  for (const auto& b : kFamilies) {
    if (b.family == f) return b;
  }
  return kFamilies.back();
}

Micros ModelDescriptor::construction_cost() const noexcept {
  Micros total = 0;
  for (const auto& l : layers) total += l.instantiate_cost + l.allocate_cost;
  return total;
}

void CostProfile::validate() const {
  if (!(allocation_fraction > 0.0 && allocation_fraction < 1.0))
    throw Error(ErrorKind::InvalidProfile, "allocation_fraction must lie in (0,1)");
  if (!(retrieval_apply_ratio > 0.0))
    throw Error(ErrorKind::InvalidProfile, "retrieval_apply_ratio must be positive");
  if (retrieval_bandwidth < 0.0)
    throw Error(ErrorKind::InvalidProfile, "retrieval_bandwidth must be non-negative");
  if (!(retrieval_construction_ratio > 0.0))
    throw Error(ErrorKind::InvalidProfile, "retrieval_construction_ratio must be positive");
  if (!(compute_ratio > 0.0)) throw Error(ErrorKind::InvalidProfile, "compute_ratio must be positive");
  if (!(jitter >= 0.0 && jitter < 1.0))
    throw Error(ErrorKind::InvalidProfile, "jitter must lie in [0,1)");
  if (!(size_factor > 0.0)) throw Error(ErrorKind::InvalidProfile, "size_factor must be positive");
  if (construction_total < 0)
    throw Error(ErrorKind::InvalidProfile, "construction_total must be non-negative");
  if (custom_width == 0) throw Error(ErrorKind::InvalidProfile, "custom_width must be positive");
}

ModelDescriptor generate_model(ModelFamily family, std::size_t layer_count, std::uint64_t seed,
                               const CostProfile& profile) {
  if (layer_count == 0) throw Error(ErrorKind::DegenerateModel, "layer_count must be >= 1");
  profile.validate();

  const FamilyBase& base = family_base(family);
  SplitMix64 rng(mix_seed(seed, static_cast<std::uint64_t>(family) + 1));

  // Boundary widths: dims[i] is the input width of layer i, dims[i + 1] its
  // output width.
  std::vector<std::uint32_t> dims(layer_count + 1, profile.custom_width);
  if (family != ModelFamily::Custom) {
    const double width_jitter = profile.jitter / 2.0;
    std::vector<double> w(layer_count + 1);
    for (auto& x : w) x = 1.0 + rng.uniform(-width_jitter, width_jitter);
    double quad = 0.0;
    double lin = 0.0;
    for (std::size_t i = 0; i < layer_count; ++i) {
      quad += w[i] * w[i + 1];
      lin += w[i + 1];
    }
    const double target_params =
        static_cast<double>(base.reference_bytes) * profile.size_factor / 4.0;
    const double scale = (-lin + std::sqrt(lin * lin + 4.0 * quad * target_params)) / (2.0 * quad);
    for (std::size_t i = 0; i <= layer_count; ++i) {
      dims[i] = static_cast<std::uint32_t>(std::max(1.0, std::round(scale * w[i])));
    }
  }

  Micros construction_total = profile.construction_total;
  if (construction_total == 0) {
    construction_total = family == ModelFamily::Custom
                             ? kCustomLayerConstruction * static_cast<Micros>(layer_count)
                             : base.construction_total;
  }
  std::vector<double> share(layer_count);
  for (auto& s : share) s = 1.0 + rng.uniform(-profile.jitter, profile.jitter);
  const double share_sum = std::accumulate(share.begin(), share.end(), 0.0);

  ModelDescriptor model;
  model.family = family;
  model.model_id = std::string(to_string(family)) + "-" + std::to_string(layer_count) + "-s" +
                   std::to_string(seed);
  model.layers.resize(layer_count);

  double construction_sum = 0.0;
  for (std::size_t i = 0; i < layer_count; ++i) {
    LayerSpec& l = model.layers[i];
    l.layer_index = static_cast<LayerIndex>(i);
    l.name = "layer" + std::to_string(i);
    l.kernel_cols = dims[i];
    l.kernel_rows = dims[i + 1];
    l.param_count = std::uint64_t{l.kernel_rows} * l.kernel_cols + l.kernel_rows;
    l.weight_bytes = 4 * l.param_count;
    const double construction = static_cast<double>(construction_total) * share[i] / share_sum;
    l.instantiate_cost = round_cost(construction * (1.0 - profile.allocation_fraction));
    l.allocate_cost = round_cost(construction * profile.allocation_fraction);
    l.compute_cost = round_cost(profile.compute_ratio * static_cast<double>(l.instantiate_cost));
    model.total_weight_bytes += l.weight_bytes;
    construction_sum += static_cast<double>(l.instantiate_cost + l.allocate_cost);
  }

  model.retrieval_bandwidth =
      profile.retrieval_bandwidth > 0.0
          ? profile.retrieval_bandwidth
          : static_cast<double>(model.total_weight_bytes) /
                (profile.retrieval_construction_ratio * construction_sum);
  for (auto& l : model.layers) {
    l.retrieval_cost = round_cost(static_cast<double>(l.weight_bytes) / model.retrieval_bandwidth);
    l.apply_cost =
        round_cost(static_cast<double>(l.retrieval_cost) / profile.retrieval_apply_ratio);
  }
  return model;
}

void validate_model(const ModelDescriptor& model) {
  if (model.layers.empty()) throw Error(ErrorKind::DegenerateModel, "model has no layers");
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& l = model.layers[i];
    const std::string where = model.model_id + " layer " + std::to_string(i);
    if (l.layer_index != i) throw Error(ErrorKind::DegenerateModel, where + ": non-contiguous index");
    if (l.kernel_rows == 0 || l.kernel_cols == 0 ||
        l.param_count != std::uint64_t{l.kernel_rows} * l.kernel_cols + l.kernel_rows)
      throw Error(ErrorKind::DegenerateModel, where + ": param_count does not match kernel shape");
    if (l.weight_bytes != 4 * l.param_count)
      throw Error(ErrorKind::DegenerateModel, where + ": weight_bytes != 4 x param_count");
    if (l.instantiate_cost <= 0 || l.allocate_cost <= 0 || l.apply_cost <= 0 ||
        l.compute_cost <= 0 || l.retrieval_cost <= 0)
      throw Error(ErrorKind::DegenerateModel, where + ": costs must be positive");
    if (i > 0 && l.kernel_cols != model.layers[i - 1].kernel_rows)
      throw Error(ErrorKind::ShapeMismatch, where + ": kernel_cols does not chain to previous rows");
    total += l.weight_bytes;
  }
  if (total != model.total_weight_bytes)
    throw Error(ErrorKind::DegenerateModel, model.model_id + ": total_weight_bytes mismatch");
}

void to_json(nlohmann::json& j, const LayerSpec& l) {
  j = nlohmann::json{{"layer_index", l.layer_index},
                     {"name", l.name},
                     {"param_count", l.param_count},
                     {"weight_bytes", l.weight_bytes},
                     {"instantiate_cost", l.instantiate_cost},
                     {"allocate_cost", l.allocate_cost},
                     {"apply_cost", l.apply_cost},
                     {"compute_cost", l.compute_cost},
                     {"retrieval_cost", l.retrieval_cost},
                     {"kernel_rows", l.kernel_rows},
                     {"kernel_cols", l.kernel_cols}};
}

void from_json(const nlohmann::json& j, LayerSpec& l) {
  j.at("layer_index").get_to(l.layer_index);
  j.at("name").get_to(l.name);
  j.at("param_count").get_to(l.param_count);
  j.at("weight_bytes").get_to(l.weight_bytes);
  j.at("instantiate_cost").get_to(l.instantiate_cost);
  j.at("allocate_cost").get_to(l.allocate_cost);
  j.at("apply_cost").get_to(l.apply_cost);
  j.at("compute_cost").get_to(l.compute_cost);
  j.at("retrieval_cost").get_to(l.retrieval_cost);
  j.at("kernel_rows").get_to(l.kernel_rows);
  j.at("kernel_cols").get_to(l.kernel_cols);
}

void to_json(nlohmann::json& j, const ModelDescriptor& m) {
  j = nlohmann::json{{"model_id", m.model_id},
                     {"family", std::string(to_string(m.family))},
                     {"total_weight_bytes", m.total_weight_bytes},
                     {"retrieval_bandwidth", m.retrieval_bandwidth},
                     {"layers", m.layers}};
}

void from_json(const nlohmann::json& j, ModelDescriptor& m) {
  j.at("model_id").get_to(m.model_id);
  m.family = family_from_string(j.at("family").get<std::string>());
  j.at("total_weight_bytes").get_to(m.total_weight_bytes);
  j.at("retrieval_bandwidth").get_to(m.retrieval_bandwidth);
  j.at("layers").get_to(m.layers);
}

void save_model(const ModelDescriptor& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << nlohmann::json(model).dump(2) << '\n';
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

ModelDescriptor load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  ModelDescriptor model;
  try {
    model = nlohmann::json::parse(in).get<ModelDescriptor>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::FormatError, path.string() + ": " + e.what());
  }
  validate_model(model);
  return model;
}

}  // namespace cicada
