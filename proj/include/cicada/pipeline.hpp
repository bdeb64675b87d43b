#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "cicada/catalog.hpp"
#include "cicada/common.hpp"
#include "cicada/metrics.hpp"
#include "cicada/miniloader.hpp"
#include "cicada/retrieval.hpp"
#include "cicada/scheduler.hpp"

namespace cicada {

enum class StrategyName { SP, Mini, Preload, Cicada };

struct StrategyConfig {
  StrategyName name = StrategyName::SP;
  bool enable_miniloader = false;
  bool enable_decoupler = false;
  bool enable_priority_scheduler = false;

  static StrategyConfig of(StrategyName n);
  bool operator==(const StrategyConfig&) const = default;
};

std::string_view to_string(StrategyName n);
/// Accepts sp, mini, preload, cicada in any case. Throws Config.
StrategyConfig strategy_from_string(std::string_view s);
inline constexpr std::array<StrategyName, 4> kAllStrategies{
    StrategyName::SP, StrategyName::Mini, StrategyName::Preload, StrategyName::Cicada};

// -- dependency tracking ---------------------------------------------------

struct LayerProgress {
  LayerIndex layer_index = 0;
  bool constructed = false;
  bool retrieved = false;
  bool applied = false;
  bool executed = false;
};

/// retrieved(i) && constructed(i) && (i == 0 || applied(i - 1)).
bool can_apply(const std::vector<LayerProgress>& progress, LayerIndex i);

/// Per-request readiness table. One flag word per layer, updated atomically
/// under that layer's lock, so readers on other threads always observe a
/// consistent per-layer state. Marking a flag out of order throws
/// InvariantViolation.
class DependencyTracker {
 public:
  explicit DependencyTracker(std::size_t layers);

  void mark_constructed(LayerIndex i);
  void mark_retrieved(LayerIndex i);
  void mark_applied(LayerIndex i);
  void mark_executed(LayerIndex i);

  bool can_apply(LayerIndex i) const;
  LayerProgress get(LayerIndex i) const;
  std::vector<LayerProgress> snapshot() const;
  std::size_t size() const noexcept { return n_; }

  /// Lowest layer not yet applied, or size() when all are.
  LayerIndex next_to_apply() const;

 private:
  enum : std::uint8_t { kL = 1, kR = 2, kA = 4, kE = 8 };
  std::uint8_t flags(LayerIndex i) const;
  void set(LayerIndex i, std::uint8_t bit);

  std::size_t n_;
  std::unique_ptr<std::atomic<std::uint8_t>[]> flags_;
  std::unique_ptr<std::mutex[]> locks_;
  std::atomic<std::uint32_t> applied_count_{0};
};

/// Emits one priority hint per stall episode: the A-worker is idle and the
/// next layer to apply is constructed but its weights have not arrived.
class StallDetector {
 public:
  /// True when a hint should be issued now for (request, layer).
  bool check(RequestId request, LayerIndex layer, const LayerProgress& p, bool a_idle);
  std::size_t hints() const noexcept { return hints_; }

 private:
  std::map<RequestId, LayerIndex> hinted_;
  std::size_t hints_ = 0;
};

// -- runtime -----------------------------------------------------------------

enum class ClockMode { Virtual, Real };

std::string_view to_string(ClockMode m);
ClockMode clock_mode_from_string(std::string_view s);

struct RuntimeConfig {
  ClockMode mode = ClockMode::Virtual;
  /// Real mode: wall time = model time x time_scale.
  double time_scale = 1.0 / 16.0;
  /// Seed of the pseudo-initializer used by full registration.
  std::uint64_t init_seed = 0;
  double skip_factor = kDefaultSkipFactor;
  std::size_t max_in_flight = 8;
  EngineConfig engine;
  SchedulerConfig scheduler;
  /// Memory sampling period in model time.
  Micros sample_period = 10'000;
  /// Throw on any ordering violation found after a request completes.
  bool check_invariants = true;
};

struct InferenceRequest {
  RequestId request_id = 0;
  std::shared_ptr<const ModelDescriptor> model;
  std::vector<float> input;
  Micros arrival_ts = 0;
  StrategyConfig strategy;
};

struct InferenceResult {
  RequestId request_id = 0;
  std::string model_id;
  StrategyName strategy = StrategyName::SP;
  std::vector<float> output;
  Micros arrival_ts = 0;
  Micros admitted_at = 0;
  Micros latency = 0;
  std::vector<StageInterval> events;
  std::vector<LayerIndex> apply_order;
  /// First four payload bytes of every applied shard, by layer.
  std::vector<std::array<std::uint8_t, 4>> weight_probes;
};

struct RunStats {
  std::vector<MemorySample> memory;
  std::uint64_t peak_resident = 0;
  std::uint64_t peak_placeholder_payload = 0;
  std::uint64_t peak_full_params = 0;
  /// Peak bytes of blocks registered but not yet applied, headers included.
  std::uint64_t peak_registration_bytes = 0;
  std::vector<DecisionLogEntry> decisions;
  std::size_t stall_hints = 0;
  std::size_t suspends = 0;
  std::size_t resumes = 0;
  /// Tasks observed Suspended right after each boost.
  std::vector<TaskId> observed_suspended;
  std::vector<RetrievalTask> tasks;
  Micros end_time = 0;
};

/// Model input for a request, deterministic from (seed, request).
std::vector<float> make_input(const ModelDescriptor& model, std::uint64_t seed);

/// Plain sequential forward pass with the stored weights: the reference
/// every strategy must reproduce bit for bit.
std::vector<float> reference_forward(const ModelDescriptor& model, const WeightStore& store,
                                     std::span<const float> input);

/// Pipelined loading and inference runtime. Requests are submitted first,
/// then run() drives them to completion; in virtual mode all timing comes
/// from the cost model on a logical clock and the run is deterministic.
class Runtime {
 public:
  Runtime(RuntimeConfig config, const WeightStore& store);
  ~Runtime();
  Runtime(const Runtime&) = delete;
  Runtime& operator=(const Runtime&) = delete;

  /// Throws ShapeMismatch when the input does not fit the first layer.
  std::future<InferenceResult> submit(InferenceRequest request);
  /// Blocks until every submitted request has finished or failed.
  void run();
  const RunStats& stats() const noexcept;

 private:
  class Impl;
  std::unique_ptr<Impl> impl_;
};

/// Convenience: one request on a fresh runtime.
InferenceResult run_request(const InferenceRequest& request, const RuntimeConfig& config,
                            const WeightStore& store, RunStats* stats = nullptr);

}  // namespace cicada
