#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cicada/common.hpp"

namespace cicada {

/// One timestamped stage occupancy record.
struct StageInterval {
  RequestId request_id = 0;
  Stage stage = Stage::L;
  LayerIndex layer_index = 0;
  Micros start = 0;
  Micros end = 0;

  Micros duration() const noexcept { return end - start; }
  bool operator==(const StageInterval&) const = default;
};

struct Interval {
  Micros start = 0;
  Micros end = 0;
  bool operator==(const Interval&) const = default;
};

/// Sorted, pairwise-disjoint cover of the union. Touching intervals are
/// merged. Throws InvalidInterval for end < start.
std::vector<Interval> merge_intervals(std::vector<Interval> intervals);

Micros union_length(const std::vector<Interval>& merged) noexcept;

struct UtilizationReport {
  Micros total_active = 0;
  Micros total_pipeline = 0;
  double utilization = 0.0;
  std::map<Stage, Micros> per_stage_working;
  std::map<Stage, Micros> per_stage_waiting;
};

/// Pipeline-unit stages. Retrieval is I/O wait: the weight unit is idle
/// while the kernel moves data, so R does not count as active time.
inline constexpr std::array<Stage, 3> kUnitStages{Stage::L, Stage::A, Stage::E};

/// Utilization over a run: active = merged union of L/A/E intervals,
/// pipeline = max(end) - min(start) over all events. Waiting time per
/// stage is start minus the end of the predecessor unit, clamped at 0:
///   L_i after L_{i-1} (L_0 after arrival, when given)
///   R_i after L_i
///   A_i after max(L_i, R_i)
///   E_i after A_i
/// Throws EmptyRun.
UtilizationReport utilization(const std::vector<StageInterval>& events,
                              const std::map<RequestId, Micros>& arrivals = {});

/// Memory attribution buckets.
enum class MemoryBucket { Placeholders, FullParams, ShardBuffers };

struct MemorySample {
  Micros ts = 0;
  std::uint64_t resident_bytes = 0;
  std::map<MemoryBucket, std::uint64_t> breakdown;
  /// Payload bytes of the placeholder bucket without block headers.
  std::uint64_t placeholder_payload = 0;
};

/// Byte accounting of parameter blocks and shard buffers, attributed per
/// request. Single-threaded; the runtime owns it on its control thread.
class MemoryAccountant {
 public:
  void add_block(RequestId r, LayerIndex layer, std::uint64_t payload, std::uint64_t header);
  /// Moves a block to the full-params bucket with its new payload size.
  void apply_block(RequestId r, LayerIndex layer, std::uint64_t payload);
  void add_shard(RequestId r, LayerIndex layer, std::uint64_t bytes);
  /// Frees block and shard of one layer. Returns bytes freed; 0 on repeat.
  std::uint64_t release_layer(RequestId r, LayerIndex layer);
  std::uint64_t release_request(RequestId r);

  std::uint64_t resident() const noexcept;
  std::uint64_t bucket(MemoryBucket b) const noexcept;
  std::uint64_t request_bytes(RequestId r) const;
  std::uint64_t peak_resident() const noexcept { return peak_resident_; }
  std::uint64_t peak_placeholder_payload() const noexcept { return peak_placeholder_payload_; }
  std::uint64_t peak(MemoryBucket b) const noexcept;

  MemorySample sample(Micros ts) const;

 private:
  struct Entry {
    std::uint64_t block_payload = 0;
    std::uint64_t block_header = 0;
    bool applied = false;
    std::uint64_t shard = 0;
    bool released = false;
  };
  Entry& entry(RequestId r, LayerIndex layer);
  void adjust(MemoryBucket b, std::int64_t delta);
  void note_peaks();

  std::map<std::pair<RequestId, LayerIndex>, Entry> entries_;
  std::array<std::uint64_t, 3> buckets_{};
  std::array<std::uint64_t, 3> peaks_{};
  std::uint64_t placeholder_payload_ = 0;
  std::uint64_t peak_placeholder_payload_ = 0;
  std::uint64_t peak_resident_ = 0;
};

struct RunHeader {
  std::string strategy;
  std::string model_id;
  std::uint64_t seed = 0;
  double time_scale = 1.0;
  std::string mode = "virtual";
};

void to_json(nlohmann::json& j, const StageInterval& e);
void from_json(const nlohmann::json& j, StageInterval& e);

std::string events_to_csv(const std::vector<StageInterval>& events);
std::vector<StageInterval> events_from_csv(const std::string& text);
nlohmann::json events_to_json(const std::vector<StageInterval>& events, const RunHeader& header);

enum class GanttFormat { Svg, Csv, Json };
GanttFormat gantt_format_from_string(const std::string& s);

struct GanttStyle {
  /// Hatch the trailing allocation sub-segment of each L bar.
  bool hatch_allocation = false;
  /// allocate duration per layer, used when hatching.
  std::vector<Micros> allocation_by_layer;
  std::optional<RunHeader> header;
  double pixels_per_us = 0.0;  // 0 = fit to 1200 px
};

std::string render_gantt_svg(const std::vector<StageInterval>& events, const GanttStyle& style = {});

/// Writes the events in the requested format. Throws EmptyRun / Io.
void export_gantt(const std::vector<StageInterval>& events, GanttFormat format,
                  const std::filesystem::path& path, const GanttStyle& style = {});

/// Reads an event log written by export_gantt (CSV or JSON by extension).
std::vector<StageInterval> load_events(const std::filesystem::path& path);

}  // namespace cicada
