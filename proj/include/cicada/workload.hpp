#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cicada/catalog.hpp"
#include "cicada/metrics.hpp"
#include "cicada/pipeline.hpp"

namespace cicada {

struct TraceRecord {
  double offset_ms = 0.0;
  std::string model_id;

  bool operator==(const TraceRecord&) const = default;
};

/// Parses `offset_ms,model_id` lines (optional header, '#' comments, blank
/// lines ignored) and sorts by offset (stable). Errors carry the 1-based
/// line: FormatError, InvalidOffset, UnknownModel (only when `known` is
/// given).
std::vector<TraceRecord> parse_trace_text(const std::string& text,
                                          const std::set<std::string>* known = nullptr);
std::vector<TraceRecord> parse_trace(const std::filesystem::path& path,
                                     const std::set<std::string>* known = nullptr);
std::string trace_to_csv(const std::vector<TraceRecord>& trace);

/// Deterministic synthetic invocation trace. burstiness 0 spaces calls
/// evenly; above that, per-minute intensities are lognormal with sigma =
/// 3 x burstiness, counts are allotted by largest remainder and offsets are
/// uniform within their minute. Models are drawn uniformly from model_ids.
std::vector<TraceRecord> synthesize_trace(std::size_t duration_min, std::size_t total_invocations,
                                          double burstiness, std::uint64_t seed,
                                          const std::vector<std::string>& model_ids = {"model"});

/// Invocations per minute over [0, duration_min).
std::vector<std::size_t> per_minute_histogram(const std::vector<TraceRecord>& trace,
                                              std::size_t duration_min);
double coefficient_of_variation(const std::vector<std::size_t>& counts);

struct ExperimentPlan {
  std::vector<TraceRecord> trace;
  std::vector<StrategyConfig> strategies;
  std::map<std::string, std::shared_ptr<const ModelDescriptor>> models;
  std::uint64_t seed = 1;
  double time_scale = 1.0 / 16.0;
  std::size_t repeat_count = 1;
  RuntimeConfig runtime;
};

struct RequestRow {
  std::string strategy;
  std::string model_id;
  std::size_t repeat = 0;
  RequestId request_id = 0;
  Micros arrival_us = 0;
  Micros admitted_us = 0;
  Micros latency_us = 0;
  bool ok = true;
};

struct CellReport {
  std::string strategy;
  std::string model_id;
  std::size_t requests = 0;
  std::size_t failed = 0;
  double mean_latency_us = 0.0;
  Micros p50_latency_us = 0;
  Micros p99_latency_us = 0;
  double utilization = 0.0;
  double mean_request_utilization = 0.0;
  std::uint64_t peak_memory = 0;
  std::uint64_t peak_placeholder_payload = 0;
  std::uint64_t peak_registration_bytes = 0;
  std::map<Stage, Micros> working;
  std::map<Stage, Micros> waiting;
  Micros max_admission_delay_us = 0;
  std::string error;
  std::vector<StageInterval> events;
  std::vector<Micros> allocation_by_layer;
};

struct ComparisonReport {
  std::vector<CellReport> cells;
  std::vector<RequestRow> requests;
};

/// Runs every (strategy, model) cell over the trace records of that model.
/// Request ids are trace positions and inputs are drawn from (seed, id), so
/// cells differ only by strategy. A failing request marks its cell; other
/// cells proceed.
ComparisonReport run_experiment(const ExperimentPlan& plan, const WeightStore& store);

/// Nearest-rank percentile of an unsorted sample.
Micros percentile(std::vector<Micros> values, double p);

std::string report_to_csv(const ComparisonReport& report);
std::string requests_to_csv(const ComparisonReport& report);
nlohmann::json report_to_json(const ComparisonReport& report, std::uint64_t seed);

/// report.csv, report.json, requests.csv, events_<strategy>_<model>.csv and
/// gantt_<strategy>_<model>.svg under dir.
void write_report(const ComparisonReport& report, std::uint64_t seed,
                  const std::filesystem::path& dir);

/// Four-layer model with R_1 artificially delayed past its deadline while
/// R_2 and R_3 are fast: the out-of-order scenario the scheduler targets.
struct Scenario {
  std::shared_ptr<ModelDescriptor> model;
  RuntimeConfig config;
};
Scenario delayed_retrieval_scenario(Micros delay = 20'000);

}  // namespace cicada
