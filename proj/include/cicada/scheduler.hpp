#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cicada/common.hpp"
#include "cicada/retrieval.hpp"

namespace cicada {

/// How the expected retrieval duration of a layer is obtained.
enum class DurationModel { Static, Ewma };

struct SchedulerConfig {
  bool enabled = true;
  /// Deadline check period while records are outstanding.
  Micros tick = 1000;
  DurationModel duration_model = DurationModel::Static;
  double ewma_alpha = 0.3;
};

/// Bookkeeping for one outstanding retrieval. t0 is the moment the layer's
/// construction started (when its retrieval was issued); issue_delay is the
/// queueing delay a = started_at - t0, unknown until the read starts.
struct RetrievalRecord {
  RequestId request_id = 0;
  LayerIndex layer_index = 0;
  TaskId task_id = 0;
  Micros t0 = 0;
  std::optional<Micros> issue_delay;
  Micros expected = 0;
  std::uint64_t bytes = 0;
  bool boosted = false;
  std::vector<TaskId> suspended;
};

enum class DecisionAction { Unchanged, Boosted };

struct Decision {
  DecisionAction action = DecisionAction::Unchanged;
  std::vector<TaskId> suspended;

  bool operator==(const Decision&) const = default;
};

struct DecisionLogEntry {
  Micros now = 0;
  RequestId request_id = 0;
  LayerIndex layer_index = 0;
  DecisionAction action = DecisionAction::Unchanged;
  std::vector<TaskId> suspended;
};

/// Deadline-driven priority adjustment of in-flight retrievals. A record
/// whose read started at t0 + a and has not finished by t0 + a + D is
/// boosted to High; every other in-flight read is suspended until it is
/// done, except earlier layers of the same request. Reads issued during
/// the boost are held as well. Suspensions are reference-counted so
/// overlapping boosts call suspend/resume on the backend exactly once per
/// task.
class PriorityScheduler {
 public:
  PriorityScheduler(RetrievalBackend& io, SchedulerConfig config = {});

  /// Registers the retrieval of (request, layer) issued at t0.
  void on_layer_start(RequestId request, LayerIndex layer, Micros t0, TaskId task,
                      std::uint64_t bytes, Micros static_expected);
  /// Registers a fully specified record, mainly for tests.
  void add_record(RetrievalRecord record);

  /// Throws NoSuchRecord.
  Decision check_and_adjust(RequestId request, LayerIndex layer, Micros now);
  /// Drops the record and resumes the tasks it suspended. Returns the tasks
  /// whose last suspension was lifted.
  std::vector<TaskId> on_retrieval_done(RequestId request, LayerIndex layer, Micros now,
                                        std::optional<Micros> observed = std::nullopt);
  /// Checks every record, lowest layer first.
  std::vector<Decision> tick(Micros now);

  /// Expected duration under the configured model.
  Micros estimate(std::uint64_t bytes, Micros static_expected) const;

  bool has_records() const noexcept { return !records_.empty(); }
  const RetrievalRecord& record(RequestId request, LayerIndex layer) const;
  const std::vector<DecisionLogEntry>& log() const noexcept { return log_; }
  std::size_t suspended_count() const noexcept { return holds_.size(); }
  const SchedulerConfig& config() const noexcept { return config_; }

 private:
  using Key = std::pair<LayerIndex, RequestId>;
  RetrievalRecord& find(RequestId request, LayerIndex layer);
  bool boosted_task(TaskId id) const;

  RetrievalBackend& io_;
  SchedulerConfig config_;
  std::map<Key, RetrievalRecord> records_;
  std::map<TaskId, int> holds_;
  std::vector<DecisionLogEntry> log_;
  std::optional<double> rate_;  // EWMA microseconds per byte
};

std::string_view to_string(DecisionAction a);

}  // namespace cicada
