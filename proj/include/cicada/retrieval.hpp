#pragma once

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "cicada/catalog.hpp"
#include "cicada/common.hpp"
#include "cicada/weight_file.hpp"

namespace cicada {

enum class TaskState { Queued, Running, Suspended, Done, Failed };
enum class Priority { Normal, High };

std::string_view to_string(TaskState s);

inline bool is_terminal(TaskState s) { return s == TaskState::Done || s == TaskState::Failed; }

/// Legal transitions: Queued->Running, Running<->Suspended, Running->Done|Failed.
bool legal_transition(TaskState from, TaskState to);

struct RetrievalTask {
  TaskId task_id = 0;
  RequestId request_id = 0;
  LayerIndex layer_index = 0;
  std::filesystem::path path;
  TaskState state = TaskState::Queued;
  Priority priority = Priority::Normal;
  Micros issued_at = 0;
  std::optional<Micros> started_at;
  std::optional<Micros> completed_at;
  std::uint64_t bytes_read = 0;
  std::uint64_t file_bytes = 0;
  Micros expected_duration = 0;
  /// Explicitly suspended (or held while queued) through suspend().
  bool held = false;
  /// Suspended because a High task needed the slot; requeued automatically.
  bool yielded = false;
  std::optional<ErrorKind> failure;
  std::string failure_message;
  /// Every state the task has been in, in order.
  std::vector<TaskState> history{TaskState::Queued};
};

struct ReadySignal {
  RequestId request_id = 0;
  LayerIndex layer_index = 0;
  TaskId task_id = 0;
  WeightShard shard;
  Micros completed_at = 0;
};

struct RetrievalFailure {
  RequestId request_id = 0;
  LayerIndex layer_index = 0;
  TaskId task_id = 0;
  ErrorKind kind = ErrorKind::Io;
  std::string message;
};

/// Deterministic extra service time per file, for reproducible
/// out-of-order completions.
struct SimulatedDisk {
  std::uint64_t seed = 0;
  Micros max_extra = 0;
  std::map<LayerIndex, Micros> extra_by_layer;

  Micros extra(RequestId request, LayerIndex layer) const;
};

/// Where weight shards live. Directory-backed stores read real files;
/// the generated store synthesizes identical bytes in memory.
class WeightStore {
 public:
  virtual ~WeightStore() = default;
  virtual std::filesystem::path path(const ModelDescriptor& model, LayerIndex layer) const = 0;
  virtual bool exists(const std::filesystem::path& path) const = 0;
  virtual std::uint64_t file_bytes(const std::filesystem::path& path) const = 0;
  /// Throws NotFound, Truncated, FormatError, CorruptShard.
  virtual WeightShard load(const std::filesystem::path& path) const = 0;
};

/// Files under root/<model_id>/layer_NNNN.cicw.
class DirectoryWeightStore final : public WeightStore {
 public:
  explicit DirectoryWeightStore(std::filesystem::path root) : root_(std::move(root)) {}
  std::filesystem::path model_dir(const ModelDescriptor& model) const { return root_ / model.model_id; }
  std::filesystem::path path(const ModelDescriptor& model, LayerIndex layer) const override;
  bool exists(const std::filesystem::path& path) const override;
  std::uint64_t file_bytes(const std::filesystem::path& path) const override;
  WeightShard load(const std::filesystem::path& path) const override;

 private:
  std::filesystem::path root_;
};

/// In-memory shards produced by generate_layer_weights(layer, seed).
class GeneratedWeightStore final : public WeightStore {
 public:
  explicit GeneratedWeightStore(std::uint64_t seed) : seed_(seed) {}
  std::filesystem::path path(const ModelDescriptor& model, LayerIndex layer) const override;
  bool exists(const std::filesystem::path& path) const override;
  std::uint64_t file_bytes(const std::filesystem::path& path) const override;
  WeightShard load(const std::filesystem::path& path) const override;

 private:
  const LayerSpec* find(const std::filesystem::path& path) const;

  std::uint64_t seed_;
  mutable std::mutex mu_;
  mutable std::map<std::string, LayerSpec> layers_;
  // generation dominates replay cost, shards are immutable once built
  mutable std::map<std::string, std::shared_ptr<const WeightShard>> cache_;
};

/// Thread-safe control surface of a retrieval engine.
class RetrievalBackend {
 public:
  virtual ~RetrievalBackend() = default;

  /// Throws EngineStopped after shutdown.
  virtual TaskId enqueue(RequestId request, LayerIndex layer, const std::filesystem::path& path,
                         Micros expected_duration) = 0;
  /// Running -> Suspended; Queued tasks are held. No-op on terminal tasks.
  virtual TaskState suspend(TaskId id) = 0;
  virtual TaskState resume(TaskId id) = 0;
  virtual TaskState set_priority(TaskId id, Priority p) = 0;
  virtual std::optional<ReadySignal> poll_ready(RequestId request) = 0;
  virtual std::optional<RetrievalFailure> poll_failure(RequestId request) = 0;
  virtual RetrievalTask task(TaskId id) const = 0;
  /// Non-terminal tasks in issue order.
  virtual std::vector<TaskId> in_flight() const = 0;
  virtual void set_listener(std::function<void()> on_event) = 0;
};

/// Task bookkeeping shared by the threaded and virtual engines: the state
/// machine, priority dispatch order and signal queues. Not synchronized.
class TaskTable {
 public:
  TaskId add(RequestId request, LayerIndex layer, const std::filesystem::path& path,
             Micros expected, Micros now, std::uint64_t file_bytes);
  RetrievalTask& at(TaskId id);
  const RetrievalTask& at(TaskId id) const;
  bool contains(TaskId id) const { return tasks_.count(id) != 0; }

  /// Throws InvariantViolation on an illegal transition.
  void transition(TaskId id, TaskState to);

  /// Dispatchable: Queued and not held, or Suspended by yield. High first,
  /// then issue order.
  std::optional<TaskId> next_dispatchable() const;
  bool high_waiting() const;

  void push_signal(ReadySignal s);
  void push_failure(RetrievalFailure f);
  std::optional<ReadySignal> pop_signal(RequestId request);
  std::optional<RetrievalFailure> pop_failure(RequestId request);

  std::vector<TaskId> in_flight() const;

 private:
  TaskId next_id_ = 1;
  std::map<TaskId, RetrievalTask> tasks_;
  // non-terminal ids, so scans stay proportional to the live set
  std::set<TaskId> live_;
  std::map<RequestId, std::deque<ReadySignal>> signals_;
  std::map<RequestId, std::deque<RetrievalFailure>> failures_;
};

struct EngineConfig {
  std::size_t max_parallel_reads = 1;
  std::size_t chunk_bytes = 256 * 1024;
  /// Real-time pacing: each task additionally sleeps
  /// (expected_duration + disk extra) x time_scale, spread over its chunks.
  double time_scale = 0.0;
  SimulatedDisk disk;
};

/// Background worker pool reading weight files chunk by chunk. Suspension
/// and priority changes take effect at chunk boundaries.
class RetrievalEngine final : public RetrievalBackend {
 public:
  /// `clock` returns the run's monotonic timestamp in microseconds.
  RetrievalEngine(EngineConfig config, std::function<Micros()> clock);
  ~RetrievalEngine() override;
  RetrievalEngine(const RetrievalEngine&) = delete;
  RetrievalEngine& operator=(const RetrievalEngine&) = delete;

  void stop();

  TaskId enqueue(RequestId request, LayerIndex layer, const std::filesystem::path& path,
                 Micros expected_duration) override;
  TaskState suspend(TaskId id) override;
  TaskState resume(TaskId id) override;
  TaskState set_priority(TaskId id, Priority p) override;
  std::optional<ReadySignal> poll_ready(RequestId request) override;
  std::optional<RetrievalFailure> poll_failure(RequestId request) override;
  RetrievalTask task(TaskId id) const override;
  std::vector<TaskId> in_flight() const override;
  void set_listener(std::function<void()> on_event) override;

  /// Blocks until the task is terminal; returns its final snapshot.
  RetrievalTask wait(TaskId id);

 private:
  struct ReadContext;
  void worker_loop();
  bool should_stop_running(const RetrievalTask& t) const;
  void finish(TaskId id, std::unique_lock<std::mutex>& lock, std::optional<WeightShard> shard,
              ErrorKind kind, std::string message);
  void notify();

  EngineConfig config_;
  std::function<Micros()> clock_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  TaskTable table_;
  std::map<TaskId, std::unique_ptr<ReadContext>> contexts_;
  std::size_t running_ = 0;
  bool stopped_ = false;
  std::function<void()> listener_;
  std::vector<std::thread> workers_;
};

/// Minimal discrete-event clock used by virtual-time components.
class EventScheduler {
 public:
  virtual ~EventScheduler() = default;
  virtual Micros now() const = 0;
  virtual void schedule(Micros at, std::function<void()> fn) = 0;
};

/// Retrieval in virtual time. Running reads share one unit of disk
/// bandwidth (processor sharing); each needs expected_duration plus the
/// simulated-disk extra of service. Suspension is immediate.
class VirtualRetrieval final : public RetrievalBackend {
 public:
  VirtualRetrieval(EventScheduler& clock, const WeightStore& store, EngineConfig config);

  TaskId enqueue(RequestId request, LayerIndex layer, const std::filesystem::path& path,
                 Micros expected_duration) override;
  TaskState suspend(TaskId id) override;
  TaskState resume(TaskId id) override;
  TaskState set_priority(TaskId id, Priority p) override;
  std::optional<ReadySignal> poll_ready(RequestId request) override;
  std::optional<RetrievalFailure> poll_failure(RequestId request) override;
  RetrievalTask task(TaskId id) const override;
  std::vector<TaskId> in_flight() const override;
  void set_listener(std::function<void()> on_event) override;

 private:
  void advance();
  void reschedule();
  void dispatch();
  void stop_running(TaskId id);
  void complete(TaskId id);

  EventScheduler& clock_;
  const WeightStore& store_;
  EngineConfig config_;
  TaskTable table_;
  std::vector<TaskId> running_;
  std::map<TaskId, double> remaining_;
  std::map<TaskId, double> service_;
  Micros last_advance_ = 0;
  std::uint64_t generation_ = 0;
  std::function<void()> listener_;
};

/// Frees the block and shard buffer of one layer from the accountant.
/// Returns the bytes freed; 0 on a repeated release.
class MemoryAccountant;
std::uint64_t release_layer_buffers(MemoryAccountant& accountant, RequestId request,
                                    LayerIndex layer);

}  // namespace cicada
