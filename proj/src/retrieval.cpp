#include "cicada/retrieval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "cicada/metrics.hpp"
#include "cicada/rng.hpp"

namespace cicada {

std::string_view to_string(TaskState s) {
  switch (s) {
    case TaskState::Queued: return "Queued";
    case TaskState::Running: return "Running";
    case TaskState::Suspended: return "Suspended";
    case TaskState::Done: return "Done";
    case TaskState::Failed: return "Failed";
  }
  return "?";
}

bool legal_transition(TaskState from, TaskState to) {
  using S = TaskState;
  switch (from) {
    case S::Queued: return to == S::Running;
    case S::Running: return to == S::Suspended || to == S::Done || to == S::Failed;
    case S::Suspended: return to == S::Running;
    case S::Done:
    case S::Failed: return false;
  }
  return false;
}

Micros SimulatedDisk::extra(RequestId request, LayerIndex layer) const {
  if (auto it = extra_by_layer.find(layer); it != extra_by_layer.end()) return it->second;
  if (max_extra <= 0) return 0;
  const auto h = mix_seed(seed ^ (request * 0x9E3779B97F4A7C15ULL), layer);
  return static_cast<Micros>(h % static_cast<std::uint64_t>(max_extra + 1));
}

// stores

std::filesystem::path DirectoryWeightStore::path(const ModelDescriptor& model,
                                                 LayerIndex layer) const {
  return shard_path(model_dir(model), layer);
}

bool DirectoryWeightStore::exists(const std::filesystem::path& p) const {
  std::error_code ec;
  return std::filesystem::is_regular_file(p, ec);
}

std::uint64_t DirectoryWeightStore::file_bytes(const std::filesystem::path& p) const {
  std::error_code ec;
  const auto n = std::filesystem::file_size(p, ec);
  return ec ? 0 : n;
}

WeightShard DirectoryWeightStore::load(const std::filesystem::path& p) const {
  return read_shard_file(p);
}

std::filesystem::path GeneratedWeightStore::path(const ModelDescriptor& model,
                                                 LayerIndex layer) const {
  if (layer >= model.layers.size())
    throw Error(ErrorKind::NotFound, model.model_id + " has no layer " + std::to_string(layer));
  auto p = shard_path(std::filesystem::path("gen") / model.model_id, layer);
  std::lock_guard lock(mu_);
  layers_[p.generic_string()] = model.layers[layer];
  return p;
}

const LayerSpec* GeneratedWeightStore::find(const std::filesystem::path& p) const {
  std::lock_guard lock(mu_);
  auto it = layers_.find(p.generic_string());
  return it == layers_.end() ? nullptr : &it->second;
}

bool GeneratedWeightStore::exists(const std::filesystem::path& p) const { return find(p) != nullptr; }

std::uint64_t GeneratedWeightStore::file_bytes(const std::filesystem::path& p) const {
  const auto* spec = find(p);
  return spec ? kShardHeaderBytes + 4 * spec->param_count : 0;
}

WeightShard GeneratedWeightStore::load(const std::filesystem::path& p) const {
  const auto* spec = find(p);
  if (!spec) throw Error(ErrorKind::NotFound, p.generic_string());
  const auto key = p.generic_string();
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(key); it != cache_.end()) return *it->second;
  }
  auto shard = std::make_shared<const WeightShard>(
      make_shard(spec->layer_index, generate_layer_weights(*spec, seed_)));
  std::lock_guard lock(mu_);
  cache_.emplace(key, shard);
  return *shard;
}

// task table

TaskId TaskTable::add(RequestId request, LayerIndex layer, const std::filesystem::path& path,
                      Micros expected, Micros now, std::uint64_t file_bytes) {
  RetrievalTask t;
  t.task_id = next_id_++;
  t.request_id = request;
  t.layer_index = layer;
  t.path = path;
  t.issued_at = now;
  t.expected_duration = expected;
  t.file_bytes = file_bytes;
  const auto id = t.task_id;
  tasks_.emplace(id, std::move(t));
  live_.insert(id);
  return id;
}

RetrievalTask& TaskTable::at(TaskId id) {
  auto it = tasks_.find(id);
  if (it == tasks_.end()) throw Error(ErrorKind::NotFound, "task " + std::to_string(id));
  return it->second;
}

const RetrievalTask& TaskTable::at(TaskId id) const {
  auto it = tasks_.find(id);
  if (it == tasks_.end()) throw Error(ErrorKind::NotFound, "task " + std::to_string(id));
  return it->second;
}

void TaskTable::transition(TaskId id, TaskState to) {
  auto& t = at(id);
  if (!legal_transition(t.state, to))
    throw Error(ErrorKind::InvariantViolation,
                "task " + std::to_string(id) + ": " + std::string(to_string(t.state)) + " -> " +
                    std::string(to_string(to)));
  t.state = to;
  t.history.push_back(to);
  if (is_terminal(to)) live_.erase(id);
}

namespace {
bool dispatchable(const RetrievalTask& t) {
  return !t.held && (t.state == TaskState::Queued || t.state == TaskState::Suspended);
}
}  // namespace

std::optional<TaskId> TaskTable::next_dispatchable() const {
  std::optional<TaskId> best;
  for (TaskId id : live_) {
    const auto& t = tasks_.at(id);
    if (!dispatchable(t)) continue;
    if (t.priority == Priority::High) return id;
    if (!best) best = id;
  }
  return best;
}

bool TaskTable::high_waiting() const {
  return std::any_of(live_.begin(), live_.end(), [this](TaskId id) {
    const auto& t = tasks_.at(id);
    return dispatchable(t) && t.priority == Priority::High;
  });
}

void TaskTable::push_signal(ReadySignal s) { signals_[s.request_id].push_back(std::move(s)); }
void TaskTable::push_failure(RetrievalFailure f) { failures_[f.request_id].push_back(std::move(f)); }

std::optional<ReadySignal> TaskTable::pop_signal(RequestId request) {
  auto it = signals_.find(request);
  if (it == signals_.end() || it->second.empty()) return std::nullopt;
  auto s = std::move(it->second.front());
  it->second.pop_front();
  return s;
}

std::optional<RetrievalFailure> TaskTable::pop_failure(RequestId request) {
  auto it = failures_.find(request);
  if (it == failures_.end() || it->second.empty()) return std::nullopt;
  auto f = std::move(it->second.front());
  it->second.pop_front();
  return f;
}

std::vector<TaskId> TaskTable::in_flight() const {
  return {live_.begin(), live_.end()};
}

// threaded engine

struct RetrievalEngine::ReadContext {
  std::ifstream in;
  std::vector<std::byte> buf;
  std::uint64_t offset = 0;
  std::uint64_t size = 0;
  double sleep_us = 0.0;
  bool busy = false;
};

RetrievalEngine::RetrievalEngine(EngineConfig config, std::function<Micros()> clock)
    : config_(std::move(config)), clock_(std::move(clock)) {
  if (config_.max_parallel_reads == 0) throw Error(ErrorKind::Config, "max_parallel_reads must be >= 1");
  if (config_.chunk_bytes == 0) throw Error(ErrorKind::Config, "chunk_bytes must be >= 1");
  for (std::size_t i = 0; i < config_.max_parallel_reads; ++i)
    workers_.emplace_back([this] { worker_loop(); });
}

RetrievalEngine::~RetrievalEngine() { stop(); }

void RetrievalEngine::stop() {
  {
    std::lock_guard lock(mu_);
    stopped_ = true;
  }
  cv_.notify_all();
  done_cv_.notify_all();
  for (auto& w : workers_)
    if (w.joinable()) w.join();
  workers_.clear();
}

TaskId RetrievalEngine::enqueue(RequestId request, LayerIndex layer,
                                const std::filesystem::path& path, Micros expected_duration) {
  std::unique_lock lock(mu_);
  if (stopped_) throw Error(ErrorKind::EngineStopped, "enqueue after stop");
  std::error_code ec;
  auto size = std::filesystem::file_size(path, ec);
  const auto id = table_.add(request, layer, path, expected_duration, clock_(), ec ? 0 : size);
  lock.unlock();
  cv_.notify_all();
  return id;
}

TaskState RetrievalEngine::suspend(TaskId id) {
  std::lock_guard lock(mu_);
  auto& t = table_.at(id);
  if (is_terminal(t.state)) return t.state;
  t.held = true;
  t.yielded = false;
  if (t.state == TaskState::Running) table_.transition(id, TaskState::Suspended);
  return t.state;
}

TaskState RetrievalEngine::resume(TaskId id) {
  std::unique_lock lock(mu_);
  auto& t = table_.at(id);
  if (is_terminal(t.state)) return t.state;
  t.held = false;
  const auto s = t.state;
  lock.unlock();
  cv_.notify_all();
  return s;
}

TaskState RetrievalEngine::set_priority(TaskId id, Priority p) {
  std::unique_lock lock(mu_);
  auto& t = table_.at(id);
  t.priority = p;
  const auto s = t.state;
  lock.unlock();
  cv_.notify_all();
  return s;
}

std::optional<ReadySignal> RetrievalEngine::poll_ready(RequestId request) {
  std::lock_guard lock(mu_);
  return table_.pop_signal(request);
}

std::optional<RetrievalFailure> RetrievalEngine::poll_failure(RequestId request) {
  std::lock_guard lock(mu_);
  return table_.pop_failure(request);
}

RetrievalTask RetrievalEngine::task(TaskId id) const {
  std::lock_guard lock(mu_);
  return table_.at(id);
}

std::vector<TaskId> RetrievalEngine::in_flight() const {
  std::lock_guard lock(mu_);
  return table_.in_flight();
}

void RetrievalEngine::set_listener(std::function<void()> on_event) {
  std::lock_guard lock(mu_);
  listener_ = std::move(on_event);
}

RetrievalTask RetrievalEngine::wait(TaskId id) {
  std::unique_lock lock(mu_);
  done_cv_.wait(lock, [&] { return stopped_ || is_terminal(table_.at(id).state); });
  return table_.at(id);
}

bool RetrievalEngine::should_stop_running(const RetrievalTask& t) const {
  if (t.state != TaskState::Running) return true;
  return t.priority == Priority::Normal && table_.high_waiting() &&
         running_ >= config_.max_parallel_reads;
}

void RetrievalEngine::notify() {
  done_cv_.notify_all();
  cv_.notify_all();
}

void RetrievalEngine::finish(TaskId id, std::unique_lock<std::mutex>& lock,
                             std::optional<WeightShard> shard, ErrorKind kind,
                             std::string message) {
  auto& t = table_.at(id);
  t.completed_at = clock_();
  if (shard) {
    table_.transition(id, TaskState::Done);
    table_.push_signal({t.request_id, t.layer_index, id, std::move(*shard), *t.completed_at});
  } else {
    table_.transition(id, TaskState::Failed);
    t.failure = kind;
    t.failure_message = message;
    table_.push_failure({t.request_id, t.layer_index, id, kind, std::move(message)});
  }
  contexts_.erase(id);
  --running_;
  notify();
  auto listener = listener_;
  if (listener) {
    lock.unlock();
    listener();
    lock.lock();
  }
}

void RetrievalEngine::worker_loop() {
  std::unique_lock lock(mu_);
  for (;;) {
    std::optional<TaskId> pick;
    cv_.wait(lock, [&] {
      if (stopped_) return true;
      pick = table_.next_dispatchable();
      // a task whose previous worker has not yet reached a chunk boundary
      // is left to that worker
      if (pick) {
        auto it = contexts_.find(*pick);
        if (it != contexts_.end() && it->second->busy) pick.reset();
      }
      return pick.has_value();
    });
    if (stopped_) return;

    const TaskId id = *pick;
    auto* t = &table_.at(id);
    table_.transition(id, TaskState::Running);
    t->yielded = false;
    if (!t->started_at) t->started_at = clock_();
    ++running_;

    auto& slot = contexts_[id];
    if (!slot) {
      slot = std::make_unique<ReadContext>();
      slot->in.open(t->path, std::ios::binary);
      if (!slot->in) {
        finish(id, lock, std::nullopt, ErrorKind::NotFound, t->path.string());
        continue;
      }
      slot->in.seekg(0, std::ios::end);
      slot->size = static_cast<std::uint64_t>(slot->in.tellg());
      slot->in.seekg(0);
      slot->buf.resize(slot->size);
      t->file_bytes = slot->size;
      const auto extra = config_.disk.extra(t->request_id, t->layer_index);
      slot->sleep_us = static_cast<double>(t->expected_duration + extra) * config_.time_scale;
    }
    ReadContext* ctx = slot.get();
    ctx->busy = true;

    for (;;) {
      t = &table_.at(id);
      if (stopped_) return;
      if (t->state == TaskState::Suspended && !t->held) {
        // resumed before this worker noticed the suspension
        table_.transition(id, TaskState::Running);
      }
      if (should_stop_running(*t)) {
        if (t->state == TaskState::Running) {
          table_.transition(id, TaskState::Suspended);
          t->yielded = !t->held;
        }
        ctx->busy = false;
        --running_;
        notify();
        break;
      }
      if (ctx->offset >= ctx->size) {
        std::optional<WeightShard> shard;
        ErrorKind kind = ErrorKind::Io;
        std::string msg;
        try {
          shard = parse_weight_shard(ctx->buf);
        } catch (const Error& e) {
          kind = e.kind();
          msg = e.what();
        }
        finish(id, lock, std::move(shard), kind, std::move(msg));
        break;
      }

      const auto n = std::min<std::uint64_t>(config_.chunk_bytes, ctx->size - ctx->offset);
      const double pause = ctx->size ? ctx->sleep_us * static_cast<double>(n) /
                                           static_cast<double>(ctx->size)
                                     : 0.0;
      lock.unlock();
      ctx->in.read(reinterpret_cast<char*>(ctx->buf.data() + ctx->offset),
                   static_cast<std::streamsize>(n));
      const bool ok = static_cast<bool>(ctx->in);
      if (pause >= 1.0)
        std::this_thread::sleep_for(std::chrono::microseconds(static_cast<std::int64_t>(pause)));
      lock.lock();
      t = &table_.at(id);
      if (!ok) {
        if (t->state == TaskState::Suspended) table_.transition(id, TaskState::Running);
        finish(id, lock, std::nullopt, ErrorKind::Io, "short read: " + t->path.string());
        break;
      }
      ctx->offset += n;
      t->bytes_read = ctx->offset;
    }
  }
}

// virtual engine

VirtualRetrieval::VirtualRetrieval(EventScheduler& clock, const WeightStore& store,
                                   EngineConfig config)
    : clock_(clock), store_(store), config_(std::move(config)), last_advance_(clock.now()) {
  if (config_.max_parallel_reads == 0) throw Error(ErrorKind::Config, "max_parallel_reads must be >= 1");
}

void VirtualRetrieval::advance() {
  const Micros now = clock_.now();
  const Micros dt = now - last_advance_;
  last_advance_ = now;
  if (dt <= 0 || running_.empty()) return;
  const double share = static_cast<double>(dt) / static_cast<double>(running_.size());
  for (auto id : running_) {
    auto& rem = remaining_[id];
    rem -= share;
    auto& t = table_.at(id);
    const double total = service_[id];
    const double frac = total > 0 ? std::clamp(1.0 - rem / total, 0.0, 1.0) : 1.0;
    t.bytes_read = static_cast<std::uint64_t>(std::floor(frac * static_cast<double>(t.file_bytes)));
  }
}

void VirtualRetrieval::stop_running(TaskId id) {
  running_.erase(std::find(running_.begin(), running_.end(), id));
  table_.transition(id, TaskState::Suspended);
}

void VirtualRetrieval::dispatch() {
  bool failed = false;
  for (;;) {
    if (running_.size() >= config_.max_parallel_reads) {
      if (!table_.high_waiting()) break;
      // preempt the most recently issued Normal read
      auto victim = std::find_if(running_.rbegin(), running_.rend(), [&](TaskId r) {
        return table_.at(r).priority == Priority::Normal;
      });
      if (victim == running_.rend()) break;
      const TaskId v = *victim;
      stop_running(v);
      table_.at(v).yielded = true;
    }
    auto next = table_.next_dispatchable();
    if (!next) break;
    auto& t = table_.at(*next);
    if (t.state == TaskState::Queued && !store_.exists(t.path)) {
      // existence is checked lazily when the read starts
      table_.transition(t.task_id, TaskState::Running);
      t.started_at = clock_.now();
      table_.transition(t.task_id, TaskState::Failed);
      t.completed_at = clock_.now();
      t.failure = ErrorKind::NotFound;
      t.failure_message = t.path.generic_string();
      table_.push_failure({t.request_id, t.layer_index, t.task_id, ErrorKind::NotFound,
                           t.failure_message});
      failed = true;
      continue;
    }
    table_.transition(t.task_id, TaskState::Running);
    t.yielded = false;
    if (!t.started_at) t.started_at = clock_.now();
    running_.push_back(t.task_id);
  }
  if (failed && listener_) clock_.schedule(clock_.now(), listener_);
}

void VirtualRetrieval::complete(TaskId id) {
  running_.erase(std::find(running_.begin(), running_.end(), id));
  auto& t = table_.at(id);
  t.completed_at = clock_.now();
  t.bytes_read = t.file_bytes;
  try {
    auto shard = store_.load(t.path);
    table_.transition(id, TaskState::Done);
    table_.push_signal({t.request_id, t.layer_index, id, std::move(shard), *t.completed_at});
  } catch (const Error& e) {
    table_.transition(id, TaskState::Failed);
    t.failure = e.kind();
    t.failure_message = e.what();
    table_.push_failure({t.request_id, t.layer_index, id, e.kind(), e.what()});
  }
  remaining_.erase(id);
}

void VirtualRetrieval::reschedule() {
  const auto gen = ++generation_;
  if (running_.empty()) return;
  double least = std::numeric_limits<double>::max();
  for (auto id : running_) least = std::min(least, remaining_[id]);
  const double wait = std::max(0.0, least) * static_cast<double>(running_.size());
  const Micros at = clock_.now() + static_cast<Micros>(std::ceil(wait - 1e-9));
  clock_.schedule(at, [this, gen] {
    if (gen != generation_) return;
    advance();
    std::vector<TaskId> finished;
    for (auto id : running_)
      if (remaining_[id] <= 1e-6) finished.push_back(id);
    for (auto id : finished) complete(id);
    dispatch();
    reschedule();
    if (!finished.empty() && listener_) listener_();
  });
}

TaskId VirtualRetrieval::enqueue(RequestId request, LayerIndex layer,
                                 const std::filesystem::path& path, Micros expected_duration) {
  advance();
  const auto id = table_.add(request, layer, path, expected_duration, clock_.now(),
                             store_.file_bytes(path));
  const auto total =
      static_cast<double>(std::max<Micros>(0, expected_duration) + config_.disk.extra(request, layer));
  service_[id] = total;
  remaining_[id] = total;
  dispatch();
  reschedule();
  return id;
}

TaskState VirtualRetrieval::suspend(TaskId id) {
  advance();
  auto& t = table_.at(id);
  if (is_terminal(t.state)) return t.state;
  t.held = true;
  t.yielded = false;
  if (t.state == TaskState::Running) stop_running(id);
  dispatch();
  reschedule();
  return table_.at(id).state;
}

TaskState VirtualRetrieval::resume(TaskId id) {
  advance();
  auto& t = table_.at(id);
  if (is_terminal(t.state)) return t.state;
  t.held = false;
  dispatch();
  reschedule();
  return table_.at(id).state;
}

TaskState VirtualRetrieval::set_priority(TaskId id, Priority p) {
  advance();
  table_.at(id).priority = p;
  dispatch();
  reschedule();
  return table_.at(id).state;
}

std::optional<ReadySignal> VirtualRetrieval::poll_ready(RequestId request) {
  return table_.pop_signal(request);
}

std::optional<RetrievalFailure> VirtualRetrieval::poll_failure(RequestId request) {
  return table_.pop_failure(request);
}

RetrievalTask VirtualRetrieval::task(TaskId id) const {
  auto t = table_.at(id);
  return t;
}

std::vector<TaskId> VirtualRetrieval::in_flight() const { return table_.in_flight(); }

void VirtualRetrieval::set_listener(std::function<void()> on_event) { listener_ = std::move(on_event); }

std::uint64_t release_layer_buffers(MemoryAccountant& accountant, RequestId request,
                                    LayerIndex layer) {
  return accountant.release_layer(request, layer);
}

}  // namespace cicada
