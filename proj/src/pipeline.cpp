#include "cicada/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <queue>
#include <set>
#include <thread>

#include "cicada/invariants.hpp"
#include "cicada/rng.hpp"

namespace cicada {

StrategyConfig StrategyConfig::of(StrategyName n) {
  switch (n) {
    case StrategyName::SP: return {n, false, false, false};
    case StrategyName::Mini: return {n, true, false, false};
    case StrategyName::Preload: return {n, false, true, true};
    case StrategyName::Cicada: return {n, true, true, true};
  }
  return {};
}

std::string_view to_string(StrategyName n) {
  switch (n) {
    case StrategyName::SP: return "SP";
    case StrategyName::Mini: return "Mini";
    case StrategyName::Preload: return "Preload";
    case StrategyName::Cicada: return "Cicada";
  }
  return "?";
}

StrategyConfig strategy_from_string(std::string_view s) {
  std::string low(s);
  for (auto& c : low) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (auto n : kAllStrategies) {
    std::string name(to_string(n));
    for (auto& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (name == low) return StrategyConfig::of(n);
  }
  throw Error(ErrorKind::Config, "unknown strategy '" + std::string(s) + "'");
}

std::string_view to_string(ClockMode m) { return m == ClockMode::Real ? "real" : "virtual"; }

ClockMode clock_mode_from_string(std::string_view s) {
  if (s == "real") return ClockMode::Real;
  if (s == "virtual") return ClockMode::Virtual;
  throw Error(ErrorKind::Config, "unknown mode '" + std::string(s) + "'");
}

// -- dependency tracking ---------------------------------------------------

bool can_apply(const std::vector<LayerProgress>& progress, LayerIndex i) {
  const auto& p = progress.at(i);
  return p.retrieved && p.constructed && (i == 0 || progress.at(i - 1).applied);
}

DependencyTracker::DependencyTracker(std::size_t layers)
    : n_(layers),
      flags_(std::make_unique<std::atomic<std::uint8_t>[]>(layers)),
      locks_(std::make_unique<std::mutex[]>(layers)) {
  for (std::size_t i = 0; i < n_; ++i) flags_[i].store(0, std::memory_order_relaxed);
}

std::uint8_t DependencyTracker::flags(LayerIndex i) const {
  if (i >= n_) throw Error(ErrorKind::InvariantViolation, "layer " + std::to_string(i) + " out of range");
  return flags_[i].load(std::memory_order_acquire);
}

void DependencyTracker::set(LayerIndex i, std::uint8_t bit) {
  flags(i);
  std::lock_guard lock(locks_[i]);
  if (flags_[i].load(std::memory_order_relaxed) & bit)
    throw Error(ErrorKind::InvariantViolation, "layer " + std::to_string(i) + " marked twice");
  flags_[i].fetch_or(bit, std::memory_order_acq_rel);
}

void DependencyTracker::mark_constructed(LayerIndex i) { set(i, kL); }
void DependencyTracker::mark_retrieved(LayerIndex i) { set(i, kR); }

void DependencyTracker::mark_applied(LayerIndex i) {
  if (!can_apply(i))
    throw Error(ErrorKind::InvariantViolation, "apply of layer " + std::to_string(i) + " before it was ready");
  set(i, kA);
  applied_count_.fetch_add(1, std::memory_order_acq_rel);
}

void DependencyTracker::mark_executed(LayerIndex i) {
  if (!(flags(i) & kA))
    throw Error(ErrorKind::InvariantViolation, "execute of layer " + std::to_string(i) + " before apply");
  set(i, kE);
}

bool DependencyTracker::can_apply(LayerIndex i) const {
  const auto f = flags(i);
  return (f & kR) && (f & kL) && (i == 0 || (flags(i - 1) & kA));
}

LayerProgress DependencyTracker::get(LayerIndex i) const {
  const auto f = flags(i);
  return {i, (f & kL) != 0, (f & kR) != 0, (f & kA) != 0, (f & kE) != 0};
}

std::vector<LayerProgress> DependencyTracker::snapshot() const {
  std::vector<LayerProgress> out;
  out.reserve(n_);
  for (LayerIndex i = 0; i < n_; ++i) out.push_back(get(i));
  return out;
}

LayerIndex DependencyTracker::next_to_apply() const {
  // A is serialized per request, so applied layers form a prefix
  return applied_count_.load(std::memory_order_acquire);
}

bool StallDetector::check(RequestId request, LayerIndex layer, const LayerProgress& p, bool a_idle) {
  if (!a_idle || !p.constructed || p.retrieved) return false;
  auto [it, fresh] = hinted_.try_emplace(request, layer);
  if (!fresh) {
    if (it->second == layer) return false;
    it->second = layer;
  }
  ++hints_;
  return true;
}

// -- helpers -----------------------------------------------------------------

std::vector<float> make_input(const ModelDescriptor& model, std::uint64_t seed) {
  if (model.layers.empty()) throw Error(ErrorKind::DegenerateModel, "model has no layers");
  SplitMix64 rng(mix_seed(seed, 0x1a2b3c4dULL));
  std::vector<float> x(model.layers.front().kernel_cols);
  for (auto& v : x) v = rng.symmetric_float();
  return x;
}

std::vector<float> reference_forward(const ModelDescriptor& model, const WeightStore& store,
                                     std::span<const float> input) {
  std::vector<float> x(input.begin(), input.end());
  for (const auto& spec : model.layers) {
    auto block = register_parameters(spec, RegistrationMode::FullSkipInit);
    restore_and_apply(block, store.load(store.path(model, spec.layer_index)));
    x = forward_affine(block, x, spec);
  }
  return x;
}

// -- hosts -------------------------------------------------------------------

namespace {

enum class Unit : std::size_t { L = 0, A = 1, E = 2 };

/// Executes stage jobs and timers for the controller. All callbacks run on
/// the control thread; job work may run on a worker thread.
class Host : public EventScheduler {
 public:
  using Done = std::function<void(Micros start, Micros end)>;
  virtual void run_job(Unit unit, Micros model_duration, std::function<void()> work, Done done) = 0;
  virtual void post(std::function<void()> fn) = 0;
  /// Runs callbacks until finished() holds.
  virtual void loop(const std::function<bool()>& finished) = 0;
  virtual Micros scaled(Micros model) const = 0;
};

class VirtualHost final : public Host {
 public:
  Micros now() const override { return now_; }

  void schedule(Micros at, std::function<void()> fn) override {
    events_.push({std::max(at, now_), seq_++, std::move(fn)});
  }

  void run_job(Unit, Micros d, std::function<void()> work, Done done) override {
    const Micros start = now_;
    schedule(now_ + d, [this, start, work = std::move(work), done = std::move(done)] {
      if (work) work();
      done(start, now_);
    });
  }

  void post(std::function<void()> fn) override { schedule(now_, std::move(fn)); }

  void loop(const std::function<bool()>& finished) override {
    while (!finished()) {
      if (events_.empty())
        throw Error(ErrorKind::InvariantViolation, "pipeline stalled with requests outstanding");
      auto ev = events_.top();
      events_.pop();
      now_ = ev.at;
      ev.fn();
    }
  }

  Micros scaled(Micros model) const override { return model; }

 private:
  struct Event {
    Micros at;
    std::uint64_t seq;
    std::function<void()> fn;
    bool operator>(const Event& o) const { return at != o.at ? at > o.at : seq > o.seq; }
  };
  Micros now_ = 0;
  std::uint64_t seq_ = 0;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> events_;
};

class RealHost final : public Host {
 public:
  explicit RealHost(double scale) : scale_(scale), epoch_(std::chrono::steady_clock::now()) {
    for (auto& w : workers_) w.thread = std::thread([this, &w] { work_loop(w); });
  }

  ~RealHost() override {
    for (auto& w : workers_) {
      {
        std::lock_guard lock(w.mu);
        w.stop = true;
      }
      w.cv.notify_all();
    }
    for (auto& w : workers_)
      if (w.thread.joinable()) w.thread.join();
  }

  Micros now() const override {
    return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - epoch_)
        .count();
  }

  void schedule(Micros at, std::function<void()> fn) override {
    {
      std::lock_guard lock(mu_);
      timers_.emplace(at, std::move(fn));
    }
    cv_.notify_all();
  }

  void post(std::function<void()> fn) override {
    {
      std::lock_guard lock(mu_);
      posted_.push_back(std::move(fn));
    }
    cv_.notify_all();
  }

  void run_job(Unit unit, Micros d, std::function<void()> work, Done done) override {
    auto& w = workers_[static_cast<std::size_t>(unit)];
    {
      std::lock_guard lock(w.mu);
      w.job = Job{scaled(d), std::move(work), std::move(done)};
    }
    w.cv.notify_all();
  }

  void loop(const std::function<bool()>& finished) override {
    while (!finished()) {
      std::vector<std::function<void()>> ready;
      {
        std::unique_lock lock(mu_);
        for (;;) {
          const Micros t = now();
          while (!timers_.empty() && timers_.begin()->first <= t) {
            ready.push_back(std::move(timers_.begin()->second));
            timers_.erase(timers_.begin());
          }
          while (!posted_.empty()) {
            ready.push_back(std::move(posted_.front()));
            posted_.pop_front();
          }
          if (!ready.empty()) break;
          if (timers_.empty()) {
            cv_.wait(lock);
          } else {
            cv_.wait_until(lock, epoch_ + std::chrono::microseconds(timers_.begin()->first));
          }
        }
      }
      for (auto& fn : ready) fn();
    }
  }

  Micros scaled(Micros model) const override {
    return static_cast<Micros>(std::llround(static_cast<double>(model) * scale_));
  }

 private:
  struct Job {
    Micros duration;
    std::function<void()> work;
    Done done;
  };
  struct Worker {
    std::thread thread;
    std::mutex mu;
    std::condition_variable cv;
    std::optional<Job> job;
    bool stop = false;
  };

  void work_loop(Worker& w) {
    for (;;) {
      Job job;
      {
        std::unique_lock lock(w.mu);
        w.cv.wait(lock, [&] { return w.stop || w.job.has_value(); });
        if (w.stop) return;
        job = std::move(*w.job);
        w.job.reset();
      }
      const Micros start = now();
      if (job.duration > 0) std::this_thread::sleep_for(std::chrono::microseconds(job.duration));
      if (job.work) job.work();
      const Micros end = now();
      post([done = std::move(job.done), start, end] { done(start, end); });
    }
  }

  double scale_;
  std::chrono::steady_clock::time_point epoch_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::multimap<Micros, std::function<void()>> timers_;
  std::deque<std::function<void()>> posted_;
  std::array<Worker, 3> workers_;
};

/// Forwards to the engine and counts the scheduler's suspend/resume calls.
class CountingBackend final : public RetrievalBackend {
 public:
  explicit CountingBackend(RetrievalBackend& inner) : inner_(inner) {}
  TaskId enqueue(RequestId r, LayerIndex l, const std::filesystem::path& p, Micros d) override {
    return inner_.enqueue(r, l, p, d);
  }
  TaskState suspend(TaskId id) override {
    ++suspends;
    return inner_.suspend(id);
  }
  TaskState resume(TaskId id) override {
    ++resumes;
    return inner_.resume(id);
  }
  TaskState set_priority(TaskId id, Priority p) override { return inner_.set_priority(id, p); }
  std::optional<ReadySignal> poll_ready(RequestId r) override { return inner_.poll_ready(r); }
  std::optional<RetrievalFailure> poll_failure(RequestId r) override { return inner_.poll_failure(r); }
  RetrievalTask task(TaskId id) const override { return inner_.task(id); }
  std::vector<TaskId> in_flight() const override { return inner_.in_flight(); }
  void set_listener(std::function<void()> fn) override { inner_.set_listener(std::move(fn)); }

  std::size_t suspends = 0;
  std::size_t resumes = 0;

 private:
  RetrievalBackend& inner_;
};

struct ReqState {
  InferenceRequest req;
  std::promise<InferenceResult> promise;
  std::unique_ptr<DependencyTracker> dep;
  RegistrationMode mode = RegistrationMode::FullWithInit;
  std::vector<ParameterBlock> blocks;
  std::vector<std::optional<WeightShard>> shards;
  std::vector<TaskId> tasks;
  std::vector<Micros> l_end, r_end, a_end;
  std::vector<bool> w_started;
  std::vector<float> act;
  InferenceResult result;
  std::size_t pending_tasks = 0;
  bool admitted = false;
  bool done = false;
  bool failed = false;
  /// First error raised by job work on a worker thread.
  std::optional<Error> work_error;

  const ModelDescriptor& model() const { return *req.model; }
  std::size_t n() const { return req.model->layers.size(); }
};

struct Ref {
  RequestId request;
  LayerIndex layer;
};

}  // namespace

// -- controller --------------------------------------------------------------

class Runtime::Impl {
 public:
  Impl(RuntimeConfig config, const WeightStore& store) : cfg_(std::move(config)), store_(store) {
    if (cfg_.max_in_flight == 0) throw Error(ErrorKind::Config, "max_in_flight must be >= 1");
    if (cfg_.mode == ClockMode::Real && !(cfg_.time_scale > 0.0))
      throw Error(ErrorKind::Config, "time_scale must be positive");
    if (cfg_.sample_period <= 0) throw Error(ErrorKind::Config, "sample_period must be positive");
  }

  ~Impl() {
    if (engine_) engine_->stop();
  }

  std::future<InferenceResult> submit(InferenceRequest req) {
    if (ran_) throw Error(ErrorKind::Config, "submit after run");
    if (!req.model || req.model->layers.empty())
      throw Error(ErrorKind::DegenerateModel, "request without model layers");
    if (req.input.size() != req.model->layers.front().kernel_cols)
      throw Error(ErrorKind::ShapeMismatch, "input has " + std::to_string(req.input.size()) +
                                                " values, first layer expects " +
                                                std::to_string(req.model->layers.front().kernel_cols));
    if (req.arrival_ts < 0) throw Error(ErrorKind::InvalidOffset, "negative arrival");
    if (states_.count(req.request_id))
      throw Error(ErrorKind::Config, "duplicate request id " + std::to_string(req.request_id));
    auto s = std::make_unique<ReqState>();
    s->req = std::move(req);
    auto fut = s->promise.get_future();
    const auto rid = s->req.request_id;
    states_.emplace(rid, std::move(s));
    return fut;
  }

  void run() {
    if (ran_) throw Error(ErrorKind::Config, "run called twice");
    ran_ = true;
    if (cfg_.mode == ClockMode::Virtual) {
      auto host = std::make_unique<VirtualHost>();
      io_ = std::make_unique<VirtualRetrieval>(*host, store_, cfg_.engine);
      host_ = std::move(host);
    } else {
      host_ = std::make_unique<RealHost>(cfg_.time_scale);
      auto ecfg = cfg_.engine;
      ecfg.time_scale = cfg_.time_scale;
      auto* h = host_.get();
      auto engine = std::make_unique<RetrievalEngine>(ecfg, [h] { return h->now(); });
      engine_ = engine.get();
      io_ = std::move(engine);
    }
    counting_ = std::make_unique<CountingBackend>(*io_);
    sched_ = std::make_unique<PriorityScheduler>(*counting_, scheduler_config());
    io_->set_listener([this] { host_->post([this] { poll_retrievals(); }); });

    std::vector<std::pair<Micros, RequestId>> order;
    for (const auto& [rid, s] : states_) order.emplace_back(s->req.arrival_ts, rid);
    std::sort(order.begin(), order.end());
    for (const auto& [at, rid] : order)
      host_->schedule(host_->scaled(at), [this, rid = rid] { arrive(rid); });

    const std::size_t total = states_.size();
    host_->loop([&] { return finished_ == total; });

    stats_.end_time = host_->now();
    stats_.memory.push_back(mem_.sample(stats_.end_time));
    stats_.peak_resident = mem_.peak_resident();
    stats_.peak_placeholder_payload = mem_.peak_placeholder_payload();
    stats_.peak_full_params = mem_.peak(MemoryBucket::FullParams);
    stats_.peak_registration_bytes = mem_.peak(MemoryBucket::Placeholders);
    stats_.decisions = sched_->log();
    stats_.stall_hints = stall_.hints();
    stats_.suspends = counting_->suspends;
    stats_.resumes = counting_->resumes;
    for (TaskId id : all_tasks_) stats_.tasks.push_back(io_->task(id));
    if (engine_) engine_->stop();
  }

  const RunStats& stats() const noexcept { return stats_; }

 private:
  SchedulerConfig scheduler_config() const {
    auto sc = cfg_.scheduler;
    if (cfg_.mode == ClockMode::Real)
      sc.tick = std::max<Micros>(50, static_cast<Micros>(std::llround(static_cast<double>(sc.tick) * cfg_.time_scale)));
    return sc;
  }

  ReqState& state(RequestId rid) { return *states_.at(rid); }

  void record(ReqState& s, Stage st, LayerIndex i, Micros a, Micros b) {
    s.result.events.push_back({s.req.request_id, st, i, a, b});
  }

  // admission

  void arrive(RequestId rid) {
    if (in_flight_ < cfg_.max_in_flight) {
      admit(rid);
    } else {
      waiting_.push_back(rid);
    }
  }

  void admit(RequestId rid) {
    auto& s = state(rid);
    ++in_flight_;
    s.admitted = true;
    active_.insert(s.req.request_id);
    const auto n = s.n();
    s.dep = std::make_unique<DependencyTracker>(n);
    s.mode = s.req.strategy.enable_miniloader ? RegistrationMode::MiniCompressed
                                              : RegistrationMode::FullWithInit;
    s.blocks.resize(n);
    s.shards.resize(n);
    s.tasks.assign(n, 0);
    s.l_end.assign(n, 0);
    s.r_end.assign(n, 0);
    s.a_end.assign(n, 0);
    s.w_started.assign(n, false);
    s.act = s.req.input;
    s.result.request_id = rid;
    s.result.model_id = s.model().model_id;
    s.result.strategy = s.req.strategy.name;
    s.result.arrival_ts = host_->scaled(s.req.arrival_ts);
    s.result.admitted_at = host_->now();
    s.result.weight_probes.assign(n, {});
    for (LayerIndex i = 0; i < n; ++i) l_queue_.push_back({rid, i});
    ensure_sampling();
    pump();
  }

  void ensure_sampling() {
    if (sampling_) return;
    sampling_ = true;
    stats_.memory.push_back(mem_.sample(host_->now()));
    host_->schedule(host_->now() + host_->scaled(cfg_.sample_period), [this] { sample_tick(); });
  }

  void sample_tick() {
    stats_.memory.push_back(mem_.sample(host_->now()));
    if (in_flight_ == 0) {
      sampling_ = false;
      return;
    }
    host_->schedule(host_->now() + host_->scaled(cfg_.sample_period), [this] { sample_tick(); });
  }

  void ensure_tick() {
    if (ticking_ || !sched_->has_records() || !sched_->config().enabled) return;
    ticking_ = true;
    host_->schedule(host_->now() + sched_->config().tick, [this] { scheduler_tick(); });
  }

  void scheduler_tick() {
    ticking_ = false;
    for (const auto& d : sched_->tick(host_->now())) {
      for (TaskId t : d.suspended)
        if (io_->task(t).state == TaskState::Suspended) stats_.observed_suspended.push_back(t);
    }
    ensure_tick();
  }

  // dispatch

  void pump() {
    if (!busy_[0]) start_l();
    if (!busy_[1]) start_a();
    if (!busy_[2]) start_e();
  }

  void start_l() {
    while (!l_queue_.empty() && state(l_queue_.front().request).failed) l_queue_.pop_front();
    if (l_queue_.empty()) return;
    const auto [rid, i] = l_queue_.front();
    l_queue_.pop_front();
    auto& s = state(rid);
    const auto& spec = s.model().layers[i];

    if (s.req.strategy.enable_decoupler) {
      const auto path = store_.path(s.model(), i);
      const TaskId tid = io_->enqueue(rid, i, path, spec.retrieval_cost);
      s.tasks[i] = tid;
      all_tasks_.push_back(tid);
      ++s.pending_tasks;
      if (s.req.strategy.enable_priority_scheduler) {
        sched_->on_layer_start(rid, i, host_->now(), tid, spec.weight_bytes,
                               host_->scaled(spec.retrieval_cost));
        ensure_tick();
      }
    }

    busy_[0] = true;
    const Micros d = construction_cost(spec, s.mode, cfg_.skip_factor);
    auto* sp = &s;
    host_->run_job(
        Unit::L, d,
        [sp, i, spec = &spec, seed = cfg_.init_seed] {
          try {
            sp->blocks[i] = register_parameters(*spec, sp->mode, seed);
          } catch (const Error& e) {
            if (!sp->work_error) sp->work_error = e;
          }
        },
        [this, rid = rid, i = i](Micros a, Micros b) { on_l_done(rid, i, a, b); });
  }

  void on_l_done(RequestId rid, LayerIndex i, Micros a, Micros b) {
    busy_[0] = false;
    auto& s = state(rid);
    if (!s.failed) {
      if (s.work_error) {
        fail(s, *s.work_error, i);
      } else {
        record(s, Stage::L, i, a, b);
        mem_.add_block(rid, i, s.blocks[i].payload_bytes(), kBlockHeaderBytes);
        s.dep->mark_constructed(i);
        s.l_end[i] = b;
      }
    }
    pump();
  }

  void start_a() {
    if (followup_) {
      const Ref r = *followup_;
      followup_.reset();
      if (!state(r.request).failed) {
        start_apply(state(r.request), r.layer);
        return;
      }
    }
    // earliest-ready candidate across requests
    ReqState* best = nullptr;
    LayerIndex best_layer = 0;
    Micros best_ready = 0;
    for (const auto& rid : admitted_order()) {
      auto& s = state(rid);
      if (s.failed || s.done) continue;
      const LayerIndex k = s.dep->next_to_apply();
      if (k >= s.n()) continue;
      Micros ready = 0;
      if (s.req.strategy.enable_decoupler) {
        if (!s.dep->can_apply(k)) continue;
        ready = std::max(s.l_end[k], s.r_end[k]);
      } else {
        const auto p = s.dep->get(k);
        if (!p.constructed || s.w_started[k]) continue;
        ready = s.l_end[k];
      }
      if (k > 0) ready = std::max(ready, s.a_end[k - 1]);
      if (!best || ready < best_ready) {
        best = &s;
        best_layer = k;
        best_ready = ready;
      }
    }
    if (best) {
      if (best->req.strategy.enable_decoupler) {
        start_apply(*best, best_layer);
      } else {
        start_fetch(*best, best_layer);
      }
      return;
    }
    detect_stalls();
  }

  std::vector<RequestId> admitted_order() const {
    std::vector<RequestId> out;
    for (RequestId rid : active_)
      if (!states_.at(rid)->done) out.push_back(rid);
    return out;
  }

  void detect_stalls() {
    for (const auto& rid : admitted_order()) {
      auto& s = state(rid);
      if (s.failed || !s.req.strategy.enable_decoupler || !s.req.strategy.enable_priority_scheduler)
        continue;
      const LayerIndex k = s.dep->next_to_apply();
      if (k >= s.n()) continue;
      if (stall_.check(rid, k, s.dep->get(k), true) && s.tasks[k] != 0)
        io_->set_priority(s.tasks[k], Priority::High);
    }
  }

  // monolithic weight loading: R then A back to back on the A-worker
  void start_fetch(ReqState& s, LayerIndex k) {
    busy_[1] = true;
    s.w_started[k] = true;
    const auto rid = s.req.request_id;
    const auto& spec = s.model().layers[k];
    const Micros d = spec.retrieval_cost + cfg_.engine.disk.extra(rid, k);
    auto* sp = &s;
    auto path = store_.path(s.model(), k);
    host_->run_job(
        Unit::A, d,
        [this, sp, k, path] {
          try {
            sp->shards[k] = store_.load(path);
          } catch (const Error& e) {
            if (!sp->work_error) sp->work_error = e;
          }
        },
        [this, rid, k](Micros a, Micros b) { on_fetch_done(rid, k, a, b); });
  }

  void on_fetch_done(RequestId rid, LayerIndex k, Micros a, Micros b) {
    busy_[1] = false;
    auto& s = state(rid);
    if (!s.failed) {
      if (s.work_error) {
        fail(s, *s.work_error, k);
      } else {
        record(s, Stage::R, k, a, b);
        mem_.add_shard(rid, k, s.shards[k]->payload.size());
        s.dep->mark_retrieved(k);
        s.r_end[k] = b;
        followup_ = Ref{rid, k};
      }
    }
    pump();
  }

  void start_apply(ReqState& s, LayerIndex k) {
    busy_[1] = true;
    const auto rid = s.req.request_id;
    const auto& spec = s.model().layers[k];
    auto* sp = &s;
    host_->run_job(
        Unit::A, spec.apply_cost,
        [sp, k] {
          try {
            restore_and_apply(sp->blocks[k], *sp->shards[k]);
          } catch (const Error& e) {
            if (!sp->work_error) sp->work_error = e;
          }
        },
        [this, rid, k](Micros a, Micros b) { on_apply_done(rid, k, a, b); });
  }

  void on_apply_done(RequestId rid, LayerIndex k, Micros a, Micros b) {
    busy_[1] = false;
    auto& s = state(rid);
    if (!s.failed) {
      if (s.work_error) {
        fail(s, *s.work_error, k);
      } else {
        record(s, Stage::A, k, a, b);
        s.dep->mark_applied(k);
        mem_.apply_block(rid, k, s.blocks[k].payload_bytes());
        s.a_end[k] = b;
        s.result.apply_order.push_back(k);
        const auto& payload = s.shards[k]->payload;
        for (std::size_t j = 0; j < 4 && j < payload.size(); ++j)
          s.result.weight_probes[k][j] = static_cast<std::uint8_t>(payload[j]);
        e_queue_.push_back({rid, k});
      }
    }
    pump();
  }

  void start_e() {
    while (!e_queue_.empty() && state(e_queue_.front().request).failed) e_queue_.pop_front();
    if (e_queue_.empty()) return;
    const auto [rid, k] = e_queue_.front();
    e_queue_.pop_front();
    auto& s = state(rid);
    const auto& spec = s.model().layers[k];
    busy_[2] = true;
    auto* sp = &s;
    host_->run_job(
        Unit::E, spec.compute_cost,
        [sp, k = k, spec = &spec] {
          try {
            sp->act = forward_affine(sp->blocks[k], sp->act, *spec);
          } catch (const Error& e) {
            if (!sp->work_error) sp->work_error = e;
          }
        },
        [this, rid = rid, k = k](Micros a, Micros b) { on_exec_done(rid, k, a, b); });
  }

  void on_exec_done(RequestId rid, LayerIndex k, Micros a, Micros b) {
    busy_[2] = false;
    auto& s = state(rid);
    if (!s.failed) {
      if (s.work_error) {
        fail(s, *s.work_error, k);
      } else {
        record(s, Stage::E, k, a, b);
        s.dep->mark_executed(k);
        if (s.req.strategy.enable_decoupler) {
          release_layer_buffers(mem_, rid, k);
          s.blocks[k] = ParameterBlock{};
          s.shards[k].reset();
        }
        if (k + 1 == s.n()) complete(s);
      }
    }
    pump();
  }

  // retrieval completions

  void poll_retrievals() {
    for (const auto& rid : admitted_order()) {
      auto& s = state(rid);
      if (s.pending_tasks == 0) continue;
      while (auto sig = io_->poll_ready(rid)) on_ready(s, std::move(*sig));
      while (auto f = io_->poll_failure(rid)) on_failure(s, *f);
    }
    pump();
  }

  void retire_record(ReqState& s, LayerIndex l, std::optional<Micros> observed) {
    if (!s.req.strategy.enable_priority_scheduler) return;
    sched_->on_retrieval_done(s.req.request_id, l, host_->now(), observed);
  }

  void on_ready(ReqState& s, ReadySignal sig) {
    --s.pending_tasks;
    const auto task = io_->task(sig.task_id);
    const Micros started = task.started_at.value_or(sig.completed_at);
    retire_record(s, sig.layer_index, sig.completed_at - started);
    if (s.failed) {
      maybe_retire(s);
      return;
    }
    const auto l = sig.layer_index;
    record(s, Stage::R, l, started, sig.completed_at);
    mem_.add_shard(s.req.request_id, l, sig.shard.payload.size());
    s.shards[l] = std::move(sig.shard);
    s.r_end[l] = sig.completed_at;
    s.dep->mark_retrieved(l);
  }

  void on_failure(ReqState& s, const RetrievalFailure& f) {
    --s.pending_tasks;
    retire_record(s, f.layer_index, std::nullopt);
    if (!s.failed) fail(s, Error(f.kind, f.message), f.layer_index);
    maybe_retire(s);
  }

  // completion

  void complete(ReqState& s) {
    const auto rid = s.req.request_id;
    if (!s.req.strategy.enable_decoupler) mem_.release_request(rid);
    Micros max_end = 0;
    for (const auto& e : s.result.events) max_end = std::max(max_end, e.end);
    s.result.output = s.act;
    s.result.latency = max_end - s.result.arrival_ts;
    if (cfg_.check_invariants) {
      OrderingOptions opt;
      opt.sequential_retrieval = !s.req.strategy.enable_decoupler;
      opt.layers = s.n();
      const auto v = check_ordering(s.result.events, opt);
      if (!v.empty()) {
        fail(s, Error(ErrorKind::InvariantViolation, describe(v.front())), v.front().layer_index);
        return;
      }
    }
    s.done = true;
    active_.erase(s.req.request_id);
    s.blocks.clear();
    s.shards.clear();
    s.promise.set_value(std::move(s.result));
    leave();
  }

  void fail(ReqState& s, const Error& e, LayerIndex layer) {
    s.failed = true;
    mem_.release_request(s.req.request_id);
    const std::string msg = "request " + std::to_string(s.req.request_id) + " layer " +
                            std::to_string(layer) + ": " + e.what();
    s.promise.set_exception(std::make_exception_ptr(Error(e.kind(), msg)));
    // outstanding reads still report back; the slot is released now
    s.done = s.pending_tasks == 0;
    if (s.done) active_.erase(s.req.request_id);
    leave();
  }

  void maybe_retire(ReqState& s) {
    if (s.failed && s.pending_tasks == 0) {
      s.done = true;
      active_.erase(s.req.request_id);
    }
  }

  void leave() {
    ++finished_;
    --in_flight_;
    while (in_flight_ < cfg_.max_in_flight && !waiting_.empty()) {
      const auto next = waiting_.front();
      waiting_.pop_front();
      admit(next);
    }
  }

  RuntimeConfig cfg_;
  const WeightStore& store_;
  bool ran_ = false;
  std::unique_ptr<Host> host_;
  std::unique_ptr<RetrievalBackend> io_;
  RetrievalEngine* engine_ = nullptr;
  std::unique_ptr<CountingBackend> counting_;
  std::unique_ptr<PriorityScheduler> sched_;
  StallDetector stall_;
  MemoryAccountant mem_;
  std::map<RequestId, std::unique_ptr<ReqState>> states_;
  // admitted and not yet done
  std::set<RequestId> active_;
  std::deque<Ref> l_queue_;
  std::deque<Ref> e_queue_;
  std::optional<Ref> followup_;
  std::array<bool, 3> busy_{};
  std::deque<RequestId> waiting_;
  std::size_t in_flight_ = 0;
  std::size_t finished_ = 0;
  bool sampling_ = false;
  bool ticking_ = false;
  std::vector<TaskId> all_tasks_;
  RunStats stats_;
};

Runtime::Runtime(RuntimeConfig config, const WeightStore& store)
    : impl_(std::make_unique<Impl>(std::move(config), store)) {}
Runtime::~Runtime() = default;

std::future<InferenceResult> Runtime::submit(InferenceRequest request) {
  return impl_->submit(std::move(request));
}
void Runtime::run() { impl_->run(); }
const RunStats& Runtime::stats() const noexcept { return impl_->stats(); }

InferenceResult run_request(const InferenceRequest& request, const RuntimeConfig& config,
                            const WeightStore& store, RunStats* stats) {
  Runtime rt(config, store);
  auto fut = rt.submit(request);
  rt.run();
  if (stats) *stats = rt.stats();
  return fut.get();
}

}  // namespace cicada
