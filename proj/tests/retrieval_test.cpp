#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <queue>
#include <random>
#include <set>
#include <thread>

#include "cicada/catalog.hpp"
#include "cicada/crc32.hpp"
#include "cicada/metrics.hpp"
#include "cicada/retrieval.hpp"
#include "cicada/weight_file.hpp"

using namespace cicada;
namespace fs = std::filesystem;
using namespace std::chrono_literals;

namespace {

Micros wall_us() {
  static const auto epoch = std::chrono::steady_clock::now();
  return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - epoch)
      .count();
}

// Custom models get width x width kernels, so file size is easy to pick.
struct Files {
  fs::path dir;
  ModelDescriptor model;
  Manifest manifest;

  Files(const std::string& name, std::size_t layers, std::uint32_t width) {
    dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    CostProfile p;
    p.custom_width = width;
    model = generate_model(ModelFamily::Custom, layers, 5, p);
    manifest = write_weight_files(model, 5, dir);
  }
  ~Files() { fs::remove_all(dir); }
  fs::path path(LayerIndex i) const { return manifest.at(i).path; }
};

bool history_legal(const RetrievalTask& t) {
  if (t.history.empty() || t.history.front() != TaskState::Queued) return false;
  for (std::size_t i = 1; i < t.history.size(); ++i)
    if (!legal_transition(t.history[i - 1], t.history[i])) return false;
  return true;
}

class SimClock final : public EventScheduler {
 public:
  Micros now() const override { return now_; }
  void schedule(Micros at, std::function<void()> fn) override {
    q_.push({std::max(at, now_), seq_++, std::move(fn)});
  }
  void run() { run_until(std::numeric_limits<Micros>::max()); }
  void run_until(Micros limit) {
    while (!q_.empty() && q_.top().at <= limit) {
      auto e = q_.top();
      q_.pop();
      now_ = e.at;
      e.fn();
    }
    now_ = std::max(now_, limit == std::numeric_limits<Micros>::max() ? now_ : limit);
  }

 private:
  struct Ev {
    Micros at;
    std::uint64_t seq;
    std::function<void()> fn;
    bool operator>(const Ev& o) const { return at != o.at ? at > o.at : seq > o.seq; }
  };
  Micros now_ = 0;
  std::uint64_t seq_ = 0;
  std::priority_queue<Ev, std::vector<Ev>, std::greater<>> q_;
};

}  // namespace

TEST(TaskStateMachine, TransitionTable) {
  using S = TaskState;
  const std::set<std::pair<S, S>> legal{{S::Queued, S::Running},    {S::Running, S::Suspended},
                                        {S::Suspended, S::Running}, {S::Running, S::Done},
                                        {S::Running, S::Failed}};
  for (auto a : {S::Queued, S::Running, S::Suspended, S::Done, S::Failed})
    for (auto b : {S::Queued, S::Running, S::Suspended, S::Done, S::Failed})
      EXPECT_EQ(legal_transition(a, b), legal.count({a, b}) == 1) << to_string(a) << "->" << to_string(b);
}

TEST(SimulatedDisk, DeterministicAndBounded) {
  SimulatedDisk d{42, 500, {}};
  for (RequestId r = 0; r < 20; ++r)
    for (LayerIndex l = 0; l < 10; ++l) {
      EXPECT_EQ(d.extra(r, l), d.extra(r, l));
      EXPECT_GE(d.extra(r, l), 0);
      EXPECT_LE(d.extra(r, l), 500);
    }
  d.extra_by_layer[3] = 9999;
  EXPECT_EQ(d.extra(7, 3), 9999);
  EXPECT_EQ(SimulatedDisk{}.extra(1, 1), 0);
}

TEST(WeightStores, GeneratedMatchesDirectory) {
  Files f("retrieval_stores", 3, 16);
  DirectoryWeightStore dir(f.dir.parent_path());
  GeneratedWeightStore gen(5);
  auto renamed = f.model;
  renamed.model_id = f.dir.filename().string();
  for (LayerIndex i = 0; i < 3; ++i) {
    const auto a = dir.load(dir.path(renamed, i));
    const auto b = gen.load(gen.path(renamed, i));
    EXPECT_EQ(a, b);
    EXPECT_EQ(gen.file_bytes(gen.path(renamed, i)), fs::file_size(f.path(i)));
    EXPECT_EQ(b.checksum, f.manifest[i].crc32);
  }
  EXPECT_FALSE(gen.exists("gen/none/layer_0000.cicw"));
  EXPECT_THROW(gen.load("gen/none/layer_0000.cicw"), Error);
}

TEST(RetrievalEngine, FifoWithoutIntervention) {
  Files f("retrieval_fifo", 3, 32);
  RetrievalEngine eng({}, wall_us);
  std::vector<TaskId> ids;
  for (LayerIndex i = 0; i < 3; ++i) ids.push_back(eng.enqueue(1, i, f.path(i), 100));
  std::vector<RetrievalTask> done;
  for (auto id : ids) done.push_back(eng.wait(id));
  for (std::size_t i = 1; i < done.size(); ++i) EXPECT_LE(*done[i - 1].started_at, *done[i].started_at);
  for (const auto& t : done) {
    EXPECT_EQ(t.state, TaskState::Done);
    EXPECT_EQ(t.bytes_read, fs::file_size(t.path));
    EXPECT_TRUE(t.completed_at.has_value());
  }
}

TEST(RetrievalEngine, MissingFileFails) {
  RetrievalEngine eng({}, wall_us);
  const auto id = eng.enqueue(4, 0, "/nonexistent/layer_0000.cicw", 10);
  const auto t = eng.wait(id);
  EXPECT_EQ(t.state, TaskState::Failed);
  ASSERT_TRUE(t.failure.has_value());
  EXPECT_EQ(*t.failure, ErrorKind::NotFound);
  EXPECT_TRUE(history_legal(t));
  EXPECT_TRUE(t.completed_at.has_value());
  const auto f = eng.poll_failure(4);
  ASSERT_TRUE(f.has_value());
  EXPECT_EQ(f->kind, ErrorKind::NotFound);
  EXPECT_FALSE(eng.poll_ready(4).has_value());
}

TEST(RetrievalEngine, OneSignalPerTask) {
  Files f("retrieval_signals", 8, 16);
  EngineConfig cfg;
  cfg.max_parallel_reads = 3;
  RetrievalEngine eng(cfg, wall_us);
  EXPECT_FALSE(eng.poll_ready(2).has_value());
  std::vector<TaskId> ids;
  for (LayerIndex i = 0; i < 8; ++i) ids.push_back(eng.enqueue(2, i, f.path(i), 10));
  for (auto id : ids) eng.wait(id);
  std::set<LayerIndex> layers;
  int n = 0;
  while (auto s = eng.poll_ready(2)) {
    ++n;
    layers.insert(s->layer_index);
    EXPECT_TRUE(s->shard.checksum_ok());
    EXPECT_EQ(s->shard.checksum, f.manifest[s->layer_index].crc32);
  }
  EXPECT_EQ(n, 8);
  EXPECT_EQ(layers.size(), 8u);
}

TEST(RetrievalEngine, SuspendFreezesProgressAndResumeCompletes) {
  Files f("retrieval_suspend", 1, 128);  // ~66 KB
  EngineConfig cfg;
  cfg.chunk_bytes = 1024;
  cfg.time_scale = 1.0;
  RetrievalEngine eng(cfg, wall_us);
  const auto id = eng.enqueue(1, 0, f.path(0), 300'000);  // ~0.3 s spread over 65 chunks
  while (eng.task(id).bytes_read < 8 * 1024) std::this_thread::sleep_for(1ms);
  EXPECT_EQ(eng.suspend(id), TaskState::Suspended);
  std::this_thread::sleep_for(15ms);  // let the worker reach its chunk boundary
  const auto before = eng.task(id).bytes_read;
  std::this_thread::sleep_for(10ms);
  const auto after = eng.task(id).bytes_read;
  EXPECT_LE(after - before, cfg.chunk_bytes);
  EXPECT_EQ(eng.task(id).state, TaskState::Suspended);
  eng.resume(id);
  const auto t = eng.wait(id);
  EXPECT_EQ(t.state, TaskState::Done);
  EXPECT_TRUE(history_legal(t));
  const auto sig = eng.poll_ready(1);
  ASSERT_TRUE(sig.has_value());
  EXPECT_EQ(sig->shard, read_shard_file(f.path(0)));
}

TEST(RetrievalEngine, SuspendOnTerminalIsNoop) {
  Files f("retrieval_noop", 1, 8);
  RetrievalEngine eng({}, wall_us);
  const auto id = eng.enqueue(1, 0, f.path(0), 1);
  eng.wait(id);
  EXPECT_EQ(eng.suspend(id), TaskState::Done);
  EXPECT_EQ(eng.resume(id), TaskState::Done);
  EXPECT_EQ(eng.set_priority(id, Priority::High), TaskState::Done);
  EXPECT_EQ(eng.task(id).history.back(), TaskState::Done);
}

TEST(RetrievalEngine, HighPriorityOvertakes) {
  Files f("retrieval_high", 2, 128);
  EngineConfig cfg;
  cfg.chunk_bytes = 2048;
  cfg.time_scale = 1.0;
  RetrievalEngine eng(cfg, wall_us);
  const auto a = eng.enqueue(1, 0, f.path(0), 100'000);
  const auto b = eng.enqueue(1, 1, f.path(1), 20'000);
  eng.set_priority(b, Priority::High);
  const auto tb = eng.wait(b);
  const auto ta = eng.wait(a);
  EXPECT_LE(*tb.completed_at, *ta.completed_at);
  const bool a_waited = *ta.started_at >= *tb.completed_at;
  const bool a_suspended =
      std::find(ta.history.begin(), ta.history.end(), TaskState::Suspended) != ta.history.end();
  EXPECT_TRUE(a_waited || a_suspended);
  EXPECT_TRUE(history_legal(ta));
}

TEST(RetrievalEngine, RandomPriorityFlipsKeepStateMachine) {
  Files f("retrieval_flips", 6, 48);
  std::mt19937 gen(21);
  for (int round = 0; round < 20; ++round) {
    EngineConfig cfg;
    cfg.max_parallel_reads = 1 + gen() % 2;
    cfg.chunk_bytes = 256;
    RetrievalEngine eng(cfg, wall_us);
    std::vector<TaskId> ids;
    for (LayerIndex i = 0; i < 6; ++i) ids.push_back(eng.enqueue(round, i, f.path(i), 10));
    for (int k = 0; k < 30; ++k)
      eng.set_priority(ids[gen() % ids.size()], gen() % 2 ? Priority::High : Priority::Normal);
    for (auto id : ids) {
      const auto t = eng.wait(id);
      EXPECT_EQ(t.state, TaskState::Done);
      EXPECT_TRUE(history_legal(t));
    }
  }
}

TEST(RetrievalEngine, EnqueueAfterStop) {
  RetrievalEngine eng({}, wall_us);
  eng.stop();
  try {
    eng.enqueue(1, 0, "x", 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EngineStopped);
  }
}

TEST(RetrievalEngine, ChaosKeepsIntegrity) {
  Files f("retrieval_chaos", 4, 40);
  std::mt19937 gen(77);
  int interrupted = 0;
  for (int round = 0; round < 100; ++round) {
    EngineConfig cfg;
    cfg.max_parallel_reads = 1 + gen() % 3;
    cfg.chunk_bytes = 128 + gen() % 512;
    cfg.time_scale = 1.0;  // paced so the operations land mid-read
    RetrievalEngine eng(cfg, wall_us);
    std::vector<TaskId> ids;
    for (LayerIndex i = 0; i < 4; ++i) ids.push_back(eng.enqueue(0, i, f.path(i), 1500));
    for (int k = 0; k < 12; ++k) {
      const auto id = ids[gen() % ids.size()];
      switch (gen() % 4) {
        case 0: eng.suspend(id); break;
        case 1: eng.resume(id); break;
        case 2: eng.set_priority(id, Priority::High); break;
        default: eng.set_priority(id, Priority::Normal); break;
      }
      std::this_thread::sleep_for(std::chrono::microseconds(gen() % 300));
    }
    for (auto id : ids) eng.resume(id);
    for (auto id : ids) {
      const auto t = eng.wait(id);
      interrupted += std::count(t.history.begin(), t.history.end(), TaskState::Suspended) > 0;
      ASSERT_EQ(t.state, TaskState::Done);
      ASSERT_TRUE(history_legal(t));
      ASSERT_EQ(t.bytes_read, fs::file_size(t.path));
    }
    while (auto s = eng.poll_ready(0)) {
      ASSERT_EQ(crc32(s->shard.payload), f.manifest[s->layer_index].crc32);
      ASSERT_EQ(s->shard.checksum, f.manifest[s->layer_index].crc32);
    }
  }
  EXPECT_GT(interrupted, 50);
}

TEST(VirtualRetrieval, DelayedFileCompletesLast) {
  Files f("retrieval_virtual_order", 3, 8);
  SimClock clock;
  DirectoryWeightStore store(f.dir.parent_path());
  auto m = f.model;
  m.model_id = f.dir.filename().string();
  EngineConfig cfg;
  cfg.max_parallel_reads = 3;
  cfg.disk.extra_by_layer[1] = 5000;
  VirtualRetrieval io(clock, store, cfg);
  for (LayerIndex i = 0; i < 3; ++i) io.enqueue(9, i, store.path(m, i), 1000);
  clock.run();
  std::vector<LayerIndex> order;
  while (auto s = io.poll_ready(9)) order.push_back(s->layer_index);
  EXPECT_EQ(order, (std::vector<LayerIndex>{0, 2, 1}));
}

TEST(VirtualRetrieval, ProcessorSharing) {
  GeneratedWeightStore store(1);
  CostProfile p;
  p.custom_width = 4;
  const auto m = generate_model(ModelFamily::Custom, 2, 1, p);
  SimClock clock;
  EngineConfig cfg;
  cfg.max_parallel_reads = 2;
  VirtualRetrieval io(clock, store, cfg);
  const auto a = io.enqueue(1, 0, store.path(m, 0), 1000);
  const auto b = io.enqueue(1, 1, store.path(m, 1), 1000);
  clock.run();
  EXPECT_EQ(*io.task(a).completed_at, 2000);
  EXPECT_EQ(*io.task(b).completed_at, 2000);
}

TEST(VirtualRetrieval, SuspendStopsServiceUntilResume) {
  GeneratedWeightStore store(1);
  CostProfile p;
  p.custom_width = 4;
  const auto m = generate_model(ModelFamily::Custom, 1, 1, p);
  SimClock clock;
  VirtualRetrieval io(clock, store, {});
  const auto a = io.enqueue(1, 0, store.path(m, 0), 1000);
  clock.run_until(400);
  EXPECT_EQ(io.suspend(a), TaskState::Suspended);
  const auto frozen = io.task(a).bytes_read;
  EXPECT_GT(frozen, 0u);
  clock.run_until(5000);
  EXPECT_EQ(io.task(a).bytes_read, frozen);
  io.resume(a);
  clock.run();
  EXPECT_EQ(*io.task(a).completed_at, 5600);
  EXPECT_TRUE(history_legal(io.task(a)));
}

TEST(VirtualRetrieval, MissingFileFailsThroughRunning) {
  GeneratedWeightStore store(1);
  SimClock clock;
  VirtualRetrieval io(clock, store, {});
  const auto a = io.enqueue(1, 0, "gen/none/layer_0000.cicw", 10);
  clock.run();
  const auto t = io.task(a);
  EXPECT_EQ(t.state, TaskState::Failed);
  EXPECT_EQ(t.history, (std::vector<TaskState>{TaskState::Queued, TaskState::Running, TaskState::Failed}));
  EXPECT_TRUE(io.poll_failure(1).has_value());
}

TEST(VirtualRetrieval, HighPreemptsNormal) {
  GeneratedWeightStore store(1);
  CostProfile p;
  p.custom_width = 4;
  const auto m = generate_model(ModelFamily::Custom, 2, 1, p);
  SimClock clock;
  VirtualRetrieval io(clock, store, {});
  const auto a = io.enqueue(1, 0, store.path(m, 0), 1000);
  const auto b = io.enqueue(1, 1, store.path(m, 1), 1000);
  clock.run_until(100);
  io.set_priority(b, Priority::High);
  clock.run();
  EXPECT_EQ(*io.task(b).completed_at, 1100);
  EXPECT_EQ(*io.task(a).completed_at, 2000);
  EXPECT_TRUE(history_legal(io.task(a)));
}

TEST(ReleaseBuffers, Bookkeeping) {
  MemoryAccountant acc;
  acc.add_block(1, 0, 400, 32);
  acc.apply_block(1, 0, 400);
  acc.add_shard(1, 0, 424);
  acc.add_block(1, 1, 13, 32);
  const auto before = acc.resident();
  EXPECT_EQ(release_layer_buffers(acc, 1, 0), 400u + 32u + 424u);
  EXPECT_EQ(acc.resident(), before - (400u + 32u + 424u));
  EXPECT_EQ(release_layer_buffers(acc, 1, 0), 0u);
  release_layer_buffers(acc, 1, 1);
  EXPECT_EQ(acc.request_bytes(1), 0u);
}
