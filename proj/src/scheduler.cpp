#include "cicada/scheduler.hpp"

#include <cmath>

namespace cicada {

std::string_view to_string(DecisionAction a) {
  return a == DecisionAction::Boosted ? "boosted" : "unchanged";
}

PriorityScheduler::PriorityScheduler(RetrievalBackend& io, SchedulerConfig config)
    : io_(io), config_(config) {
  if (config_.tick <= 0) throw Error(ErrorKind::Config, "scheduler tick must be positive");
  if (config_.ewma_alpha <= 0.0 || config_.ewma_alpha > 1.0)
    throw Error(ErrorKind::Config, "ewma_alpha must be in (0, 1]");
}

Micros PriorityScheduler::estimate(std::uint64_t bytes, Micros static_expected) const {
  if (config_.duration_model == DurationModel::Ewma && rate_)
    return std::max<Micros>(1, std::llround(*rate_ * static_cast<double>(bytes)));
  return static_expected;
}

void PriorityScheduler::on_layer_start(RequestId request, LayerIndex layer, Micros t0, TaskId task,
                                       std::uint64_t bytes, Micros static_expected) {
  RetrievalRecord r;
  r.request_id = request;
  r.layer_index = layer;
  r.task_id = task;
  r.t0 = t0;
  r.bytes = bytes;
  r.expected = estimate(bytes, static_expected);
  add_record(std::move(r));

  // a read issued while a boost is active waits for it like the others
  for (auto& [k, rec] : records_) {
    if (!rec.boosted || rec.task_id == task) continue;
    if (rec.request_id == request && layer < rec.layer_index) continue;
    if (holds_[task]++ == 0) io_.suspend(task);
    rec.suspended.push_back(task);
    break;
  }
}

void PriorityScheduler::add_record(RetrievalRecord record) {
  const Key k{record.layer_index, record.request_id};
  records_[k] = std::move(record);
}

RetrievalRecord& PriorityScheduler::find(RequestId request, LayerIndex layer) {
  auto it = records_.find({layer, request});
  if (it == records_.end())
    throw Error(ErrorKind::NoSuchRecord,
                "request " + std::to_string(request) + " layer " + std::to_string(layer));
  return it->second;
}

const RetrievalRecord& PriorityScheduler::record(RequestId request, LayerIndex layer) const {
  return const_cast<PriorityScheduler*>(this)->find(request, layer);
}

bool PriorityScheduler::boosted_task(TaskId id) const {
  for (const auto& [k, r] : records_)
    if (r.boosted && r.task_id == id) return true;
  return false;
}

Decision PriorityScheduler::check_and_adjust(RequestId request, LayerIndex layer, Micros now) {
  auto& rec = find(request, layer);
  Decision d;
  if (!config_.enabled || rec.boosted) return d;

  const auto task = io_.task(rec.task_id);
  if (is_terminal(task.state)) return d;
  if (!rec.issue_delay && task.started_at) rec.issue_delay = *task.started_at - rec.t0;
  // a read that has not started has no deadline yet
  if (!rec.issue_delay) return d;
  // already parked by another boost: it gets its turn when that one is done
  if (holds_.count(rec.task_id)) return d;
  if (now < rec.t0 + *rec.issue_delay + rec.expected) return d;

  rec.boosted = true;
  io_.set_priority(rec.task_id, Priority::High);
  for (TaskId other : io_.in_flight()) {
    if (other == rec.task_id || boosted_task(other)) continue;
    // earlier layers of the same request gate A_i through the apply chain
    const auto ot = io_.task(other);
    if (ot.request_id == request && ot.layer_index < layer) continue;
    if (holds_[other]++ == 0) io_.suspend(other);
    rec.suspended.push_back(other);
  }
  d.action = DecisionAction::Boosted;
  d.suspended = rec.suspended;
  log_.push_back({now, request, layer, d.action, d.suspended});
  return d;
}

std::vector<TaskId> PriorityScheduler::on_retrieval_done(RequestId request, LayerIndex layer,
                                                         Micros now,
                                                         std::optional<Micros> observed) {
  auto it = records_.find({layer, request});
  if (it == records_.end())
    throw Error(ErrorKind::NoSuchRecord,
                "request " + std::to_string(request) + " layer " + std::to_string(layer));
  auto rec = std::move(it->second);
  records_.erase(it);

  if (observed && rec.bytes > 0) {
    const double r = static_cast<double>(*observed) / static_cast<double>(rec.bytes);
    rate_ = rate_ ? config_.ewma_alpha * r + (1.0 - config_.ewma_alpha) * *rate_ : r;
  }

  std::vector<TaskId> resumed;
  for (TaskId t : rec.suspended) {
    auto h = holds_.find(t);
    if (h == holds_.end()) continue;
    if (--h->second == 0) {
      holds_.erase(h);
      io_.resume(t);
      resumed.push_back(t);
    }
  }
  (void)now;
  return resumed;
}

std::vector<Decision> PriorityScheduler::tick(Micros now) {
  std::vector<Key> keys;
  keys.reserve(records_.size());
  for (const auto& [k, r] : records_) keys.push_back(k);
  std::vector<Decision> out;
  for (const auto& [layer, request] : keys) {
    if (!records_.count({layer, request})) continue;
    auto d = check_and_adjust(request, layer, now);
    if (d.action == DecisionAction::Boosted) out.push_back(std::move(d));
  }
  return out;
}

}  // namespace cicada
