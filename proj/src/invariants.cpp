#include "cicada/invariants.hpp"

#include <array>
#include <map>

namespace cicada {

namespace {

struct Slot {
  std::array<int, 4> count{};
  std::array<StageInterval, 4> ev{};
};

std::size_t idx(Stage s) { return static_cast<std::size_t>(s); }

}  // namespace

std::vector<Violation> check_ordering(const std::vector<StageInterval>& events,
                                      const OrderingOptions& options) {
  std::map<RequestId, std::map<LayerIndex, Slot>> table;
  std::vector<Violation> out;
  for (const auto& e : events) {
    if (e.end < e.start) out.push_back({e.request_id, e.layer_index, "end < start"});
    auto& slot = table[e.request_id][e.layer_index];
    slot.count[idx(e.stage)]++;
    slot.ev[idx(e.stage)] = e;
  }

  for (auto& [rid, layers] : table) {
    std::size_t n = options.layers.value_or(layers.empty() ? 0 : layers.rbegin()->first + 1);
    auto bad = [&](LayerIndex i, std::string rule) { out.push_back({rid, i, std::move(rule)}); };
    for (LayerIndex i = 0; i < n; ++i) {
      auto it = layers.find(i);
      if (it == layers.end()) {
        bad(i, "no events");
        continue;
      }
      const auto& s = it->second;
      for (Stage st : {Stage::L, Stage::A, Stage::E}) {
        if (s.count[idx(st)] != 1)
          bad(i, std::string(to_string(st)) + " count " + std::to_string(s.count[idx(st)]));
      }
      const bool has_r = s.count[idx(Stage::R)] == 1;
      if (options.require_retrieval && !has_r)
        bad(i, "R count " + std::to_string(s.count[idx(Stage::R)]));
      if (s.count[idx(Stage::A)] != 1) continue;

      const auto& a = s.ev[idx(Stage::A)];
      if (s.count[idx(Stage::L)] == 1 && a.start < s.ev[idx(Stage::L)].end) bad(i, "A before L end");
      if (has_r && a.start < s.ev[idx(Stage::R)].end) bad(i, "A before R end");
      if (options.sequential_retrieval && has_r && s.count[idx(Stage::L)] == 1 &&
          s.ev[idx(Stage::R)].start < s.ev[idx(Stage::L)].end)
        bad(i, "R overlaps L in sequential mode");
      if (i > 0) {
        auto prev = layers.find(i - 1);
        if (prev != layers.end() && prev->second.count[idx(Stage::A)] == 1 &&
            a.start < prev->second.ev[idx(Stage::A)].end)
          bad(i, "A before previous A end");
        if (prev != layers.end() && prev->second.count[idx(Stage::E)] == 1 &&
            s.count[idx(Stage::E)] == 1 &&
            s.ev[idx(Stage::E)].start < prev->second.ev[idx(Stage::E)].end)
          bad(i, "E before previous E end");
      }
      if (s.count[idx(Stage::E)] == 1 && s.ev[idx(Stage::E)].start < a.end) bad(i, "E before A end");
    }
    for (const auto& [i, s] : layers)
      if (i >= n) bad(i, "layer out of range");
  }
  return out;
}

std::string describe(const Violation& v) {
  return "request " + std::to_string(v.request_id) + " layer " + std::to_string(v.layer_index) +
         ": " + v.rule;
}

}  // namespace cicada
