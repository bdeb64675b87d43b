#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cicada/metrics.hpp"

namespace cicada {

struct Violation {
  RequestId request_id = 0;
  LayerIndex layer_index = 0;
  std::string rule;
};

struct OrderingOptions {
  /// Baseline without decoupling: R_i may only start once L_i has ended.
  bool sequential_retrieval = false;
  /// Every layer must carry exactly one R event.
  bool require_retrieval = true;
  /// Expected layer count per request; inferred from the events when unset.
  std::optional<std::size_t> layers;
};

/// Checks per-request stage ordering and event counts:
///   start(A_i) >= end(L_i), end(R_i), end(A_{i-1})
///   start(E_i) >= end(A_i), end(E_{i-1})
///   exactly one L, A, E (and R) per layer, end >= start.
std::vector<Violation> check_ordering(const std::vector<StageInterval>& events,
                                      const OrderingOptions& options = {});

std::string describe(const Violation& v);

}  // namespace cicada
