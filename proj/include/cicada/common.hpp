#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cicada {

/// Microseconds. Used both for durations and for timestamps relative to a
/// per-run monotonic epoch.
using Micros = std::int64_t;

using LayerIndex = std::uint32_t;
using RequestId = std::uint64_t;
using TaskId = std::uint64_t;

/// Pipeline stage tags: layer construction, weight retrieval, weight
/// application, inference execution.
enum class Stage : std::uint8_t { L, R, A, E };

constexpr std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::L: return "L";
    case Stage::R: return "R";
    case Stage::A: return "A";
    case Stage::E: return "E";
  }
  return "?";
}

Stage stage_from_string(std::string_view s);

enum class ErrorKind {
  DegenerateModel,
  InvalidProfile,
  FormatError,
  CorruptShard,
  Truncated,
  Io,
  DegenerateLayer,
  ShapeMismatch,
  NotMaterialized,
  EngineStopped,
  NotFound,
  NoSuchRecord,
  InvalidInterval,
  EmptyRun,
  UnknownModel,
  InvalidOffset,
  InvariantViolation,
  Config,
};

std::string_view to_string(ErrorKind k);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace cicada
