#include "cicada/common.hpp"

namespace cicada {

Stage stage_from_string(std::string_view s) {
  if (s == "L") return Stage::L;
  if (s == "R") return Stage::R;
  if (s == "A") return Stage::A;
  if (s == "E") return Stage::E;
  throw Error(ErrorKind::FormatError, "unknown stage tag '" + std::string(s) + "'");
}

std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::DegenerateModel: return "DegenerateModel";
    case ErrorKind::InvalidProfile: return "InvalidProfile";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::CorruptShard: return "CorruptShard";
    case ErrorKind::Truncated: return "Truncated";
    case ErrorKind::Io: return "Io";
    case ErrorKind::DegenerateLayer: return "DegenerateLayer";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NotMaterialized: return "NotMaterialized";
    case ErrorKind::EngineStopped: return "EngineStopped";
    case ErrorKind::NotFound: return "NotFound";
    case ErrorKind::NoSuchRecord: return "NoSuchRecord";
    case ErrorKind::InvalidInterval: return "InvalidInterval";
    case ErrorKind::EmptyRun: return "EmptyRun";
    case ErrorKind::UnknownModel: return "UnknownModel";
    case ErrorKind::InvalidOffset: return "InvalidOffset";
    case ErrorKind::InvariantViolation: return "InvariantViolation";
    case ErrorKind::Config: return "Config";
  }
  return "Unknown";
}

}  // namespace cicada
