#include "locemb/error.hpp"

namespace locemb {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidAxis: return "InvalidAxis";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::EmptyTape: return "EmptyTape";
    case ErrorCode::DegenerateBox: return "DegenerateBox";
    case ErrorCode::UnsupportedScheme: return "UnsupportedScheme";
    case ErrorCode::LocParseError: return "LocParseError";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::ContextOverflow: return "ContextOverflow";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::MissingComponent: return "MissingComponent";
    case ErrorCode::UnsatisfiableScene: return "UnsatisfiableScene";
    case ErrorCode::MissingCheckpoint: return "MissingCheckpoint";
    case ErrorCode::FrozenParamDrift: return "FrozenParamDrift";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace locemb
