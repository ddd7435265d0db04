#pragma once

#include <stdexcept>
#include <string>

namespace locemb {

enum class ErrorCode {
  ShapeMismatch,
  InvalidAxis,
  NotScalar,
  EmptyTape,
  DegenerateBox,
  UnsupportedScheme,
  LocParseError,
  SequenceTooLong,
  ContextOverflow,
  EmptyMask,
  MissingComponent,
  UnsatisfiableScene,
  MissingCheckpoint,
  FrozenParamDrift,
  NonFiniteGradient,
  LengthMismatch,
  InvalidArgument,
  Io,
};

const char* to_string(ErrorCode code);

// All library failures surface as this type; code() is the machine-readable tag.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace locemb
