#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>

namespace fprobe {

enum class ErrorCode {
  kDimension,
  kNonFinite,
  kInvalidArgument,
  kTapeConsumed,
  kMissingFile,
  kHeaderMismatch,
  kOverlappingSplits,
  kUnknownView,
  kUnknownClass,
  kBadFormat,
  kNoCls,
  kEmptySplit,
  kIo,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimension: return "DIMENSION";
    case ErrorCode::kNonFinite: return "NON_FINITE";
    case ErrorCode::kInvalidArgument: return "INVALID_ARGUMENT";
    case ErrorCode::kTapeConsumed: return "TAPE_CONSUMED";
    case ErrorCode::kMissingFile: return "MISSING_FILE";
    case ErrorCode::kHeaderMismatch: return "HEADER_MISMATCH";
    case ErrorCode::kOverlappingSplits: return "OVERLAPPING_SPLITS";
    case ErrorCode::kUnknownView: return "UNKNOWN_VIEW";
    case ErrorCode::kUnknownClass: return "UNKNOWN_CLASS";
    case ErrorCode::kBadFormat: return "BAD_FORMAT";
    case ErrorCode::kNoCls: return "NO_CLS";
    case ErrorCode::kEmptySplit: return "EMPTY_SPLIT";
    case ErrorCode::kIo: return "IO";
  }
  return "UNKNOWN";
}

/// Single exception type for the library; `code()` tells callers (and the CLI
/// exit-code mapping) what went wrong.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// True for the numerical family of failures (CLI exit code 3).
inline bool is_numerical(ErrorCode code) {
  return code == ErrorCode::kNonFinite || code == ErrorCode::kDimension ||
         code == ErrorCode::kTapeConsumed;
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

/// Builds the message only on failure.
template <typename MakeMessage>
  requires std::is_invocable_r_v<std::string, MakeMessage>
inline void require(bool condition, ErrorCode code, MakeMessage&& make_message) {
  if (!condition) throw Error(code, make_message());
}

}  // namespace fprobe
