#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace valsteer {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  TokenOutOfRange,
  NonFiniteActivation,
  ContextOverflow,
  InfeasibleConstraint,
  IoFailure,
  FormatVersionMismatch,
  ChecksumMismatch,
  ParseError,
  MissingValue,
  UnknownValue,
  UnknownGroup,
  DuplicateAssignment,
  EmptyDataset,
  DegenerateLabels,
  NonFiniteLoss,
  IncompleteScores,
  NoKeptLayers,
  StaleSelection,
  UndefinedSign,
  LayerMismatch,
  EmptyPairs,
  UnknownPlanKind,
  UnsupportedFormat,
  EndpointUnreachable,
  RateLimited,
  NoValidVerdicts,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define VALSTEER_CHECK(cond, code, msg)          \
  do {                                           \
    if (!(cond)) throw ::valsteer::Error((code), (msg)); \
  } while (0)

}  // namespace valsteer
