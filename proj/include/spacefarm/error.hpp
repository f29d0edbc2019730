#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace spacefarm {

// Stable error identifiers. The string forms travel on the wire and must not
// change once published.
enum class ErrorCode {
  kMalformedPayload,
  kMalformedEntry,
  kTxnNotOpen,
  kUnknownTxn,
  kParticipantUnreachable,
  kSpaceUnavailable,
  kConnectionFailed,
  kProtocolMismatch,
  kSessionClosed,
  kFrameTooLarge,
  kBadRequest,
  kAgentNotFound,
  kVersionMismatch,
  kAgentFailure,
  kNotPositiveDefinite,
  kRowTimeout,
  kPositionOverflow,
  kCutFailed,
  kMaxAttemptsExceeded,
  kConfigError,
  kFileEntryMissing,
  kInternal,
};

std::string_view to_string(ErrorCode code);
std::optional<ErrorCode> error_code_from_string(std::string_view text);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace spacefarm
