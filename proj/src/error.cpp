#include "spacefarm/error.hpp"

#include <array>
#include <utility>

namespace spacefarm {

namespace {

constexpr std::array<std::pair<ErrorCode, std::string_view>, 22> kNames{{
    {ErrorCode::kMalformedPayload, "MALFORMED_PAYLOAD"},
    {ErrorCode::kMalformedEntry, "MALFORMED_ENTRY"},
    {ErrorCode::kTxnNotOpen, "TXN_NOT_OPEN"},
    {ErrorCode::kUnknownTxn, "UNKNOWN_TXN"},
    {ErrorCode::kParticipantUnreachable, "PARTICIPANT_UNREACHABLE"},
    {ErrorCode::kSpaceUnavailable, "SPACE_UNAVAILABLE"},
    {ErrorCode::kConnectionFailed, "CONNECTION_FAILED"},
    {ErrorCode::kProtocolMismatch, "PROTOCOL_MISMATCH"},
    {ErrorCode::kSessionClosed, "SESSION_CLOSED"},
    {ErrorCode::kFrameTooLarge, "FRAME_TOO_LARGE"},
    {ErrorCode::kBadRequest, "BAD_REQUEST"},
    {ErrorCode::kAgentNotFound, "AGENT_NOT_FOUND"},
    {ErrorCode::kVersionMismatch, "VERSION_MISMATCH"},
    {ErrorCode::kAgentFailure, "AGENT_FAILURE"},
    {ErrorCode::kNotPositiveDefinite, "NOT_POSITIVE_DEFINITE"},
    {ErrorCode::kRowTimeout, "ROW_TIMEOUT"},
    {ErrorCode::kPositionOverflow, "POSITION_OVERFLOW"},
    {ErrorCode::kCutFailed, "CUT_FAILED"},
    {ErrorCode::kMaxAttemptsExceeded, "MAX_ATTEMPTS_EXCEEDED"},
    {ErrorCode::kConfigError, "CONFIG_ERROR"},
    {ErrorCode::kFileEntryMissing, "FILE_ENTRY_MISSING"},
    {ErrorCode::kInternal, "INTERNAL"},
}};

}  // namespace

std::string_view to_string(ErrorCode code) {
  for (const auto& [c, name] : kNames) {
    if (c == code) return name;
  }
  return "INTERNAL";
}

std::optional<ErrorCode> error_code_from_string(std::string_view text) {
  for (const auto& [c, name] : kNames) {
    if (name == text) return c;
  }
  return std::nullopt;
}

}  // namespace spacefarm
