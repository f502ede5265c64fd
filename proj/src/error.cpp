// SPDX-License-Identifier: Apache-2.0
#include "paft/error.hpp"

namespace paft {

ErrorClass classify_error(Reason reason) noexcept {
  switch (reason) {
    case Reason::kTimeout:
    case Reason::kPeerReset:
    case Reason::kPeerDown:
    case Reason::kFetchTooOld:
      return ErrorClass::kRecoverable;
    case Reason::kProtocolViolation:
    case Reason::kNumerical:
    case Reason::kInternalInvariant:
      return ErrorClass::kFatal;
  }
  return ErrorClass::kFatal;
}

std::string_view to_string(Reason reason) noexcept {
  switch (reason) {
    case Reason::kTimeout: return "timeout";
    case Reason::kPeerReset: return "peer_reset";
    case Reason::kPeerDown: return "peer_down";
    case Reason::kFetchTooOld: return "fetch_too_old";
    case Reason::kProtocolViolation: return "protocol_violation";
    case Reason::kNumerical: return "numerical";
    case Reason::kInternalInvariant: return "internal_invariant";
  }
  return "unknown";
}

std::string_view to_string(ErrorClass cls) noexcept {
  return cls == ErrorClass::kRecoverable ? "recoverable" : "fatal";
}

}  // namespace paft
