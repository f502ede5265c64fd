// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <string_view>

namespace paft {

enum class ErrorClass { kRecoverable, kFatal };

/// Every failure cause the runtime can surface. The class of an error is a
/// function of its reason alone; see classify_error().
enum class Reason {
  kTimeout,
  kPeerReset,
  kPeerDown,
  kFetchTooOld,
  kProtocolViolation,
  kNumerical,
  kInternalInvariant,
};

inline constexpr std::array<Reason, 7> kAllReasons = {
    Reason::kTimeout,           Reason::kPeerReset, Reason::kPeerDown,
    Reason::kFetchTooOld,       Reason::kProtocolViolation,
    Reason::kNumerical,         Reason::kInternalInvariant,
};

ErrorClass classify_error(Reason reason) noexcept;
std::string_view to_string(Reason reason) noexcept;
std::string_view to_string(ErrorClass cls) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Reason reason, const std::string& what)
      : std::runtime_error(what), reason_(reason) {}

  Reason reason() const noexcept { return reason_; }
  ErrorClass error_class() const noexcept { return classify_error(reason_); }
  bool recoverable() const noexcept {
    return error_class() == ErrorClass::kRecoverable;
  }

 private:
  Reason reason_;
};

/// Bad configuration or arguments. Never retried.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace paft
