#ifndef ICE_ERROR_H_
#define ICE_ERROR_H_

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ice {

// Error codes carried in control-channel responses.
enum class ErrorCode {
  kNotFound,
  kInvalidParams,
  kPolicyDenied,
  kInstrumentBusy,
  kOutOfRange,
  kInternal,
  kUnauthenticated,
};

std::string_view to_string(ErrorCode code);
std::optional<ErrorCode> parse_error_code(std::string_view text);

struct ErrorInfo {
  ErrorCode code = ErrorCode::kInternal;
  std::string message;

  friend bool operator==(const ErrorInfo&, const ErrorInfo&) = default;
};

// Thrown by adapters and services; the dispatcher turns it into an error
// response carrying the same code and message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }
  ErrorInfo info() const { return {code_, what()}; }

 private:
  ErrorCode code_;
};

// Local failures of the transport: the peer was never reached, went away,
// or did not answer in time. These never originate from the remote side.
class TransportError : public std::runtime_error {
 public:
  enum class Kind { kConnectFailed, kClosed, kTimeout, kProtocol };

  TransportError(Kind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace ice

#endif  // ICE_ERROR_H_
