#ifndef ICE_WIRE_H_
#define ICE_WIRE_H_

// Control-channel envelope and its framing.
//
// A frame is a 4-byte big-endian payload length N followed by N bytes of
// canonical JSON (sorted keys, no whitespace). The same codec carries the
// registry, control and data-store protocols.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ice/error.h"

namespace ice::wire {

// Parameter and result values: null, bool, int64, double, UTF-8 string,
// homogeneous list or string-keyed map.
using Value = nlohmann::json;

inline constexpr std::size_t kMaxPayloadBytes = 16u * 1024u * 1024u;
inline constexpr std::size_t kMaxIdLength = 64;

enum class Kind { kRequest, kResponse };
enum class Status { kOk, kError };

struct Message {
  std::string id;
  Kind kind = Kind::kRequest;
  // Request only.
  std::string object;
  std::string method;
  Value params = Value::object();
  std::string principal;
  // Response only.
  Status status = Status::kOk;
  std::optional<Value> result;
  std::optional<ErrorInfo> error;

  static Message request(std::string object, std::string method,
                         Value params, std::string principal);
  static Message ok(const Message& request, Value result);
  static Message failure(const Message& request, ErrorInfo error);

  bool is_request() const { return kind == Kind::kRequest; }

  friend bool operator==(const Message&, const Message&) = default;
};

class FrameError : public std::runtime_error {
 public:
  enum class Kind { kFrameTooLarge, kMalformedFrame, kTruncated };

  FrameError(Kind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// Pull-style byte source. read() returns 0 only at end of stream.
class ByteSource {
 public:
  virtual ~ByteSource() = default;
  virtual std::size_t read(std::span<std::uint8_t> out) = 0;
};

// Reads from a fixed buffer, remembering how much has been consumed.
class BufferSource : public ByteSource {
 public:
  explicit BufferSource(std::span<const std::uint8_t> data) : data_(data) {}
  std::size_t read(std::span<std::uint8_t> out) override;
  std::size_t consumed() const { return pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

// Returns an empty string when the value is admissible, else a reason.
std::string check_value(const Value& value);
// Empty when `msg` satisfies the envelope invariants, else a reason.
std::string check_message(const Message& msg);

// Canonical JSON payload of a message (no length prefix).
std::string to_payload(const Message& msg);
// Parses a payload; throws FrameError(kMalformedFrame).
Message from_payload(std::string_view payload);

// Throws std::invalid_argument for an invalid message and
// FrameError(kFrameTooLarge) when the payload exceeds the cap.
std::vector<std::uint8_t> encode_frame(const Message& msg);

// Consumes exactly one frame. Returns nullopt if the source ends cleanly
// before the first byte of a frame; throws FrameError(kTruncated) if it ends
// mid-frame and FrameError(kMalformedFrame) on a bad length or payload.
std::optional<Message> decode_frame(ByteSource& source);

// Random 32-hex-digit request identifier.
std::string new_request_id();

std::string_view to_string(Kind kind);
std::string_view to_string(Status status);

}  // namespace ice::wire

#endif  // ICE_WIRE_H_
