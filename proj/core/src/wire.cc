#include "ice/wire.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>

namespace ice::wire {
namespace {

enum class ValueKind { kNull, kBool, kNumber, kString, kList, kMap };

ValueKind kind_of(const Value& v) {
  if (v.is_null()) return ValueKind::kNull;
  if (v.is_boolean()) return ValueKind::kBool;
  if (v.is_number()) return ValueKind::kNumber;
  if (v.is_string()) return ValueKind::kString;
  if (v.is_array()) return ValueKind::kList;
  return ValueKind::kMap;
}

// Unsigned integers that fit int64 are stored as signed so that equality and
// re-encoding do not depend on which parser branch produced them.
void normalize_integers(Value& v) {
  if (v.is_number_unsigned()) {
    auto u = v.get<std::uint64_t>();
    if (u > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) {
      throw FrameError(FrameError::Kind::kMalformedFrame,
                       "integer exceeds 64-bit signed range");
    }
    v = static_cast<std::int64_t>(u);
  } else if (v.is_structured()) {
    for (auto& child : v) normalize_integers(child);
  }
}

Kind parse_kind(const Value& v) {
  if (v == "Request") return Kind::kRequest;
  if (v == "Response") return Kind::kResponse;
  throw FrameError(FrameError::Kind::kMalformedFrame, "unknown kind");
}

Status parse_status(const Value& v) {
  if (v == "Ok") return Status::kOk;
  if (v == "Error") return Status::kError;
  throw FrameError(FrameError::Kind::kMalformedFrame, "unknown status");
}

std::string string_field(const Value& doc, const char* key) {
  auto it = doc.find(key);
  if (it == doc.end()) return {};
  if (!it->is_string()) {
    throw FrameError(FrameError::Kind::kMalformedFrame,
                     std::string("field '") + key + "' must be a string");
  }
  return it->get<std::string>();
}

void read_exact(ByteSource& source, std::span<std::uint8_t> out,
                bool at_frame_start) {
  std::size_t got = 0;
  while (got < out.size()) {
    std::size_t n = source.read(out.subspan(got));
    if (n == 0) {
      if (got == 0 && at_frame_start) return;
      throw FrameError(FrameError::Kind::kTruncated,
                       "stream ended inside a frame");
    }
    got += n;
    at_frame_start = false;
  }
}

}  // namespace

std::string_view to_string(Kind kind) {
  return kind == Kind::kRequest ? "Request" : "Response";
}

std::string_view to_string(Status status) {
  return status == Status::kOk ? "Ok" : "Error";
}

Message Message::request(std::string object, std::string method, Value params,
                         std::string principal) {
  Message m;
  m.id = new_request_id();
  m.kind = Kind::kRequest;
  m.object = std::move(object);
  m.method = std::move(method);
  m.params = params.is_null() ? Value::object() : std::move(params);
  m.principal = std::move(principal);
  return m;
}

Message Message::ok(const Message& request, Value result) {
  Message m;
  m.id = request.id;
  m.kind = Kind::kResponse;
  m.params = Value::object();
  m.status = Status::kOk;
  m.result = std::move(result);
  return m;
}

Message Message::failure(const Message& request, ErrorInfo error) {
  Message m;
  m.id = request.id;
  m.kind = Kind::kResponse;
  m.params = Value::object();
  m.status = Status::kError;
  if (error.message.empty()) error.message = std::string(ice::to_string(error.code));
  m.error = std::move(error);
  return m;
}

std::size_t BufferSource::read(std::span<std::uint8_t> out) {
  std::size_t n = std::min(out.size(), data_.size() - pos_);
  std::memcpy(out.data(), data_.data() + pos_, n);
  pos_ += n;
  return n;
}

std::string check_value(const Value& value) {
  switch (kind_of(value)) {
    case ValueKind::kNumber:
      if (value.is_number_float() && !std::isfinite(value.get<double>())) {
        return "non-finite float";
      }
      if (value.is_number_unsigned() &&
          value.get<std::uint64_t>() >
              static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) {
        return "integer exceeds 64-bit signed range";
      }
      return {};
    case ValueKind::kList: {
      if (value.empty()) return {};
      auto first = kind_of(value.front());
      for (const auto& item : value) {
        if (kind_of(item) != first) return "list elements differ in type";
        if (auto why = check_value(item); !why.empty()) return why;
      }
      return {};
    }
    case ValueKind::kMap:
      for (const auto& item : value) {
        if (auto why = check_value(item); !why.empty()) return why;
      }
      return {};
    default:
      return {};
  }
}

std::string check_message(const Message& msg) {
  if (msg.id.empty()) return "id is empty";
  if (msg.id.size() > kMaxIdLength) return "id longer than 64 characters";
  if (msg.kind == Kind::kRequest) {
    if (msg.object.empty()) return "request object is empty";
    if (msg.method.empty()) return "request method is empty";
    if (!msg.params.is_object()) return "params must be a map";
    if (msg.result || msg.error) return "request carries response fields";
    return check_value(msg.params);
  }
  if (!msg.object.empty() || !msg.method.empty() || !msg.params.empty()) {
    return "response carries request fields";
  }
  if (msg.status == Status::kOk) {
    if (!msg.result) return "ok response without result";
    if (msg.error) return "ok response with error";
    return check_value(*msg.result);
  }
  if (!msg.error) return "error response without error info";
  if (msg.result) return "error response with result";
  if (msg.error->message.empty()) return "error message is empty";
  return {};
}

std::string to_payload(const Message& msg) {
  Value doc = Value::object();
  doc["id"] = msg.id;
  doc["kind"] = to_string(msg.kind);
  if (!msg.principal.empty()) doc["principal"] = msg.principal;
  if (msg.kind == Kind::kRequest) {
    doc["object"] = msg.object;
    doc["method"] = msg.method;
    doc["params"] = msg.params;
  } else {
    doc["status"] = to_string(msg.status);
    if (msg.result) doc["result"] = *msg.result;
    if (msg.error) {
      doc["error"] = {{"code", ice::to_string(msg.error->code)},
                      {"message", msg.error->message}};
    }
  }
  return doc.dump(-1, ' ', false, Value::error_handler_t::strict);
}

Message from_payload(std::string_view payload) {
  Value doc;
  try {
    doc = Value::parse(payload);
  } catch (const Value::exception& e) {
    throw FrameError(FrameError::Kind::kMalformedFrame,
                     std::string("unparseable payload: ") + e.what());
  }
  if (!doc.is_object()) {
    throw FrameError(FrameError::Kind::kMalformedFrame,
                     "payload is not a JSON object");
  }
  normalize_integers(doc);

  static constexpr std::array<std::string_view, 9> kFields{
      "id", "kind", "object", "method", "params",
      "principal", "status", "result", "error"};
  for (const auto& [key, _] : doc.items()) {
    if (std::find(kFields.begin(), kFields.end(), key) == kFields.end()) {
      throw FrameError(FrameError::Kind::kMalformedFrame,
                       "unknown field '" + key + "'");
    }
  }
  if (!doc.contains("kind")) {
    throw FrameError(FrameError::Kind::kMalformedFrame, "missing kind");
  }

  Message m;
  m.id = string_field(doc, "id");
  m.kind = parse_kind(doc["kind"]);
  m.principal = string_field(doc, "principal");
  if (m.kind == Kind::kRequest) {
    m.object = string_field(doc, "object");
    m.method = string_field(doc, "method");
    m.params = doc.value("params", Value::object());
  } else {
    m.params = Value::object();
    if (!doc.contains("status")) {
      throw FrameError(FrameError::Kind::kMalformedFrame, "missing status");
    }
    m.status = parse_status(doc["status"]);
    if (auto it = doc.find("result"); it != doc.end()) m.result = *it;
    if (auto it = doc.find("error"); it != doc.end()) {
      if (!it->is_object() || !it->contains("code") ||
          !(*it)["code"].is_string()) {
        throw FrameError(FrameError::Kind::kMalformedFrame, "bad error info");
      }
      auto code = parse_error_code((*it)["code"].get<std::string>());
      if (!code) {
        throw FrameError(FrameError::Kind::kMalformedFrame,
                         "unknown error code");
      }
      m.error = ErrorInfo{*code, string_field(*it, "message")};
    }
  }
  if (auto why = check_message(m); !why.empty()) {
    throw FrameError(FrameError::Kind::kMalformedFrame, why);
  }
  return m;
}

std::vector<std::uint8_t> encode_frame(const Message& msg) {
  if (auto why = check_message(msg); !why.empty()) {
    throw std::invalid_argument("invalid message: " + why);
  }
  std::string payload;
  try {
    payload = to_payload(msg);
  } catch (const Value::exception& e) {
    throw std::invalid_argument(std::string("invalid message: ") + e.what());
  }
  if (payload.size() > kMaxPayloadBytes) {
    throw FrameError(FrameError::Kind::kFrameTooLarge,
                     "payload of " + std::to_string(payload.size()) +
                         " bytes exceeds the 16 MiB frame cap");
  }
  auto n = static_cast<std::uint32_t>(payload.size());
  std::vector<std::uint8_t> frame(4 + payload.size());
  frame[0] = static_cast<std::uint8_t>(n >> 24);
  frame[1] = static_cast<std::uint8_t>(n >> 16);
  frame[2] = static_cast<std::uint8_t>(n >> 8);
  frame[3] = static_cast<std::uint8_t>(n);
  std::memcpy(frame.data() + 4, payload.data(), payload.size());
  return frame;
}

std::optional<Message> decode_frame(ByteSource& source) {
  std::array<std::uint8_t, 4> header{};
  std::size_t probe = source.read(std::span(header).first(1));
  if (probe == 0) return std::nullopt;
  read_exact(source, std::span(header).subspan(1), false);
  std::uint32_t n = (std::uint32_t{header[0]} << 24) |
                    (std::uint32_t{header[1]} << 16) |
                    (std::uint32_t{header[2]} << 8) | std::uint32_t{header[3]};
  if (n == 0 || n > kMaxPayloadBytes) {
    throw FrameError(FrameError::Kind::kMalformedFrame,
                     "declared payload length " + std::to_string(n) +
                         " outside 1..16 MiB");
  }
  std::vector<std::uint8_t> payload(n);
  read_exact(source, payload, false);
  return from_payload(std::string_view(
      reinterpret_cast<const char*>(payload.data()), payload.size()));
}

std::string new_request_id() {
  thread_local std::mt19937_64 rng{std::random_device{}()};
  static constexpr char kHex[] = "0123456789abcdef";
  std::string id(32, '0');
  std::uint64_t a = rng(), b = rng();
  for (int i = 0; i < 16; ++i) {
    id[i] = kHex[(a >> (4 * i)) & 0xF];
    id[16 + i] = kHex[(b >> (4 * i)) & 0xF];
  }
  return id;
}

}  // namespace ice::wire
