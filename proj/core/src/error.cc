#include "ice/error.h"

#include <array>
#include <utility>

namespace ice {
namespace {

constexpr std::array<std::pair<ErrorCode, std::string_view>, 7> kErrorNames{{
    {ErrorCode::kNotFound, "NotFound"},
    {ErrorCode::kInvalidParams, "InvalidParams"},
    {ErrorCode::kPolicyDenied, "PolicyDenied"},
    {ErrorCode::kInstrumentBusy, "InstrumentBusy"},
    {ErrorCode::kOutOfRange, "OutOfRange"},
    {ErrorCode::kInternal, "Internal"},
    {ErrorCode::kUnauthenticated, "Unauthenticated"},
}};

}  // namespace

std::string_view to_string(ErrorCode code) {
  for (const auto& [c, name] : kErrorNames) {
    if (c == code) return name;
  }
  return "Internal";
}

std::optional<ErrorCode> parse_error_code(std::string_view text) {
  for (const auto& [c, name] : kErrorNames) {
    if (name == text) return c;
  }
  return std::nullopt;
}

}  // namespace ice
