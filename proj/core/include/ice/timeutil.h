#ifndef ICE_TIMEUTIL_H_
#define ICE_TIMEUTIL_H_

#include <chrono>
#include <cstdint>
#include <string>

namespace ice {

std::int64_t unix_seconds();
// UTC, millisecond precision: 2026-01-02T03:04:05.678Z
std::string iso8601(std::chrono::system_clock::time_point t);
inline std::string iso8601_now() { return iso8601(std::chrono::system_clock::now()); }

}  // namespace ice

#endif  // ICE_TIMEUTIL_H_
