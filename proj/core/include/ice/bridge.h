#ifndef ICE_BRIDGE_H_
#define ICE_BRIDGE_H_

// HTTP gateway for the operator console.
//
//   GET  /api/status                       cached EcosystemSnapshot (503 when
//                                          the instrument is unreachable)
//   POST /api/command  {method, params}    set_probe_position | start_scan |
//                                          abort_scan, forwarded as "console"
//   GET  /api/events                       server-sent events: status,
//                                          measurement, heartbeat
//   GET  /api/measurements/{id}/preview    8-bit PGM of an ICEM file
//
// One poller refreshes the snapshot every poll interval and publishes events;
// handlers only read the cache.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "ice/error.h"
#include "ice/net.h"
#include "ice/wire.h"

namespace ice::bridge {

struct BridgeOptions {
  net::Endpoint registry{"127.0.0.1", 9090};
  std::string object_name = "u200.microscope";
  std::filesystem::path mirror;
  std::string host = "127.0.0.1";
  std::uint16_t port = 8080;
  std::chrono::milliseconds poll_interval{500};
  std::chrono::milliseconds heartbeat_interval{15000};
  std::chrono::milliseconds timeout{2000};
  std::string principal = "console";
  std::size_t recent_limit = 50;
  std::optional<std::filesystem::path> static_dir;
};

// ErrorCode -> HTTP status. Total over ErrorCode.
int http_status(ErrorCode code);
// HTTP status used when the control channel itself fails.
inline constexpr int kChannelFailureStatus = 502;

struct Event {
  std::uint64_t id = 0;
  std::string type;
  wire::Value data;

  // "id: N\nevent: TYPE\ndata: JSON\n\n"
  std::string to_sse() const;
};

// Bounded broadcast log. Subscribers keep a cursor (the last id they saw);
// publishing never waits for them.
class EventHub {
 public:
  explicit EventHub(std::size_t capacity = 1024) : capacity_(capacity) {}

  std::uint64_t publish(std::string type, wire::Value data);
  std::uint64_t head() const;
  // Events newer than `cursor`, waiting up to `timeout` for the first one.
  std::vector<Event> wait_after(std::uint64_t cursor, std::chrono::milliseconds timeout) const;
  void close();
  bool closed() const;

 private:
  std::size_t capacity_;
  mutable std::mutex mutex_;
  mutable std::condition_variable cv_;
  std::deque<Event> events_;
  std::uint64_t next_id_ = 1;
  bool closed_ = false;
};

class Bridge {
 public:
  explicit Bridge(BridgeOptions options);
  ~Bridge();
  Bridge(const Bridge&) = delete;
  Bridge& operator=(const Bridge&) = delete;

  // Binds the HTTP port (throws std::runtime_error if unavailable) and starts
  // the poller.
  void start();
  void stop();

  std::uint16_t port() const;
  // Latest cached snapshot.
  wire::Value snapshot() const;
  // Refreshes the snapshot now (also done by the poller).
  void poll_now();
  EventHub& events();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ice::bridge

#endif  // ICE_BRIDGE_H_
