#ifndef ICE_REGISTRY_H_
#define ICE_REGISTRY_H_

// Name registry: binds exposed object names to the endpoint of the control
// server that serves them. Spoken over the frame codec as object "registry"
// with methods register, lookup, list and unregister.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "ice/channel.h"
#include "ice/net.h"
#include "ice/wire.h"

namespace ice::registry {

inline constexpr std::uint16_t kDefaultPort = 9090;
inline constexpr const char* kObjectName = "registry";

struct NameRecord {
  std::string name;
  std::string endpoint;
  wire::Value metadata = wire::Value::object();
  std::int64_t registered_at = 0;

  wire::Value to_json() const;
  static NameRecord from_json(const wire::Value& json);

  friend bool operator==(const NameRecord&, const NameRecord&) = default;
};

// In-memory map with an optional snapshot file rewritten after every change.
class Registry {
 public:
  Registry() = default;
  // Loads `snapshot` if it exists; later changes are written back to it.
  explicit Registry(std::filesystem::path snapshot);

  // Throws Error(kInvalidParams) for an empty name or a malformed endpoint.
  void register_name(const std::string& name, const std::string& endpoint,
                     wire::Value metadata = wire::Value::object());
  // Throws Error(kNotFound).
  NameRecord lookup(const std::string& name) const;
  // Sorted by name.
  std::vector<NameRecord> list(const std::string& prefix = {}) const;
  void unregister(const std::string& name);
  std::size_t size() const;

 private:
  void save_locked() const;

  mutable std::shared_mutex mutex_;
  std::map<std::string, NameRecord> records_;
  std::optional<std::filesystem::path> snapshot_;
};

// Applies one registry request.
wire::Message handle_request(Registry& registry, const wire::Message& request);

class RegistryServer {
 public:
  RegistryServer(std::shared_ptr<Registry> registry, FrameServerOptions options);

  void start() { server_.start(); }
  void stop() { server_.stop(); }
  std::uint16_t port() const { return server_.port(); }
  Registry& registry() { return *registry_; }

 private:
  std::shared_ptr<Registry> registry_;
  FrameServer server_;
};

class RegistryClient {
 public:
  explicit RegistryClient(net::Endpoint endpoint, std::string principal = {},
                          std::chrono::milliseconds timeout = std::chrono::milliseconds(5000))
      : endpoint_(std::move(endpoint)),
        principal_(std::move(principal)),
        timeout_(timeout) {}

  void register_name(const std::string& name, const std::string& endpoint,
                     const wire::Value& metadata = wire::Value::object());
  NameRecord lookup(const std::string& name);
  std::vector<NameRecord> list(const std::string& prefix = {});
  void unregister(const std::string& name);

  const net::Endpoint& endpoint() const { return endpoint_; }

 private:
  wire::Value call(const std::string& method, wire::Value params);

  net::Endpoint endpoint_;
  std::string principal_;
  std::chrono::milliseconds timeout_;
};

}  // namespace ice::registry

#endif  // ICE_REGISTRY_H_
