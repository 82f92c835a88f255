#ifndef ICE_CONTROL_SERVER_H_
#define ICE_CONTROL_SERVER_H_

// Control-node daemon: exposes instrument adapters on the control channel.
//
// Every request is checked against the policy for its principal, resolved to
// an exposed object and method, and executed. Methods declared mutating at
// expose time hold the object's exclusive guard for the whole call, so they
// are totally ordered per object; the rest share the guard. Each dispatched
// request produces exactly one audit entry.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include "ice/channel.h"
#include "ice/instrument.h"
#include "ice/net.h"
#include "ice/wire.h"

namespace ice::control {

struct AuditEntry {
  std::uint64_t sequence_no = 0;
  std::string request_id;
  std::string principal;
  std::string object;
  std::string method;
  wire::Value params = wire::Value::object();
  // "Ok" or the error code name.
  std::string outcome;
  std::string started;
  std::string finished;

  wire::Value to_json() const;
  static AuditEntry from_json(const wire::Value& json);
};

// Append-only, gap-free. Optionally mirrored to a newline-delimited JSON file.
class AuditLog {
 public:
  explicit AuditLog(std::optional<std::filesystem::path> path = std::nullopt);

  // Assigns the next sequence number and returns it.
  std::uint64_t append(AuditEntry entry);
  std::vector<AuditEntry> entries() const;
  std::size_t size() const;

 private:
  mutable std::mutex mutex_;
  std::vector<AuditEntry> entries_;
  std::ofstream file_;
};

// Reads an NDJSON audit file back.
std::vector<AuditEntry> read_audit_file(const std::filesystem::path& path);

struct Exposure {
  std::string object_name;
  std::shared_ptr<instrument::Adapter> adapter;
  std::set<std::string> mutating_methods;
};

struct ControlServerOptions {
  FrameServerOptions listen;
  // Where exposures are registered; none means no self-registration.
  std::optional<net::Endpoint> registry;
  // Host published in registry records.
  std::string advertise_host = "127.0.0.1";
  std::optional<std::filesystem::path> audit_path;
  std::string registry_principal = "control-server";
};

class ControlServer {
 public:
  explicit ControlServer(ControlServerOptions options);
  ~ControlServer();
  ControlServer(const ControlServer&) = delete;
  ControlServer& operator=(const ControlServer&) = delete;

  // Throws Error(kInvalidParams) on a duplicate name or a mutating method
  // the adapter does not have. Registers immediately when running.
  void expose(const std::string& object_name,
              std::shared_ptr<instrument::Adapter> adapter,
              std::set<std::string> mutating_methods);

  wire::Message dispatch(const wire::Message& request,
                         const PeerInfo& peer = PeerInfo{"127.0.0.1"});

  // Binds and registers every exposure. Throws std::system_error if the port
  // is taken and TransportError/Error if the registry rejects or is absent.
  void start();
  // Unregisters (best effort), finishes in-flight requests, closes.
  void stop();

  std::uint16_t port() const { return server_.port(); }
  net::Endpoint endpoint() const;
  const AuditLog& audit() const { return audit_; }
  std::vector<std::string> object_names() const;

 private:
  struct Slot {
    Exposure exposure;
    std::unique_ptr<std::shared_mutex> guard = std::make_unique<std::shared_mutex>();
  };

  void register_exposure(const Exposure& exposure);
  wire::Message finish(const wire::Message& request, wire::Message response,
                       const std::string& started);

  ControlServerOptions options_;
  mutable std::shared_mutex slots_mutex_;
  std::map<std::string, Slot> slots_;
  AuditLog audit_;
  FrameServer server_;
};

// Settings of `ice serve-instrument`, from a YAML/JSON file and/or flags.
struct ServeConfig {
  std::string host = "127.0.0.1";
  std::uint16_t port = 9101;
  std::optional<std::string> registry;
  std::optional<std::filesystem::path> policy;
  std::filesystem::path store = "store";
  double time_scale = 1.0;
  std::string object_name = "u200.microscope";
  std::optional<std::filesystem::path> audit;
  std::string advertise_host = "127.0.0.1";

  // Throws std::runtime_error naming the offending line.
  static ServeConfig load(const std::filesystem::path& path);
};

}  // namespace ice::control

#endif  // ICE_CONTROL_SERVER_H_
