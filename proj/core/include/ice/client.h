#ifndef ICE_CLIENT_H_
#define ICE_CLIENT_H_

#include <chrono>
#include <optional>
#include <string>

#include "ice/channel.h"
#include "ice/net.h"
#include "ice/wire.h"

namespace ice::client {

inline constexpr std::chrono::milliseconds kDefaultTimeout{5000};

// Remote handle on one exposed object.
//
// Each invoke sends exactly one request id. The endpoint is re-resolved from
// the registry at most once per call: when connecting fails (nothing has been
// written yet) or when the server answers NotFound and the registry now names
// a different endpoint. A request whose response is lost is never re-sent.
class Proxy {
 public:
  // Resolves `object_name` through the registry at `registry`.
  Proxy(std::string object_name, net::Endpoint registry, std::string principal,
        std::chrono::milliseconds timeout = kDefaultTimeout);

  // Talks to a known endpoint; no registry lookups.
  static Proxy direct(std::string object_name, net::Endpoint endpoint,
                      std::string principal,
                      std::chrono::milliseconds timeout = kDefaultTimeout);

  // Returns the Ok result. Throws ice::Error for remote errors and
  // TransportError for local ones (kTimeout, kConnectFailed, kClosed).
  wire::Value invoke(const std::string& method,
                     const wire::Value& params = wire::Value::object());

  const std::string& object_name() const { return object_name_; }
  const std::optional<net::Endpoint>& endpoint() const { return endpoint_; }
  void set_timeout(std::chrono::milliseconds timeout) { timeout_ = timeout; }

 private:
  Proxy() = default;
  net::Endpoint resolve();

  std::string object_name_;
  std::optional<net::Endpoint> registry_;
  std::optional<net::Endpoint> endpoint_;
  std::string principal_;
  std::chrono::milliseconds timeout_ = kDefaultTimeout;
  std::optional<Connection> conn_;
};

}  // namespace ice::client

#endif  // ICE_CLIENT_H_
