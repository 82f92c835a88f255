#ifndef ICE_CHANNEL_H_
#define ICE_CHANNEL_H_

// Framed request/response transport shared by the registry, the control
// server and the data store: a client Connection and a threaded FrameServer.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "ice/net.h"
#include "ice/policy.h"
#include "ice/wire.h"

namespace ice {

// Adapts a socket to wire::ByteSource with an overall deadline.
class SocketSource : public wire::ByteSource {
 public:
  SocketSource(net::Socket& socket, std::optional<net::Clock::time_point> deadline)
      : socket_(socket), deadline_(deadline) {}
  std::size_t read(std::span<std::uint8_t> out) override {
    return socket_.read_some(out, deadline_);
  }

 private:
  net::Socket& socket_;
  std::optional<net::Clock::time_point> deadline_;
};

class Connection {
 public:
  static Connection open(const net::Endpoint& endpoint,
                         std::chrono::milliseconds connect_timeout);

  // Writes the request and waits for its response. A peer that closes the
  // connection without answering raises TransportError(kClosed); no answer
  // before `timeout` raises TransportError(kTimeout).
  wire::Message call(const wire::Message& request,
                     std::chrono::milliseconds timeout);

  // False once the peer has gone away; reconnecting is then safe because
  // nothing has been written yet.
  bool usable() const { return socket_.valid() && !socket_.peer_closed(); }
  const net::Endpoint& endpoint() const { return endpoint_; }

 private:
  net::Socket socket_;
  net::Endpoint endpoint_;
};

// One-shot helper: connect, call, disconnect.
wire::Message call_once(const net::Endpoint& endpoint,
                        const wire::Message& request,
                        std::chrono::milliseconds timeout);

// Result of an Ok response, or throws ice::Error carrying the remote code.
wire::Value unwrap(const wire::Message& response);

struct PeerInfo {
  std::string address;
};

struct FrameServerOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  policy::Channel channel = policy::Channel::kControl;
  std::shared_ptr<policy::Engine> policy;
  // Drop the connection after answering a request with PolicyDenied.
  bool close_on_denied = false;
};

// Thread-per-connection server. Connections refused by policy at accept time
// are closed without reading. Requests addressed to object "policy" are
// administrative (method "reload") and are answered here.
class FrameServer {
 public:
  using Handler =
      std::function<wire::Message(const wire::Message&, const PeerInfo&)>;

  FrameServer(FrameServerOptions options, Handler handler);
  ~FrameServer();
  FrameServer(const FrameServer&) = delete;
  FrameServer& operator=(const FrameServer&) = delete;

  // Binds the listener; throws std::system_error if the port is taken.
  void start();
  // Stops accepting, lets in-flight requests finish, joins every thread.
  void stop();

  bool running() const { return running_; }
  std::uint16_t port() const { return port_; }
  std::size_t active_connections() const;
  const std::shared_ptr<policy::Engine>& policy() const { return options_.policy; }

 private:
  struct Session {
    std::thread thread;
    std::atomic<bool> done{false};
  };

  void accept_loop();
  void serve_connection(net::Socket socket, Session& session);
  wire::Message handle_admin(const wire::Message& request, const PeerInfo& peer);
  void reap_finished();

  FrameServerOptions options_;
  Handler handler_;
  net::Listener listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  mutable std::mutex sessions_mutex_;
  std::list<Session> sessions_;
};

}  // namespace ice

#endif  // ICE_CHANNEL_H_
