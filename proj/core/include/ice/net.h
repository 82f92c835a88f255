#ifndef ICE_NET_H_
#define ICE_NET_H_

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

namespace ice::net {

using Clock = std::chrono::steady_clock;

// host:port pair. Port is always in 1..65535.
struct Endpoint {
  std::string host;
  std::uint16_t port = 0;

  // Throws ice::Error(kInvalidParams) on anything but "host:port".
  static Endpoint parse(std::string_view text);
  std::string to_string() const;

  friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

// Move-only owner of a connected TCP socket.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& other) noexcept : fd_(other.release()) {}
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }
  int release();
  void close();
  // Half-closes both directions; unblocks a reader in another thread.
  void shutdown();

  // Reads at most out.size() bytes. Returns 0 on orderly EOF. Throws
  // TransportError(kTimeout) once the deadline passes with nothing read.
  std::size_t read_some(std::span<std::uint8_t> out,
                        std::optional<Clock::time_point> deadline);
  void write_all(std::span<const std::uint8_t> data);

  // Waits until data (or EOF) is available; false on timeout.
  bool wait_readable(std::chrono::milliseconds timeout) const;
  // True when the peer has closed or reset the connection. Never blocks.
  bool peer_closed() const;

  // Dotted IPv4 address of the remote side, empty if unknown.
  std::string peer_address() const;

 private:
  int fd_ = -1;
};

// Opens a TCP connection or throws TransportError(kConnectFailed).
Socket connect(const Endpoint& endpoint, std::chrono::milliseconds timeout);

class Listener {
 public:
  // Binds and listens; port 0 picks an ephemeral port. Throws
  // std::system_error when the address is unavailable.
  static Listener bind(const std::string& host, std::uint16_t port);

  Listener() = default;
  Listener(Listener&& other) noexcept
      : fd_(other.fd_), port_(other.port_) { other.fd_ = -1; }
  Listener& operator=(Listener&& other) noexcept;
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;
  ~Listener() { close(); }

  std::uint16_t port() const { return port_; }
  bool valid() const { return fd_ >= 0; }
  void close();

  // Waits up to `timeout` for a connection.
  std::optional<Socket> accept(std::chrono::milliseconds timeout);

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

}  // namespace ice::net

#endif  // ICE_NET_H_
