#include "ice/channel.h"

#include <spdlog/spdlog.h>

namespace ice {
namespace {

constexpr auto kIdlePoll = std::chrono::milliseconds(50);
// Bound on how long a peer may take to deliver the rest of a started frame.
constexpr auto kFrameBodyTimeout = std::chrono::seconds(30);

}  // namespace

Connection Connection::open(const net::Endpoint& endpoint,
                            std::chrono::milliseconds connect_timeout) {
  Connection conn;
  conn.socket_ = net::connect(endpoint, connect_timeout);
  conn.endpoint_ = endpoint;
  return conn;
}

wire::Message Connection::call(const wire::Message& request,
                               std::chrono::milliseconds timeout) {
  auto deadline = net::Clock::now() + timeout;
  socket_.write_all(wire::encode_frame(request));
  SocketSource source(socket_, deadline);
  while (true) {
    std::optional<wire::Message> response;
    try {
      response = wire::decode_frame(source);
    } catch (const wire::FrameError& e) {
      socket_.close();
      if (e.kind() == wire::FrameError::Kind::kTruncated) {
        throw TransportError(TransportError::Kind::kClosed,
                             "connection closed mid-response");
      }
      throw TransportError(TransportError::Kind::kProtocol, e.what());
    } catch (const TransportError&) {
      // A late response would otherwise be read by the next call.
      socket_.close();
      throw;
    }
    if (!response) {
      socket_.close();
      throw TransportError(TransportError::Kind::kClosed,
                           "connection closed by " + endpoint_.to_string() +
                               " before a response arrived");
    }
    if (response->kind == wire::Kind::kResponse && response->id == request.id) {
      return *std::move(response);
    }
  }
}

wire::Message call_once(const net::Endpoint& endpoint,
                        const wire::Message& request,
                        std::chrono::milliseconds timeout) {
  auto conn = Connection::open(endpoint, timeout);
  return conn.call(request, timeout);
}

wire::Value unwrap(const wire::Message& response) {
  if (response.status == wire::Status::kError) {
    const auto& err = *response.error;
    throw Error(err.code, err.message);
  }
  return response.result.value_or(wire::Value());
}

FrameServer::FrameServer(FrameServerOptions options, Handler handler)
    : options_(std::move(options)), handler_(std::move(handler)) {
  if (!options_.policy) options_.policy = policy::Engine::allow_all();
}

FrameServer::~FrameServer() { stop(); }

void FrameServer::start() {
  listener_ = net::Listener::bind(options_.host, options_.port);
  port_ = listener_.port();
  stopping_ = false;
  running_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
}

void FrameServer::stop() {
  if (!running_.exchange(false)) return;
  stopping_ = true;
  if (acceptor_.joinable()) acceptor_.join();
  listener_.close();
  std::lock_guard lock(sessions_mutex_);
  for (auto& session : sessions_) {
    if (session.thread.joinable()) session.thread.join();
  }
  sessions_.clear();
}

std::size_t FrameServer::active_connections() const {
  std::lock_guard lock(sessions_mutex_);
  std::size_t n = 0;
  for (const auto& s : sessions_) n += s.done ? 0 : 1;
  return n;
}

void FrameServer::reap_finished() {
  std::lock_guard lock(sessions_mutex_);
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (it->done) {
      it->thread.join();
      it = sessions_.erase(it);
    } else {
      ++it;
    }
  }
}

void FrameServer::accept_loop() {
  while (!stopping_) {
    auto socket = listener_.accept(kIdlePoll);
    reap_finished();
    if (!socket) continue;
    auto peer = socket->peer_address();
    if (!options_.policy->admits_connection(peer, options_.channel)) {
      spdlog::info("refused {} connection from {}",
                   policy::to_string(options_.channel), peer);
      socket->close();
      continue;
    }
    std::lock_guard lock(sessions_mutex_);
    auto& session = sessions_.emplace_back();
    session.thread = std::thread(
        [this, &session, s = std::move(*socket)]() mutable {
          serve_connection(std::move(s), session);
          session.done = true;
        });
  }
  // Refuse anything that raced in after shutdown began.
  listener_.close();
}

void FrameServer::serve_connection(net::Socket socket, Session& session) {
  (void)session;
  PeerInfo peer{socket.peer_address()};
  while (!stopping_) {
    if (!socket.wait_readable(kIdlePoll)) continue;
    std::optional<wire::Message> request;
    try {
      SocketSource source(socket, net::Clock::now() + kFrameBodyTimeout);
      request = wire::decode_frame(source);
    } catch (const std::exception& e) {
      spdlog::warn("dropping connection from {}: {}", peer.address, e.what());
      return;
    }
    if (!request) return;

    wire::Message response;
    if (request->kind != wire::Kind::kRequest) {
      spdlog::warn("dropping connection from {}: unexpected response frame",
                   peer.address);
      return;
    }
    try {
      response = request->object == "policy" ? handle_admin(*request, peer)
                                             : handler_(*request, peer);
    } catch (const Error& e) {
      response = wire::Message::failure(*request, e.info());
    } catch (const std::exception& e) {
      response = wire::Message::failure(
          *request, ErrorInfo{ErrorCode::kInternal, e.what()});
    }
    try {
      socket.write_all(wire::encode_frame(response));
    } catch (const std::exception& e) {
      spdlog::warn("failed to answer {}: {}", peer.address, e.what());
      return;
    }
    if (options_.close_on_denied && response.error &&
        response.error->code == ErrorCode::kPolicyDenied) {
      return;
    }
  }
}

wire::Message FrameServer::handle_admin(const wire::Message& request,
                                        const PeerInfo& peer) {
  if (!options_.policy->allows(request.principal, peer.address,
                               options_.channel)) {
    return wire::Message::failure(
        request, {ErrorCode::kPolicyDenied,
                  "principal '" + request.principal + "' may not administer policy"});
  }
  if (request.method != "reload") {
    return wire::Message::failure(
        request, {ErrorCode::kNotFound, "policy has no method '" + request.method + "'"});
  }
  std::size_t count = 0;
  try {
    count = options_.policy->reload();
  } catch (const std::exception& e) {
    return wire::Message::failure(request, {ErrorCode::kInvalidParams, e.what()});
  }
  spdlog::info("policy reloaded: {} rules", count);
  return wire::Message::ok(request, {{"rules", count}});
}

}  // namespace ice
