#include "ice/client.h"

#include "ice/registry.h"

namespace ice::client {

Proxy::Proxy(std::string object_name, net::Endpoint registry, std::string principal,
             std::chrono::milliseconds timeout)
    : object_name_(std::move(object_name)),
      registry_(std::move(registry)),
      principal_(std::move(principal)),
      timeout_(timeout) {}

Proxy Proxy::direct(std::string object_name, net::Endpoint endpoint, std::string principal,
                    std::chrono::milliseconds timeout) {
  Proxy p;
  p.object_name_ = std::move(object_name);
  p.endpoint_ = std::move(endpoint);
  p.principal_ = std::move(principal);
  p.timeout_ = timeout;
  return p;
}

net::Endpoint Proxy::resolve() {
  registry::RegistryClient registry(*registry_, principal_, timeout_);
  return net::Endpoint::parse(registry.lookup(object_name_).endpoint);
}

wire::Value Proxy::invoke(const std::string& method, const wire::Value& params) {
  auto request = wire::Message::request(object_name_, method, params, principal_);
  bool refreshed = false;
  if (!endpoint_) endpoint_ = resolve();

  while (true) {
    if (!conn_ || conn_->endpoint() != *endpoint_ || !conn_->usable()) {
      conn_.reset();
      try {
        conn_ = Connection::open(*endpoint_, timeout_);
      } catch (const TransportError&) {
        if (refreshed || !registry_) throw;
        refreshed = true;
        endpoint_ = resolve();
        continue;
      }
    }

    wire::Message response;
    try {
      response = conn_->call(request, timeout_);
    } catch (const TransportError&) {
      conn_.reset();
      throw;
    }

    if (response.error && response.error->code == ErrorCode::kNotFound && !refreshed &&
        registry_) {
      refreshed = true;
      auto fresh = resolve();
      if (fresh != *endpoint_) {
        // The old server did not host the object, so nothing ran there.
        endpoint_ = fresh;
        continue;
      }
    }
    return unwrap(response);
  }
}

}  // namespace ice::client
