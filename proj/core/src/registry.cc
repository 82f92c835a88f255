#include "ice/registry.h"

#include <fstream>
#include <mutex>
#include <sstream>

#include <spdlog/spdlog.h>

#include "ice/timeutil.h"

namespace ice::registry {
namespace {

std::string require_string(const wire::Value& params, const char* key) {
  auto it = params.find(key);
  if (it == params.end() || !it->is_string()) {
    throw Error(ErrorCode::kInvalidParams,
                std::string("parameter '") + key + "' must be a string");
  }
  return it->get<std::string>();
}

}  // namespace

wire::Value NameRecord::to_json() const {
  return {{"name", name},
          {"endpoint", endpoint},
          {"metadata", metadata},
          {"registered_at", registered_at}};
}

NameRecord NameRecord::from_json(const wire::Value& json) {
  NameRecord r;
  r.name = json.at("name").get<std::string>();
  r.endpoint = json.at("endpoint").get<std::string>();
  r.metadata = json.value("metadata", wire::Value::object());
  r.registered_at = json.value("registered_at", std::int64_t{0});
  return r;
}

Registry::Registry(std::filesystem::path snapshot) : snapshot_(std::move(snapshot)) {
  if (!std::filesystem::exists(*snapshot_)) return;
  std::ifstream in(*snapshot_);
  auto doc = wire::Value::parse(in);
  for (const auto& [name, record] : doc.items()) {
    records_[name] = NameRecord::from_json(record);
  }
}

void Registry::register_name(const std::string& name,
                             const std::string& endpoint,
                             wire::Value metadata) {
  if (name.empty()) throw Error(ErrorCode::kInvalidParams, "name is empty");
  auto parsed = net::Endpoint::parse(endpoint);
  if (parsed.host.empty()) {
    throw Error(ErrorCode::kInvalidParams, "endpoint host is empty");
  }
  if (!metadata.is_object()) metadata = wire::Value::object();
  std::unique_lock lock(mutex_);
  records_[name] = NameRecord{name, endpoint, std::move(metadata), unix_seconds()};
  save_locked();
}

NameRecord Registry::lookup(const std::string& name) const {
  std::shared_lock lock(mutex_);
  auto it = records_.find(name);
  if (it == records_.end()) {
    throw Error(ErrorCode::kNotFound, "no object registered as '" + name + "'");
  }
  return it->second;
}

std::vector<NameRecord> Registry::list(const std::string& prefix) const {
  std::shared_lock lock(mutex_);
  std::vector<NameRecord> out;
  for (auto it = records_.lower_bound(prefix);
       it != records_.end() && it->first.starts_with(prefix); ++it) {
    out.push_back(it->second);
  }
  return out;
}

void Registry::unregister(const std::string& name) {
  std::unique_lock lock(mutex_);
  if (records_.erase(name) > 0) save_locked();
}

std::size_t Registry::size() const {
  std::shared_lock lock(mutex_);
  return records_.size();
}

void Registry::save_locked() const {
  if (!snapshot_) return;
  wire::Value doc = wire::Value::object();
  for (const auto& [name, record] : records_) doc[name] = record.to_json();
  auto tmp = *snapshot_;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << doc.dump(2) << '\n';
    if (!out) {
      spdlog::error("cannot write registry snapshot {}", tmp.string());
      return;
    }
  }
  std::filesystem::rename(tmp, *snapshot_);
}

namespace {

wire::Message dispatch(Registry& registry, const wire::Message& request) {
  const auto& params = request.params;
  if (request.method == "register") {
    registry.register_name(require_string(params, "name"),
                           require_string(params, "endpoint"),
                           params.value("metadata", wire::Value::object()));
    return wire::Message::ok(request, {{"registered", true}});
  }
  if (request.method == "lookup") {
    return wire::Message::ok(
        request, registry.lookup(require_string(params, "name")).to_json());
  }
  if (request.method == "list") {
    auto prefix = params.contains("prefix") ? require_string(params, "prefix")
                                            : std::string();
    wire::Value out = wire::Value::array();
    for (const auto& r : registry.list(prefix)) out.push_back(r.to_json());
    return wire::Message::ok(request, std::move(out));
  }
  if (request.method == "unregister") {
    registry.unregister(require_string(params, "name"));
    return wire::Message::ok(request, {{"unregistered", true}});
  }
  return wire::Message::failure(
      request, {ErrorCode::kNotFound, "registry has no method '" + request.method + "'"});
}

}  // namespace

wire::Message handle_request(Registry& registry, const wire::Message& request) {
  try {
    return dispatch(registry, request);
  } catch (const Error& e) {
    return wire::Message::failure(request, {e.code(), e.what()});
  }
}

RegistryServer::RegistryServer(std::shared_ptr<Registry> registry,
                               FrameServerOptions options)
    : registry_(std::move(registry)),
      server_(
          [&] {
            options.channel = policy::Channel::kRegistry;
            return options;
          }(),
          [this](const wire::Message& request, const PeerInfo& peer) {
            if (!server_.policy()->allows(request.principal, peer.address,
                                          policy::Channel::kRegistry)) {
              return wire::Message::failure(
                  request, {ErrorCode::kPolicyDenied,
                            "principal '" + request.principal +
                                "' denied on registry channel"});
            }
            if (request.object != kObjectName) {
              return wire::Message::failure(
                  request, {ErrorCode::kNotFound,
                            "this endpoint serves only 'registry'"});
            }
            return handle_request(*registry_, request);
          }) {}

wire::Value RegistryClient::call(const std::string& method, wire::Value params) {
  auto request = wire::Message::request(kObjectName, method, std::move(params),
                                        principal_);
  return unwrap(call_once(endpoint_, request, timeout_));
}

void RegistryClient::register_name(const std::string& name,
                                   const std::string& endpoint,
                                   const wire::Value& metadata) {
  call("register", {{"name", name}, {"endpoint", endpoint}, {"metadata", metadata}});
}

NameRecord RegistryClient::lookup(const std::string& name) {
  return NameRecord::from_json(call("lookup", {{"name", name}}));
}

std::vector<NameRecord> RegistryClient::list(const std::string& prefix) {
  std::vector<NameRecord> out;
  for (const auto& r : call("list", {{"prefix", prefix}})) {
    out.push_back(NameRecord::from_json(r));
  }
  return out;
}

void RegistryClient::unregister(const std::string& name) {
  call("unregister", {{"name", name}});
}

}  // namespace ice::registry
