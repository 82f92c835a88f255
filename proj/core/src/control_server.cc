#include "ice/control_server.h"

#include <yaml-cpp/yaml.h>

#include <spdlog/spdlog.h>

#include "ice/registry.h"
#include "ice/timeutil.h"

namespace ice::control {

wire::Value AuditEntry::to_json() const {
  return {{"sequence_no", static_cast<std::int64_t>(sequence_no)},
          {"request_id", request_id},
          {"principal", principal},
          {"object", object},
          {"method", method},
          {"params", params},
          {"outcome", outcome},
          {"started", started},
          {"finished", finished}};
}

AuditEntry AuditEntry::from_json(const wire::Value& json) {
  AuditEntry e;
  e.sequence_no = json.at("sequence_no").get<std::uint64_t>();
  e.request_id = json.value("request_id", "");
  e.principal = json.value("principal", "");
  e.object = json.value("object", "");
  e.method = json.value("method", "");
  e.params = json.value("params", wire::Value::object());
  e.outcome = json.value("outcome", "");
  e.started = json.value("started", "");
  e.finished = json.value("finished", "");
  return e;
}

AuditLog::AuditLog(std::optional<std::filesystem::path> path) {
  if (path) {
    if (path->has_parent_path()) std::filesystem::create_directories(path->parent_path());
    file_.open(*path, std::ios::app);
    if (!file_) throw std::runtime_error("cannot open audit log " + path->string());
  }
}

std::uint64_t AuditLog::append(AuditEntry entry) {
  std::lock_guard lock(mutex_);
  entry.sequence_no = entries_.size() + 1;
  if (file_.is_open()) {
    file_ << entry.to_json().dump() << '\n';
    file_.flush();
  }
  entries_.push_back(std::move(entry));
  return entries_.back().sequence_no;
}

std::vector<AuditEntry> AuditLog::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

std::size_t AuditLog::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

std::vector<AuditEntry> read_audit_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<AuditEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(AuditEntry::from_json(wire::Value::parse(line)));
  }
  return out;
}

ControlServer::ControlServer(ControlServerOptions options)
    : options_([&] {
        options.listen.channel = policy::Channel::kControl;
        return std::move(options);
      }()),
      audit_(options_.audit_path),
      server_(options_.listen, [this](const wire::Message& request, const PeerInfo& peer) {
        return dispatch(request, peer);
      }) {}

ControlServer::~ControlServer() { stop(); }

net::Endpoint ControlServer::endpoint() const {
  return net::Endpoint{options_.advertise_host, server_.port()};
}

std::vector<std::string> ControlServer::object_names() const {
  std::shared_lock lock(slots_mutex_);
  std::vector<std::string> out;
  for (const auto& [name, _] : slots_) out.push_back(name);
  return out;
}

void ControlServer::expose(const std::string& object_name,
                           std::shared_ptr<instrument::Adapter> adapter,
                           std::set<std::string> mutating_methods) {
  if (object_name.empty() || !adapter) {
    throw Error(ErrorCode::kInvalidParams, "exposure needs a name and an adapter");
  }
  for (const auto& m : mutating_methods) {
    if (!adapter->methods().contains(m)) {
      throw Error(ErrorCode::kInvalidParams,
                  "mutating method '" + m + "' is not provided by the adapter");
    }
  }
  Exposure exposure{object_name, std::move(adapter), std::move(mutating_methods)};
  {
    std::unique_lock lock(slots_mutex_);
    if (slots_.contains(object_name)) {
      throw Error(ErrorCode::kInvalidParams,
                  "object '" + object_name + "' is already exposed");
    }
    slots_.emplace(object_name, Slot{exposure});
  }
  if (server_.running()) register_exposure(exposure);
}

void ControlServer::register_exposure(const Exposure& exposure) {
  if (!options_.registry) return;
  wire::Value methods = wire::Value::array();
  for (const auto& [name, _] : exposure.adapter->methods()) methods.push_back(name);
  wire::Value mutating = wire::Value::array();
  for (const auto& m : exposure.mutating_methods) mutating.push_back(m);
  registry::RegistryClient client(*options_.registry, options_.registry_principal);
  client.register_name(exposure.object_name, endpoint().to_string(),
                       {{"methods", methods}, {"mutating", mutating}});
}

void ControlServer::start() {
  server_.start();
  try {
    std::vector<Exposure> exposures;
    {
      std::shared_lock lock(slots_mutex_);
      for (const auto& [_, slot] : slots_) exposures.push_back(slot.exposure);
    }
    for (const auto& e : exposures) register_exposure(e);
  } catch (...) {
    server_.stop();
    throw;
  }
}

void ControlServer::stop() {
  if (!server_.running()) return;
  if (options_.registry) {
    registry::RegistryClient client(*options_.registry, options_.registry_principal,
                                    std::chrono::milliseconds(1000));
    for (const auto& name : object_names()) {
      try {
        client.unregister(name);
      } catch (const std::exception& e) {
        spdlog::warn("could not unregister {}: {}", name, e.what());
      }
    }
  }
  server_.stop();
}

wire::Message ControlServer::finish(const wire::Message& request,
                                    wire::Message response,
                                    const std::string& started) {
  AuditEntry entry;
  entry.request_id = request.id;
  entry.principal = request.principal;
  entry.object = request.object;
  entry.method = request.method;
  entry.params = request.params;
  entry.outcome = response.status == wire::Status::kOk
                      ? "Ok"
                      : std::string(to_string(response.error->code));
  entry.started = started;
  entry.finished = iso8601_now();
  audit_.append(std::move(entry));
  return response;
}

wire::Message ControlServer::dispatch(const wire::Message& request,
                                      const PeerInfo& peer) {
  auto started = iso8601_now();
  if (!server_.policy()->allows(request.principal, peer.address,
                                policy::Channel::kControl)) {
    return finish(request,
                  wire::Message::failure(
                      request, {ErrorCode::kPolicyDenied,
                                "principal '" + request.principal + "' from " +
                                    peer.address + " denied on control channel"}),
                  started);
  }

  std::shared_ptr<instrument::Adapter> adapter;
  std::shared_mutex* guard = nullptr;
  bool mutating = false;
  {
    std::shared_lock lock(slots_mutex_);
    auto it = slots_.find(request.object);
    if (it == slots_.end()) {
      return finish(request,
                    wire::Message::failure(request, {ErrorCode::kNotFound,
                                                     "no object '" + request.object + "'"}),
                    started);
    }
    adapter = it->second.exposure.adapter;
    guard = it->second.guard.get();
    mutating = it->second.exposure.mutating_methods.contains(request.method);
  }
  auto method = adapter->methods().find(request.method);
  if (method == adapter->methods().end()) {
    return finish(request,
                  wire::Message::failure(
                      request, {ErrorCode::kNotFound, "object '" + request.object +
                                                          "' has no method '" +
                                                          request.method + "'"}),
                  started);
  }

  auto invoke = [&] {
    try {
      return wire::Message::ok(request, method->second(request.params));
    } catch (const Error& e) {
      return wire::Message::failure(request, e.info());
    } catch (const std::exception& e) {
      return wire::Message::failure(request, {ErrorCode::kInternal, e.what()});
    } catch (...) {
      return wire::Message::failure(request,
                                    {ErrorCode::kInternal, "adapter raised a non-standard exception"});
    }
  };

  // The audit entry is appended while the guard is held so that sequence
  // order matches execution order for mutating calls.
  if (mutating) {
    std::unique_lock lock(*guard);
    return finish(request, invoke(), started);
  }
  std::shared_lock lock(*guard);
  return finish(request, invoke(), started);
}

ServeConfig ServeConfig::load(const std::filesystem::path& path) {
  YAML::Node doc;
  try {
    doc = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  ServeConfig config;
  if (!doc || doc.IsNull()) return config;
  if (!doc.IsMap()) {
    throw std::runtime_error(path.string() + ": top level must be a map");
  }
  for (const auto& item : doc) {
    auto key = item.first.as<std::string>();
    const auto& value = item.second;
    try {
      if (key == "host") config.host = value.as<std::string>();
      else if (key == "port") config.port = value.as<std::uint16_t>();
      else if (key == "registry") config.registry = value.as<std::string>();
      else if (key == "policy") config.policy = value.as<std::string>();
      else if (key == "store") config.store = value.as<std::string>();
      else if (key == "time_scale") config.time_scale = value.as<double>();
      else if (key == "name") config.object_name = value.as<std::string>();
      else if (key == "audit") config.audit = value.as<std::string>();
      else if (key == "advertise_host") config.advertise_host = value.as<std::string>();
      else {
        throw std::runtime_error(path.string() + ":" +
                                 std::to_string(item.first.Mark().line + 1) +
                                 ": unknown key '" + key + "'");
      }
    } catch (const YAML::Exception& e) {
      throw std::runtime_error(path.string() + ":" +
                               std::to_string(value.Mark().line + 1) +
                               ": bad value for '" + key + "'");
    }
  }
  return config;
}

}  // namespace ice::control
