#include "ice/bridge.h"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <set>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "ice/client.h"
#include "ice/datachannel.h"
#include "ice/instrument.h"
#include "ice/registry.h"
#include "ice/timeutil.h"

namespace fs = std::filesystem;

namespace ice::bridge {
namespace {

const std::set<std::string> kCommands{"set_probe_position", "start_scan", "abort_scan"};
constexpr std::size_t kHttpThreads = 64;

void send_json(httplib::Response& res, int status, const wire::Value& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

wire::Value error_body(std::string_view code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

std::optional<wire::Value> read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    return wire::Value::parse(in);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kInvalidParams: return 400;
    case ErrorCode::kOutOfRange: return 400;
    case ErrorCode::kPolicyDenied: return 403;
    case ErrorCode::kInstrumentBusy: return 409;
    case ErrorCode::kUnauthenticated: return 401;
    case ErrorCode::kInternal: return 500;
  }
  return 500;
}

std::string Event::to_sse() const {
  return "id: " + std::to_string(id) + "\nevent: " + type + "\ndata: " + data.dump() + "\n\n";
}

std::uint64_t EventHub::publish(std::string type, wire::Value data) {
  std::uint64_t id;
  {
    std::lock_guard lock(mutex_);
    id = next_id_++;
    events_.push_back(Event{id, std::move(type), std::move(data)});
    while (events_.size() > capacity_) events_.pop_front();
  }
  cv_.notify_all();
  return id;
}

std::uint64_t EventHub::head() const {
  std::lock_guard lock(mutex_);
  return next_id_ - 1;
}

std::vector<Event> EventHub::wait_after(std::uint64_t cursor,
                                        std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mutex_);
  cv_.wait_for(lock, timeout, [&] { return closed_ || next_id_ - 1 > cursor; });
  std::vector<Event> out;
  for (const auto& e : events_) {
    if (e.id > cursor) out.push_back(e);
  }
  return out;
}

void EventHub::close() {
  {
    std::lock_guard lock(mutex_);
    closed_ = true;
  }
  cv_.notify_all();
}

bool EventHub::closed() const {
  std::lock_guard lock(mutex_);
  return closed_;
}

struct Bridge::Impl {
  explicit Impl(BridgeOptions o)
      : options(std::move(o)),
        catalog(options.mirror),
        poll_proxy(options.object_name, options.registry, options.principal, options.timeout),
        command_proxy(options.object_name, options.registry, options.principal,
                      options.timeout) {}

  BridgeOptions options;
  data::ManifestCatalog catalog;
  EventHub hub;
  httplib::Server http;
  std::thread http_thread;
  std::thread poller;
  std::atomic<bool> stopping{false};
  std::mutex stop_mutex;
  std::condition_variable stop_cv;
  int bound_port = 0;

  std::mutex poll_mutex;  // one refresh at a time; guards poll_proxy and the diff state
  client::Proxy poll_proxy;
  std::mutex command_mutex;
  client::Proxy command_proxy;

  mutable std::mutex snapshot_mutex;
  wire::Value snapshot;
  bool have_snapshot = false;

  std::optional<wire::Value> last_instrument_state;
  std::optional<std::set<std::string>> known_files;
  std::chrono::steady_clock::time_point last_heartbeat = std::chrono::steady_clock::now();

  wire::Value instrument_section() {
    wire::Value out = {{"object", options.object_name}};
    try {
      out["status"] = poll_proxy.invoke("scan_status");
      out["probe_position"] = poll_proxy.invoke("get_probe_position");
      out["metadata"] = poll_proxy.invoke("metadata");
      out["reachable"] = true;
    } catch (const std::exception& e) {
      out = {{"object", options.object_name},
             {"reachable", false},
             {"error", std::string("control channel failure: ") + e.what()}};
    }
    return out;
  }

  wire::Value registry_section() {
    wire::Value out = {{"endpoint", options.registry.to_string()}};
    try {
      registry::RegistryClient client(options.registry, options.principal, options.timeout);
      wire::Value records = wire::Value::array();
      for (const auto& r : client.list()) records.push_back(r.to_json());
      out["records"] = records;
    } catch (const std::exception& e) {
      out["records"] = wire::Value::array();
      out["error"] = e.what();
    }
    return out;
  }

  wire::Value measurements_section() {
    wire::Value out = wire::Value::array();
    if (options.mirror.empty()) return out;
    std::error_code ec;
    if (!fs::is_directory(options.mirror, ec)) return out;
    std::vector<data::MeasurementRecord> records;
    try {
      for (const auto& r : catalog.refresh()->records) {
        if (r.file_id.ends_with(".icem")) records.push_back(r);
      }
    } catch (const std::exception& e) {
      spdlog::warn("cannot index mirror {}: {}", options.mirror.string(), e.what());
      return out;
    }
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
      return a.modified_at != b.modified_at ? a.modified_at > b.modified_at
                                            : a.file_id > b.file_id;
    });
    if (records.size() > options.recent_limit) records.resize(options.recent_limit);
    for (const auto& r : records) {
      auto j = r.to_json();
      j["meta"] = nullptr;
      if (r.sidecar) {
        if (auto meta = read_json_file(options.mirror / *r.sidecar)) j["meta"] = *meta;
      }
      out.push_back(std::move(j));
    }
    return out;
  }

  void refresh() {
    std::lock_guard lock(poll_mutex);
    wire::Value snap = {{"timestamp", iso8601_now()},
                        {"instrument", instrument_section()},
                        {"registry", registry_section()},
                        {"sync", nullptr},
                        {"measurements", measurements_section()},
                        {"staleness_bound_ms", options.poll_interval.count()}};
    if (auto report = data::read_sync_report(options.mirror)) snap["sync"] = report->to_json();

    // Status event on any change of the instrument view.
    const auto& inst = snap["instrument"];
    wire::Value state = {{"reachable", inst["reachable"]},
                         {"status", inst.value("status", wire::Value())},
                         {"probe_position", inst.value("probe_position", wire::Value())}};
    if (!last_instrument_state || *last_instrument_state != state) {
      if (last_instrument_state) {
        hub.publish("status", {{"timestamp", snap["timestamp"]}, {"instrument", state}});
      }
      last_instrument_state = state;
    }

    std::set<std::string> files;
    for (const auto& m : snap["measurements"]) files.insert(m["file_id"].get<std::string>());
    if (known_files) {
      // Oldest first, so subscribers see files in arrival order.
      for (auto it = snap["measurements"].rbegin(); it != snap["measurements"].rend(); ++it) {
        if (!known_files->contains((*it)["file_id"].get<std::string>())) {
          hub.publish("measurement", *it);
        }
      }
      files.insert(known_files->begin(), known_files->end());
    }
    known_files = std::move(files);

    std::lock_guard snap_lock(snapshot_mutex);
    snapshot = std::move(snap);
    have_snapshot = true;
  }

  void maybe_heartbeat() {
    auto now = std::chrono::steady_clock::now();
    if (now - last_heartbeat >= options.heartbeat_interval) {
      last_heartbeat = now;
      hub.publish("heartbeat", {{"timestamp", iso8601_now()}});
    }
  }

  void poll_loop() {
    while (!stopping) {
      try {
        refresh();
      } catch (const std::exception& e) {
        spdlog::warn("bridge poll failed: {}", e.what());
      }
      auto next = std::chrono::steady_clock::now() + options.poll_interval;
      // Wake often enough to keep heartbeats on time.
      while (!stopping && std::chrono::steady_clock::now() < next) {
        maybe_heartbeat();
        std::unique_lock lock(stop_mutex);
        auto step = std::min<std::chrono::steady_clock::duration>(
            next - std::chrono::steady_clock::now(), options.heartbeat_interval);
        stop_cv.wait_for(lock, step, [&] { return stopping.load(); });
      }
      maybe_heartbeat();
    }
  }

  wire::Value current_snapshot() {
    {
      std::lock_guard lock(snapshot_mutex);
      if (have_snapshot) return snapshot;
    }
    refresh();
    std::lock_guard lock(snapshot_mutex);
    return snapshot;
  }

  void handle_status(httplib::Response& res) {
    auto snap = current_snapshot();
    send_json(res, snap["instrument"]["reachable"].get<bool>() ? 200 : 503, snap);
  }

  void handle_command(const httplib::Request& req, httplib::Response& res) {
    wire::Value body;
    try {
      body = wire::Value::parse(req.body);
    } catch (const std::exception& e) {
      send_json(res, 400, error_body("InvalidParams", std::string("body is not JSON: ") + e.what()));
      return;
    }
    if (!body.is_object() || !body.contains("method") || !body["method"].is_string()) {
      send_json(res, 400, error_body("InvalidParams", "body needs a string 'method'"));
      return;
    }
    auto method = body["method"].get<std::string>();
    if (!kCommands.contains(method)) {
      send_json(res, 400, error_body("InvalidParams", "method '" + method + "' is not a console command"));
      return;
    }
    auto params = body.value("params", wire::Value::object());
    if (!params.is_object() || !wire::check_value(params).empty()) {
      send_json(res, 400, error_body("InvalidParams", "params must be a map of plain values"));
      return;
    }
    try {
      wire::Value result;
      {
        std::lock_guard lock(command_mutex);
        result = command_proxy.invoke(method, params);
      }
      send_json(res, 200, {{"status", "Ok"}, {"result", result}});
    } catch (const Error& e) {
      send_json(res, http_status(e.code()), error_body(to_string(e.code()), e.what()));
      return;
    } catch (const std::exception& e) {
      send_json(res, kChannelFailureStatus,
                error_body("ChannelFailure", std::string("control channel failure: ") + e.what()));
      return;
    }
    try {
      refresh();
    } catch (const std::exception& e) {
      spdlog::warn("refresh after command failed: {}", e.what());
    }
  }

  void handle_preview(const httplib::Request& req, httplib::Response& res) {
    auto id = req.matches[1].str();
    if (!data::is_safe_file_id(id)) {
      send_json(res, 404, error_body("NotFound", "unknown measurement"));
      return;
    }
    auto path = options.mirror / fs::path(id);
    std::error_code ec;
    if (options.mirror.empty() || !fs::is_regular_file(path, ec)) {
      send_json(res, 404, error_body("NotFound", "no measurement '" + id + "'"));
      return;
    }
    std::vector<std::uint8_t> pgm;
    try {
      pgm = instrument::to_pgm(instrument::read_icem(path));
    } catch (const std::exception& e) {
      send_json(res, 422, error_body("Unprocessable", e.what()));
      return;
    }
    res.status = 200;
    res.set_content(std::string(pgm.begin(), pgm.end()), "image/x-portable-graymap");
  }

  void handle_events(httplib::Response& res) {
    res.set_header("Cache-Control", "no-cache");
    auto cursor = std::make_shared<std::uint64_t>(hub.head());
    auto greeted = std::make_shared<bool>(false);
    res.set_chunked_content_provider(
        "text/event-stream", [this, cursor, greeted](std::size_t, httplib::DataSink& sink) {
          if (!*greeted) {
            *greeted = true;
            const std::string hello = ": connected\n\n";
            return sink.write(hello.data(), hello.size());
          }
          auto events = hub.wait_after(*cursor, std::chrono::milliseconds(250));
          if (hub.closed() || stopping) {
            sink.done();
            return false;
          }
          for (const auto& e : events) {
            auto text = e.to_sse();
            if (!sink.write(text.data(), text.size())) return false;
            *cursor = e.id;
          }
          return sink.is_writable();
        });
  }

  void install_routes() {
    http.new_task_queue = [] { return new httplib::ThreadPool(kHttpThreads); };
    // Without SO_REUSEPORT a second bridge on the same port fails to bind.
    http.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    http.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    http.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.status = 204;
    });
    http.Get("/api/status", [this](const httplib::Request&, httplib::Response& res) {
      handle_status(res);
    });
    http.Post("/api/command", [this](const httplib::Request& req, httplib::Response& res) {
      handle_command(req, res);
    });
    http.Get("/api/events", [this](const httplib::Request&, httplib::Response& res) {
      handle_events(res);
    });
    http.Get(R"(/api/measurements/(.+)/preview)",
             [this](const httplib::Request& req, httplib::Response& res) {
               handle_preview(req, res);
             });
    if (options.static_dir) http.set_mount_point("/", options.static_dir->string());
  }
};

Bridge::Bridge(BridgeOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {
  impl_->install_routes();
}

Bridge::~Bridge() { stop(); }

void Bridge::start() {
  auto& impl = *impl_;
  if (impl.options.port == 0) {
    impl.bound_port = impl.http.bind_to_any_port(impl.options.host);
  } else {
    impl.bound_port = impl.http.bind_to_port(impl.options.host, impl.options.port)
                          ? impl.options.port
                          : -1;
  }
  if (impl.bound_port <= 0) {
    throw std::runtime_error("cannot bind HTTP port " + std::to_string(impl.options.port));
  }
  impl.stopping = false;
  impl.http_thread = std::thread([&impl] { impl.http.listen_after_bind(); });
  impl.poller = std::thread([&impl] { impl.poll_loop(); });
}

void Bridge::stop() {
  auto& impl = *impl_;
  if (impl.stopping.exchange(true)) return;
  if (!impl.poller.joinable() && !impl.http_thread.joinable()) return;
  impl.stop_cv.notify_all();
  impl.hub.close();
  if (impl.poller.joinable()) impl.poller.join();
  impl.http.stop();
  if (impl.http_thread.joinable()) impl.http_thread.join();
}

std::uint16_t Bridge::port() const { return static_cast<std::uint16_t>(impl_->bound_port); }

wire::Value Bridge::snapshot() const { return impl_->current_snapshot(); }

void Bridge::poll_now() { impl_->refresh(); }

EventHub& Bridge::events() { return impl_->hub; }

}  // namespace ice::bridge
