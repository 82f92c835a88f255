// ice: command-line front end for the instrument-computing ecosystem.
//
//   ice registry --port P --snapshot FILE [--policy FILE]
//   ice serve-instrument --port P --registry HOST:PORT --policy FILE --store DIR --time-scale F
//   ice call OBJECT METHOD [--param k=v]...
//   ice status OBJECT
//   ice steer WORKFLOW_FILE
//   ice data serve --dir DIR --port P --policy FILE
//   ice data sync --remote HOST:PORT --dir DIR [--watch --interval MS]
//   ice bridge --registry HOST:PORT --mirror DIR --port P
//   ice policy reload --endpoint HOST:PORT | ice policy check FILE

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include <pthread.h>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "ice/bridge.h"
#include "ice/client.h"
#include "ice/control_server.h"
#include "ice/datachannel.h"
#include "ice/instrument.h"
#include "ice/policy.h"
#include "ice/registry.h"
#include "ice/workflow.h"

namespace {

using namespace std::chrono_literals;

sigset_t daemon_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGHUP);
  return set;
}

// Blocked in every thread; the main thread collects them with sigwait.
void block_daemon_signals() {
  auto set = daemon_signals();
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
}

// Returns on SIGINT/SIGTERM; SIGHUP reloads the policy.
void wait_for_shutdown(const std::shared_ptr<ice::policy::Engine>& policy) {
  auto set = daemon_signals();
  while (true) {
    int sig = 0;
    if (sigwait(&set, &sig) != 0) continue;
    if (sig == SIGHUP) {
      if (!policy) continue;
      try {
        spdlog::info("policy reloaded: {} rules", policy->reload());
      } catch (const std::exception& e) {
        spdlog::error("policy reload failed, keeping previous rules: {}", e.what());
      }
      continue;
    }
    spdlog::info("shutting down");
    return;
  }
}

std::shared_ptr<ice::policy::Engine> load_policy(const std::optional<std::string>& path) {
  if (!path) return ice::policy::Engine::allow_all();
  return ice::policy::Engine::from_file(*path);
}

ice::wire::Value parse_param_value(const std::string& text) {
  try {
    auto v = ice::wire::Value::parse(text);
    if (ice::wire::check_value(v).empty()) return v;
  } catch (const std::exception&) {
  }
  return text;
}

ice::wire::Value parse_params(const std::vector<std::string>& pairs) {
  ice::wire::Value params = ice::wire::Value::object();
  for (const auto& pair : pairs) {
    auto eq = pair.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw CLI::ValidationError("--param", "expected key=value, got '" + pair + "'");
    }
    params[pair.substr(0, eq)] = parse_param_value(pair.substr(eq + 1));
  }
  return params;
}

int report_error(const std::exception& e) {
  if (const auto* remote = dynamic_cast<const ice::Error*>(&e)) {
    std::cerr << "error: " << ice::to_string(remote->code()) << ": " << remote->what() << "\n";
  } else {
    std::cerr << "error: " << e.what() << "\n";
  }
  return 1;
}

struct CommonClientFlags {
  std::string registry = "127.0.0.1:9090";
  std::string principal = "anonymous";
  int timeout_ms = 5000;

  void attach(CLI::App* app) {
    app->add_option("--registry", registry, "Registry endpoint HOST:PORT")->capture_default_str();
    app->add_option("--principal", principal, "Identity presented to policy")->capture_default_str();
    app->add_option("--timeout-ms", timeout_ms, "Per-call timeout")->capture_default_str();
  }
};

ice::wire::Value invoke(const CommonClientFlags& flags, const std::string& object,
                        const std::string& method, const ice::wire::Value& params) {
  auto registry = ice::net::Endpoint::parse(flags.registry);
  if (object == ice::registry::kObjectName) {
    auto request = ice::wire::Message::request(object, method, params, flags.principal);
    return ice::unwrap(
        ice::call_once(registry, request, std::chrono::milliseconds(flags.timeout_ms)));
  }
  ice::client::Proxy proxy(object, registry, flags.principal,
                           std::chrono::milliseconds(flags.timeout_ms));
  return proxy.invoke(method, params);
}

}  // namespace

int main(int argc, char** argv) {
  block_daemon_signals();

  CLI::App app{"Instrument-computing ecosystem: remote steering and measurement sync"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off");

  // registry
  auto* registry_cmd = app.add_subcommand("registry", "Run the name registry");
  std::string registry_host = "127.0.0.1";
  std::uint16_t registry_port = ice::registry::kDefaultPort;
  std::optional<std::string> registry_snapshot;
  std::optional<std::string> registry_policy;
  registry_cmd->add_option("--host", registry_host)->capture_default_str();
  registry_cmd->add_option("--port", registry_port)->capture_default_str();
  registry_cmd->add_option("--snapshot", registry_snapshot, "JSON snapshot file");
  registry_cmd->add_option("--policy", registry_policy, "Policy rule file");

  // serve-instrument
  auto* serve_cmd = app.add_subcommand("serve-instrument", "Run the control server with the simulator");
  std::optional<std::string> serve_config_path;
  ice::control::ServeConfig serve_flags;
  std::optional<std::string> serve_registry, serve_policy, serve_audit;
  std::string serve_store;
  serve_cmd->add_option("--config", serve_config_path, "YAML/JSON config file; flags override it");
  auto* o_host = serve_cmd->add_option("--host", serve_flags.host);
  auto* o_port = serve_cmd->add_option("--port", serve_flags.port);
  serve_cmd->add_option("--registry", serve_registry, "Registry HOST:PORT");
  serve_cmd->add_option("--policy", serve_policy, "Policy rule file");
  auto* o_store = serve_cmd->add_option("--store", serve_store, "Measurement store directory");
  auto* o_scale = serve_cmd->add_option("--time-scale", serve_flags.time_scale,
                                        "Scan time multiplier (0 = instant)");
  auto* o_name = serve_cmd->add_option("--name", serve_flags.object_name, "Exposed object name");
  serve_cmd->add_option("--audit", serve_audit, "Audit log (NDJSON)");
  auto* o_adv = serve_cmd->add_option("--advertise-host", serve_flags.advertise_host,
                                      "Host published in the registry");

  // call / status / steer
  auto* call_cmd = app.add_subcommand("call", "Invoke one method on an exposed object");
  CommonClientFlags call_flags;
  std::string call_object, call_method;
  std::vector<std::string> call_params;
  call_cmd->add_option("object", call_object)->required();
  call_cmd->add_option("method", call_method)->required();
  call_cmd->add_option("--param", call_params, "key=value (value parsed as JSON when possible)");
  call_flags.attach(call_cmd);

  auto* status_cmd = app.add_subcommand("status", "Print scan_status of an object");
  CommonClientFlags status_flags;
  std::string status_object;
  status_cmd->add_option("object", status_object)->required();
  status_flags.attach(status_cmd);

  auto* steer_cmd = app.add_subcommand("steer", "Run a workflow file");
  CommonClientFlags steer_flags;
  std::string steer_file;
  std::vector<std::string> steer_vars;
  steer_cmd->add_option("workflow", steer_file)->required()->check(CLI::ExistingFile);
  steer_cmd->add_option("--var", steer_vars, "name=value bound as ${name} before the first step");
  steer_flags.attach(steer_cmd);

  // data serve / data sync
  auto* data_cmd = app.add_subcommand("data", "Data channel");
  data_cmd->require_subcommand(1);
  auto* data_serve = data_cmd->add_subcommand("serve", "Serve a measurement store");
  std::string data_dir, data_host = "127.0.0.1";
  std::uint16_t data_port = 9200;
  std::optional<std::string> data_policy;
  data_serve->add_option("--dir", data_dir)->required();
  data_serve->add_option("--host", data_host)->capture_default_str();
  data_serve->add_option("--port", data_port)->capture_default_str();
  data_serve->add_option("--policy", data_policy);

  auto* data_sync = data_cmd->add_subcommand("sync", "Mirror a remote store");
  std::string sync_remote, sync_dir, sync_principal = "anonymous";
  bool sync_watch = false;
  int sync_interval_ms = 1000;
  data_sync->add_option("--remote", sync_remote)->required();
  data_sync->add_option("--dir", sync_dir)->required();
  data_sync->add_flag("--watch", sync_watch, "Keep syncing every interval");
  data_sync->add_option("--interval", sync_interval_ms, "Milliseconds between syncs")->capture_default_str();
  data_sync->add_option("--principal", sync_principal)->capture_default_str();

  // bridge
  auto* bridge_cmd = app.add_subcommand("bridge", "Run the HTTP console gateway");
  ice::bridge::BridgeOptions bridge_options;
  std::string bridge_registry = "127.0.0.1:9090", bridge_mirror;
  int bridge_poll_ms = 500;
  std::optional<std::string> bridge_static;
  bridge_cmd->add_option("--registry", bridge_registry)->capture_default_str();
  bridge_cmd->add_option("--mirror", bridge_mirror)->required();
  bridge_cmd->add_option("--host", bridge_options.host)->capture_default_str();
  bridge_cmd->add_option("--port", bridge_options.port)->capture_default_str();
  bridge_cmd->add_option("--object", bridge_options.object_name)->capture_default_str();
  bridge_cmd->add_option("--poll-ms", bridge_poll_ms)->capture_default_str();
  bridge_cmd->add_option("--static", bridge_static, "Serve console files from this directory");

  // policy
  auto* policy_cmd = app.add_subcommand("policy", "Policy administration");
  policy_cmd->require_subcommand(1);
  auto* policy_reload = policy_cmd->add_subcommand("reload", "Ask a daemon to re-read its policy file");
  std::string reload_endpoint, reload_principal = "anonymous";
  policy_reload->add_option("--endpoint", reload_endpoint)->required();
  policy_reload->add_option("--principal", reload_principal)->capture_default_str();
  auto* policy_check = policy_cmd->add_subcommand("check", "Validate a policy file");
  std::string check_file;
  policy_check->add_option("file", check_file)->required();

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*registry_cmd) {
      auto policy = load_policy(registry_policy);
      auto registry = registry_snapshot
                          ? std::make_shared<ice::registry::Registry>(*registry_snapshot)
                          : std::make_shared<ice::registry::Registry>();
      ice::registry::RegistryServer server(registry, {.host = registry_host,
                                                      .port = registry_port,
                                                      .policy = policy});
      server.start();
      spdlog::info("registry listening on {}:{}", registry_host, server.port());
      wait_for_shutdown(policy);
      server.stop();
      return 0;
    }

    if (*serve_cmd) {
      auto config = serve_config_path ? ice::control::ServeConfig::load(*serve_config_path)
                                      : ice::control::ServeConfig{};
      if (o_host->count()) config.host = serve_flags.host;
      if (o_port->count()) config.port = serve_flags.port;
      if (serve_registry) config.registry = *serve_registry;
      if (serve_policy) config.policy = *serve_policy;
      if (o_store->count()) config.store = serve_store;
      if (o_scale->count()) config.time_scale = serve_flags.time_scale;
      if (o_name->count()) config.object_name = serve_flags.object_name;
      if (serve_audit) config.audit = *serve_audit;
      if (o_adv->count()) config.advertise_host = serve_flags.advertise_host;

      auto policy = config.policy ? ice::policy::Engine::from_file(*config.policy)
                                  : ice::policy::Engine::allow_all();
      ice::control::ControlServerOptions options;
      options.listen = {.host = config.host, .port = config.port, .policy = policy};
      if (config.registry) options.registry = ice::net::Endpoint::parse(*config.registry);
      options.advertise_host = config.advertise_host;
      options.audit_path = config.audit;

      auto simulator = std::make_shared<ice::instrument::Simulator>(
          ice::instrument::SimulatorOptions{config.store, config.time_scale, {}});
      ice::control::ControlServer server(options);
      server.expose(config.object_name, simulator,
                    ice::instrument::Simulator::mutating_methods());
      server.start();
      spdlog::info("serving '{}' on {}:{} (store {}, time scale {})", config.object_name,
                   config.host, server.port(), config.store.string(), config.time_scale);
      wait_for_shutdown(policy);
      server.stop();
      return 0;
    }

    if (*call_cmd) {
      auto result = invoke(call_flags, call_object, call_method, parse_params(call_params));
      std::cout << result.dump(2) << "\n";
      return 0;
    }

    if (*status_cmd) {
      auto result = invoke(status_flags, status_object, "scan_status", ice::wire::Value::object());
      std::cout << result.dump(2) << "\n";
      return 0;
    }

    if (*steer_cmd) {
      ice::workflow::Workflow wf;
      try {
        wf = ice::workflow::load_workflow(steer_file);
      } catch (const ice::workflow::ParseError& e) {
        std::cerr << steer_file << ":" << e.line() << ": " << e.what() << "\n";
        return 2;
      }
      ice::workflow::RunOptions options;
      options.registry = ice::net::Endpoint::parse(steer_flags.registry);
      options.principal = steer_flags.principal;
      options.timeout = std::chrono::milliseconds(steer_flags.timeout_ms);
      auto vars = parse_params(steer_vars);
      for (auto& [name, value] : vars.items()) options.variables[name] = value;
      auto report = ice::workflow::run_workflow(wf, options);
      std::cout << report.to_json().dump(2) << "\n";
      return report.ok() ? 0 : 1;
    }

    if (*data_serve) {
      auto policy = load_policy(data_policy);
      ice::data::StoreServer server(data_dir, {.host = data_host, .port = data_port, .policy = policy});
      server.start();
      spdlog::info("store {} listening on {}:{}", data_dir, data_host, server.port());
      wait_for_shutdown(policy);
      server.stop();
      return 0;
    }

    if (*data_sync) {
      auto remote = ice::net::Endpoint::parse(sync_remote);
      ice::data::SyncOptions options;
      options.principal = sync_principal;
      if (!sync_watch) {
        auto report = ice::data::sync_once(remote, sync_dir, options);
        ice::data::record_sync_report(sync_dir, report);
        std::cout << report.to_json().dump(2) << "\n";
        return report.converged() ? 0 : 1;
      }
      std::jthread watcher([&](std::stop_token stop) {
        ice::data::watch_and_sync(
            remote, sync_dir, std::chrono::milliseconds(sync_interval_ms), stop, options,
            [](const ice::data::SyncReport& r) {
              if (r.files_transferred > 0 || !r.converged()) {
                spdlog::info("sync: {}", r.to_json().dump());
              }
            });
      });
      wait_for_shutdown(nullptr);
      return 0;
    }

    if (*bridge_cmd) {
      bridge_options.registry = ice::net::Endpoint::parse(bridge_registry);
      bridge_options.mirror = bridge_mirror;
      bridge_options.poll_interval = std::chrono::milliseconds(bridge_poll_ms);
      if (bridge_static) bridge_options.static_dir = *bridge_static;
      ice::bridge::Bridge bridge(bridge_options);
      bridge.start();
      spdlog::info("bridge listening on http://{}:{}", bridge_options.host, bridge.port());
      wait_for_shutdown(nullptr);
      bridge.stop();
      return 0;
    }

    if (*policy_reload) {
      auto request = ice::wire::Message::request("policy", "reload", ice::wire::Value::object(),
                                                 reload_principal);
      auto result = ice::unwrap(
          ice::call_once(ice::net::Endpoint::parse(reload_endpoint), request, 5000ms));
      std::cout << result.dump() << "\n";
      return 0;
    }

    if (*policy_check) {
      auto rules = ice::policy::load_rules(check_file);
      for (const auto& rule : rules) std::cout << rule.to_string() << "\n";
      std::cerr << rules.size() << " rules OK\n";
      return 0;
    }
  } catch (const std::exception& e) {
    return report_error(e);
  }
  return 0;
}
