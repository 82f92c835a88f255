#include "ice/workflow.h"

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <yaml-cpp/yaml.h>

#include "ice/client.h"
#include "ice/datachannel.h"
#include "ice/error.h"

namespace fs = std::filesystem;

namespace ice::workflow {
namespace {

using Clock = std::chrono::steady_clock;

// Failure raised by the runner itself rather than by a remote object.
struct StepFailure : std::runtime_error {
  StepFailure(std::string code, const std::string& message)
      : std::runtime_error(message), code(std::move(code)) {}
  std::string code;
};

int line_of(const YAML::Node& node) { return node.Mark().line + 1; }

wire::Value to_value(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Scalar: {
      const auto& s = node.Scalar();
      if (node.Tag() == "!") return s;  // quoted
      if (s == "true" || s == "True") return true;
      if (s == "false" || s == "False") return false;
      if (s == "null" || s == "~") return nullptr;
      std::int64_t i = 0;
      auto [iptr, iec] = std::from_chars(s.data(), s.data() + s.size(), i);
      if (iec == std::errc() && iptr == s.data() + s.size()) return i;
      double d = 0;
      auto [dptr, dec] = std::from_chars(s.data(), s.data() + s.size(), d);
      if (dec == std::errc() && dptr == s.data() + s.size()) return d;
      return s;
    }
    case YAML::NodeType::Sequence: {
      wire::Value out = wire::Value::array();
      for (const auto& item : node) out.push_back(to_value(item));
      return out;
    }
    case YAML::NodeType::Map: {
      wire::Value out = wire::Value::object();
      for (const auto& item : node) out[item.first.as<std::string>()] = to_value(item.second);
      return out;
    }
  }
  return nullptr;
}

std::optional<StepKind> parse_kind(const std::string& text) {
  std::string lower;
  for (char c : text) {
    if (c != '_') lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  if (lower == "invoke") return StepKind::kInvoke;
  if (lower == "waituntil") return StepKind::kWaitUntil;
  if (lower == "assert") return StepKind::kAssert;
  if (lower == "sync") return StepKind::kSync;
  if (lower == "sleep") return StepKind::kSleep;
  return std::nullopt;
}

std::chrono::milliseconds millis(const YAML::Node& node, const char* key) {
  try {
    auto v = node.as<std::int64_t>();
    if (v < 0) throw ParseError(line_of(node), std::string(key) + " must be >= 0");
    return std::chrono::milliseconds(v);
  } catch (const YAML::Exception&) {
    throw ParseError(line_of(node), std::string(key) + " must be an integer");
  }
}

Step parse_step(const YAML::Node& node) {
  if (!node.IsMap()) throw ParseError(line_of(node), "step must be a map");
  static const std::set<std::string> kKeys{
      "kind", "object", "method", "params", "expect", "poll_ms", "deadline_ms",
      "source", "dest", "duration_ms", "save_as"};
  Step step;
  step.line = line_of(node);
  std::set<std::string> present;
  for (const auto& item : node) {
    auto key = item.first.as<std::string>();
    if (!kKeys.contains(key)) throw ParseError(line_of(item.first), "unknown key '" + key + "'");
    present.insert(key);
    const auto& v = item.second;
    auto text = [&] {
      if (!v.IsScalar()) throw ParseError(line_of(v), key + " must be a string");
      return v.Scalar();
    };
    if (key == "kind") {
      auto kind = parse_kind(text());
      if (!kind) throw ParseError(line_of(v), "unknown step kind '" + v.Scalar() + "'");
      step.kind = *kind;
    } else if (key == "object") {
      step.object = text();
    } else if (key == "method") {
      step.method = text();
    } else if (key == "params") {
      step.params = to_value(v);
      if (step.params.is_null()) step.params = wire::Value::object();
      if (!step.params.is_object()) throw ParseError(line_of(v), "params must be a map");
    } else if (key == "expect") {
      step.expect = to_value(v);
    } else if (key == "poll_ms") {
      step.poll = millis(v, "poll_ms");
    } else if (key == "deadline_ms") {
      step.deadline = millis(v, "deadline_ms");
    } else if (key == "source") {
      step.source = text();
    } else if (key == "dest") {
      step.dest = text();
    } else if (key == "duration_ms") {
      step.duration = millis(v, "duration_ms");
    } else if (key == "save_as") {
      step.save_as = text();
    }
  }
  auto require = [&](std::initializer_list<const char*> keys) {
    for (const char* k : keys) {
      if (!present.contains(k)) {
        throw ParseError(step.line, std::string(to_string(step.kind)) + " step needs '" + k + "'");
      }
    }
  };
  if (!present.contains("kind")) throw ParseError(step.line, "step needs 'kind'");
  switch (step.kind) {
    case StepKind::kInvoke:
      require({"object", "method"});
      break;
    case StepKind::kWaitUntil:
      require({"object", "method", "expect", "deadline_ms"});
      if (step.deadline.count() <= 0) throw ParseError(step.line, "deadline_ms must be > 0");
      if (step.poll.count() <= 0) throw ParseError(step.line, "poll_ms must be > 0");
      break;
    case StepKind::kAssert:
      require({"expect"});
      if (present.contains("object") != present.contains("method")) {
        throw ParseError(step.line, "Assert needs both object and method, or neither");
      }
      break;
    case StepKind::kSync:
      require({"source", "dest"});
      break;
    case StepKind::kSleep:
      require({"duration_ms"});
      break;
  }
  return step;
}

// ${name} / ${name.field...}
wire::Value lookup_var(const std::map<std::string, wire::Value>& vars, std::string_view path) {
  auto dot = path.find('.');
  auto it = vars.find(std::string(path.substr(0, dot)));
  if (it == vars.end()) {
    throw StepFailure("UnboundVariable", "no variable '" + std::string(path) + "'");
  }
  const wire::Value* v = &it->second;
  while (dot != std::string_view::npos) {
    auto next = path.find('.', dot + 1);
    auto field = std::string(path.substr(dot + 1, next == std::string_view::npos ? next : next - dot - 1));
    if (!v->is_object() || !v->contains(field)) {
      throw StepFailure("UnboundVariable", "no field '" + std::string(path) + "'");
    }
    v = &(*v)[field];
    dot = next;
  }
  return *v;
}

wire::Value substitute(const wire::Value& value, const std::map<std::string, wire::Value>& vars) {
  if (value.is_string()) {
    const auto& s = value.get_ref<const std::string&>();
    if (s.size() > 3 && s.starts_with("${") && s.ends_with("}") &&
        s.find("${", 2) == std::string::npos) {
      return lookup_var(vars, std::string_view(s).substr(2, s.size() - 3));
    }
    std::string out;
    std::size_t pos = 0;
    while (true) {
      auto open = s.find("${", pos);
      if (open == std::string::npos) break;
      auto close = s.find('}', open);
      if (close == std::string::npos) break;
      out += s.substr(pos, open - pos);
      auto v = lookup_var(vars, std::string_view(s).substr(open + 2, close - open - 2));
      out += v.is_string() ? v.get<std::string>() : v.dump();
      pos = close + 1;
    }
    out += s.substr(pos);
    return out;
  }
  if (value.is_array()) {
    wire::Value out = wire::Value::array();
    for (const auto& v : value) out.push_back(substitute(v, vars));
    return out;
  }
  if (value.is_object()) {
    wire::Value out = wire::Value::object();
    for (const auto& [k, v] : value.items()) out[k] = substitute(v, vars);
    return out;
  }
  return value;
}

std::string substitute_text(const std::string& text,
                            const std::map<std::string, wire::Value>& vars) {
  auto v = substitute(wire::Value(text), vars);
  return v.is_string() ? v.get<std::string>() : v.dump();
}

wire::Value local_call(const std::string& method, const wire::Value& params,
                       const fs::path& base) {
  auto resolve = [&](const wire::Value& p) {
    if (!p.is_string()) throw Error(ErrorCode::kInvalidParams, "paths must be strings");
    fs::path path(p.get<std::string>());
    return path.is_absolute() ? path : base / path;
  };
  if (method == "exists") {
    std::vector<wire::Value> paths;
    if (params.contains("path")) paths.push_back(params["path"]);
    if (params.contains("paths")) {
      for (const auto& p : params["paths"]) paths.push_back(p);
    }
    if (paths.empty()) throw Error(ErrorCode::kInvalidParams, "exists needs path or paths");
    bool all = true;
    for (const auto& p : paths) {
      std::error_code ec;
      all = all && fs::is_regular_file(resolve(p), ec);
    }
    return all;
  }
  if (method == "list") {
    if (!params.contains("dir")) throw Error(ErrorCode::kInvalidParams, "list needs dir");
    std::vector<std::string> names;
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(resolve(params["dir"]), ec)) {
      auto name = entry.path().filename().string();
      if (!name.starts_with(".")) names.push_back(name);
    }
    std::sort(names.begin(), names.end());
    return names;
  }
  throw Error(ErrorCode::kNotFound, "local has no method '" + method + "'");
}

class Runner {
 public:
  explicit Runner(const RunOptions& options) : options_(options), vars_(options.variables) {}

  wire::Value call(const std::string& object, const std::string& method,
                   const wire::Value& params) {
    if (object == "local") return local_call(method, params, options_.base_dir);
    auto it = proxies_.find(object);
    if (it == proxies_.end()) {
      it = proxies_
               .emplace(object, client::Proxy(object, options_.registry, options_.principal,
                                              options_.timeout))
               .first;
    }
    return it->second.invoke(method, params);
  }

  wire::Value execute(const Step& step) {
    auto object = substitute_text(step.object, vars_);
    auto params = substitute(step.params, vars_);
    std::optional<wire::Value> expect;
    if (step.expect) expect = substitute(*step.expect, vars_);

    switch (step.kind) {
      case StepKind::kInvoke: {
        auto result = call(object, step.method, params);
        last_result_ = result;
        return result;
      }
      case StepKind::kWaitUntil: {
        auto deadline = Clock::now() + step.deadline;
        std::optional<wire::Value> last;
        std::string last_error;
        while (true) {
          try {
            last = call(object, step.method, params);
            if (matches(*expect, *last)) return *last;
          } catch (const TransportError& e) {
            last_error = e.what();
          }
          auto now = Clock::now();
          if (now >= deadline) break;
          std::this_thread::sleep_for(std::min<Clock::duration>(step.poll, deadline - now));
        }
        throw StepFailure("DeadlineExceeded",
                          "condition not met within " + std::to_string(step.deadline.count()) +
                              " ms; last " +
                              (last ? "result " + last->dump() : "error " + last_error));
      }
      case StepKind::kAssert: {
        wire::Value actual;
        if (!step.object.empty()) {
          actual = call(object, step.method, params);
        } else if (last_result_) {
          actual = *last_result_;
        } else {
          throw StepFailure("AssertionFailed", "no preceding Invoke result to assert on");
        }
        if (!matches(*expect, actual)) {
          throw StepFailure("AssertionFailed",
                            "expected " + expect->dump() + ", got " + actual.dump());
        }
        return actual;
      }
      case StepKind::kSync: {
        auto remote = net::Endpoint::parse(substitute_text(step.source, vars_));
        fs::path dest(substitute_text(step.dest, vars_));
        if (dest.is_relative()) dest = options_.base_dir / dest;
        data::SyncOptions sync_options;
        sync_options.principal = options_.principal;
        auto report = data::sync_once(remote, dest, sync_options);
        data::record_sync_report(dest, report);
        if (!report.converged()) {
          throw StepFailure("SyncMismatch", report.to_json()["mismatches"].dump());
        }
        return report.to_json();
      }
      case StepKind::kSleep:
        std::this_thread::sleep_for(step.duration);
        return nullptr;
    }
    return nullptr;
  }

  void bind(const std::string& name, const wire::Value& value) {
    if (!name.empty()) vars_[name] = value;
  }

 private:
  const RunOptions& options_;
  std::map<std::string, client::Proxy> proxies_;
  std::map<std::string, wire::Value> vars_;
  std::optional<wire::Value> last_result_;
};

std::string_view to_string(StepStatus status) {
  switch (status) {
    case StepStatus::kOk: return "Ok";
    case StepStatus::kFailed: return "Failed";
    case StepStatus::kSkipped: return "Skipped";
  }
  return "Skipped";
}

std::string transport_code(TransportError::Kind kind) {
  switch (kind) {
    case TransportError::Kind::kConnectFailed: return "ConnectFailed";
    case TransportError::Kind::kClosed: return "Closed";
    case TransportError::Kind::kTimeout: return "Timeout";
    case TransportError::Kind::kProtocol: return "Protocol";
  }
  return "Closed";
}

}  // namespace

std::string_view to_string(StepKind kind) {
  switch (kind) {
    case StepKind::kInvoke: return "Invoke";
    case StepKind::kWaitUntil: return "WaitUntil";
    case StepKind::kAssert: return "Assert";
    case StepKind::kSync: return "Sync";
    case StepKind::kSleep: return "Sleep";
  }
  return "Invoke";
}

Workflow parse_workflow(std::string_view text) {
  YAML::Node doc;
  try {
    doc = YAML::Load(std::string(text));
  } catch (const YAML::ParserException& e) {
    throw ParseError(e.mark.line + 1, e.msg);
  }
  Workflow wf;
  if (!doc || doc.IsNull()) return wf;
  if (!doc.IsMap()) throw ParseError(line_of(doc), "workflow must be a map with 'steps'");
  for (const auto& item : doc) {
    auto key = item.first.as<std::string>();
    if (key != "steps") throw ParseError(line_of(item.first), "unknown key '" + key + "'");
  }
  auto steps = doc["steps"];
  if (!steps || steps.IsNull()) return wf;
  if (!steps.IsSequence()) throw ParseError(line_of(steps), "'steps' must be a list");
  for (const auto& node : steps) wf.steps.push_back(parse_step(node));
  return wf;
}

Workflow load_workflow(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read workflow " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_workflow(buf.str());
}

bool matches(const wire::Value& expected, const wire::Value& actual) {
  if (expected.is_object() && actual.is_object()) {
    for (const auto& [key, value] : expected.items()) {
      if (!actual.contains(key) || !matches(value, actual[key])) return false;
    }
    return true;
  }
  return expected == actual;
}

bool WorkflowReport::ok() const {
  for (const auto& s : steps) {
    if (s.status != StepStatus::kOk) return false;
  }
  return true;
}

wire::Value WorkflowReport::to_json() const {
  wire::Value out_steps = wire::Value::array();
  for (const auto& s : steps) {
    wire::Value j = {{"index", s.index},
                     {"kind", to_string(s.kind)},
                     {"status", to_string(s.status)},
                     {"duration_ms", s.duration.count()}};
    if (s.result) j["result"] = *s.result;
    if (s.status == StepStatus::kFailed) {
      j["error"] = {{"code", s.error_code}, {"message", s.error_message}};
    }
    out_steps.push_back(std::move(j));
  }
  return {{"status", ok() ? "Ok" : "Failed"},
          {"duration_ms", duration.count()},
          {"steps", out_steps}};
}

WorkflowReport run_workflow(const Workflow& workflow, const RunOptions& options) {
  WorkflowReport report;
  Runner runner(options);
  auto start = Clock::now();
  bool failed = false;
  for (std::size_t i = 0; i < workflow.steps.size(); ++i) {
    const auto& step = workflow.steps[i];
    StepOutcome outcome;
    outcome.index = i;
    outcome.kind = step.kind;
    if (failed) {
      report.steps.push_back(std::move(outcome));
      continue;
    }
    auto t0 = Clock::now();
    try {
      outcome.result = runner.execute(step);
      outcome.status = StepStatus::kOk;
      runner.bind(step.save_as, *outcome.result);
    } catch (const StepFailure& e) {
      outcome.error_code = e.code;
      outcome.error_message = e.what();
    } catch (const Error& e) {
      outcome.error_code = std::string(ice::to_string(e.code()));
      outcome.error_message = e.what();
    } catch (const TransportError& e) {
      outcome.error_code = transport_code(e.kind());
      outcome.error_message = e.what();
    } catch (const std::exception& e) {
      outcome.error_code = "Internal";
      outcome.error_message = e.what();
    }
    if (outcome.status != StepStatus::kOk) {
      outcome.status = StepStatus::kFailed;
      failed = true;
    }
    outcome.duration = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0);
    report.steps.push_back(std::move(outcome));
  }
  report.duration = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start);
  return report;
}

}  // namespace ice::workflow
