#ifndef ICE_WORKFLOW_H_
#define ICE_WORKFLOW_H_

// Declarative steering workflows.
//
// A workflow file (YAML or JSON) holds `steps:`, a flat list executed in
// order until the first failure; later steps are reported as Skipped.
//
//   steps:
//     - {kind: Invoke, object: u200.microscope, method: start_scan,
//        params: {width: 64, height: 64}, save_as: scan}
//     - {kind: WaitUntil, object: u200.microscope, method: scan_status,
//        expect: {state: Idle}, poll_ms: 100, deadline_ms: 30000}
//     - {kind: Sync, source: "127.0.0.1:9200", dest: mirror}
//     - {kind: Assert, object: local, method: exists,
//        params: {paths: ["mirror/${scan.file_id}"]}, expect: true}
//     - {kind: Sleep, duration_ms: 250}
//
// `expect` matches a map result when every expected key matches; other values
// must be equal. `save_as` binds a step result to a name; string values of the
// form ${name} or ${name.field} are substituted in later steps. Object
// "local" is evaluated in-process: exists {path | paths} -> bool and
// list {dir} -> sorted file names.

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ice/net.h"
#include "ice/wire.h"

namespace ice::workflow {

enum class StepKind { kInvoke, kWaitUntil, kAssert, kSync, kSleep };
std::string_view to_string(StepKind kind);

struct Step {
  StepKind kind = StepKind::kInvoke;
  std::string object;
  std::string method;
  wire::Value params = wire::Value::object();
  std::optional<wire::Value> expect;
  std::chrono::milliseconds poll{100};
  std::chrono::milliseconds deadline{0};
  std::string source;
  std::string dest;
  std::chrono::milliseconds duration{0};
  std::string save_as;
  int line = 0;
};

struct Workflow {
  std::vector<Step> steps;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(int line, const std::string& message)
      : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

Workflow parse_workflow(std::string_view text);
Workflow load_workflow(const std::filesystem::path& path);

enum class StepStatus { kOk, kFailed, kSkipped };

struct StepOutcome {
  std::size_t index = 0;
  StepKind kind = StepKind::kInvoke;
  StepStatus status = StepStatus::kSkipped;
  std::optional<wire::Value> result;
  // Remote ErrorCode name, or Timeout/ConnectFailed/Closed/Protocol,
  // AssertionFailed, DeadlineExceeded.
  std::string error_code;
  std::string error_message;
  std::chrono::milliseconds duration{0};
};

struct WorkflowReport {
  std::vector<StepOutcome> steps;
  std::chrono::milliseconds duration{0};

  bool ok() const;
  wire::Value to_json() const;
};

struct RunOptions {
  net::Endpoint registry{"127.0.0.1", 9090};
  std::string principal = "anonymous";
  std::chrono::milliseconds timeout{5000};
  // Relative paths in Sync/local steps resolve against this directory.
  std::filesystem::path base_dir = ".";
  // Bound before the first step, e.g. {"store": "10.0.0.5:9200"} for ${store}.
  std::map<std::string, wire::Value> variables;
};

bool matches(const wire::Value& expected, const wire::Value& actual);

WorkflowReport run_workflow(const Workflow& workflow, const RunOptions& options);

}  // namespace ice::workflow

#endif  // ICE_WORKFLOW_H_
