#ifndef ICE_POLICY_H_
#define ICE_POLICY_H_

// Firewall-style access policy shared by every daemon.
//
// Rule file: one rule per line,
//   <allow|deny> <principal|*> <addr|cidr|*> <control|data|registry>
// with '#' starting a comment. Rules are evaluated in file order; the first
// matching rule decides and a context that matches nothing is denied.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ice::policy {

enum class Channel { kControl, kData, kRegistry };
enum class Action { kAllow, kDeny };

std::string_view to_string(Channel channel);
std::optional<Channel> parse_channel(std::string_view text);

struct Ipv4 {
  std::uint32_t bits = 0;

  static std::optional<Ipv4> parse(std::string_view text);
  std::string to_string() const;
  friend bool operator==(const Ipv4&, const Ipv4&) = default;
};

// "*", a single address (/32) or a CIDR block.
struct SourcePattern {
  bool any = true;
  Ipv4 base;
  int prefix = 0;

  static std::optional<SourcePattern> parse(std::string_view text);
  bool contains(Ipv4 address) const;
  std::string to_string() const;
};

struct AccessContext {
  std::string principal;
  Ipv4 source;
  Channel channel = Channel::kControl;
};

struct Rule {
  std::string principal = "*";
  SourcePattern source;
  Channel channel = Channel::kControl;
  Action action = Action::kDeny;

  bool matches(const AccessContext& ctx) const;
  std::string to_string() const;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(int line, const std::string& detail, const std::string& file = {})
      : std::runtime_error((file.empty() ? "" : file + ": ") + "line " +
                           std::to_string(line) + ": " + detail),
        line_(line),
        detail_(detail) {}
  int line() const { return line_; }
  const std::string& detail() const { return detail_; }

 private:
  int line_;
  std::string detail_;
};

// Either every line parses or ParseError names the first bad one.
std::vector<Rule> parse_rules(std::string_view text);
// As parse_rules; throws std::runtime_error if the file cannot be read.
std::vector<Rule> load_rules(const std::filesystem::path& path);

Action evaluate(std::span<const Rule> rules, const AccessContext& ctx);

// Connection-time check, before the principal is known: true iff some
// principal arriving from `source` on `channel` would be allowed.
bool admits_connection(std::span<const Rule> rules, Ipv4 source,
                       Channel channel);

// Holds the active rule list of a daemon. Reload swaps the whole list;
// a failed reload keeps the previous one.
class Engine {
 public:
  // Permits everything; used when a daemon runs without --policy.
  static std::shared_ptr<Engine> allow_all();
  static std::shared_ptr<Engine> from_rules(std::vector<Rule> rules);
  static std::shared_ptr<Engine> from_file(std::filesystem::path path);

  Action evaluate(const AccessContext& ctx) const;
  bool admits_connection(std::string_view source, Channel channel) const;
  bool allows(std::string_view principal, std::string_view source,
              Channel channel) const;

  // Re-reads the file given to from_file. Returns the new rule count.
  std::size_t reload();
  std::size_t rule_count() const;

 private:
  Engine() = default;
  std::shared_ptr<const std::vector<Rule>> snapshot() const;

  bool allow_all_ = false;
  std::optional<std::filesystem::path> path_;
  mutable std::mutex mutex_;
  std::shared_ptr<const std::vector<Rule>> rules_;
};

}  // namespace ice::policy

#endif  // ICE_POLICY_H_
