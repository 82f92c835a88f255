#include "ice/policy.h"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace ice::policy {
namespace {

std::uint32_t mask_for(int prefix) {
  return prefix == 0 ? 0u : ~std::uint32_t{0} << (32 - prefix);
}

std::vector<std::string_view> split_words(std::string_view line) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) words.push_back(line.substr(start, i - start));
  }
  return words;
}

}  // namespace

std::string_view to_string(Channel channel) {
  switch (channel) {
    case Channel::kControl: return "control";
    case Channel::kData: return "data";
    case Channel::kRegistry: return "registry";
  }
  return "control";
}

std::optional<Channel> parse_channel(std::string_view text) {
  if (text == "control") return Channel::kControl;
  if (text == "data") return Channel::kData;
  if (text == "registry") return Channel::kRegistry;
  return std::nullopt;
}

std::optional<Ipv4> Ipv4::parse(std::string_view text) {
  std::uint32_t bits = 0;
  int octets = 0;
  std::size_t pos = 0;
  while (true) {
    auto end = text.find('.', pos);
    auto part = text.substr(pos, end == std::string_view::npos ? end : end - pos);
    unsigned value = 0;
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), value);
    if (part.empty() || part.size() > 3 || ec != std::errc() ||
        ptr != part.data() + part.size() || value > 255 || ++octets > 4) {
      return std::nullopt;
    }
    bits = (bits << 8) | value;
    if (end == std::string_view::npos) break;
    pos = end + 1;
  }
  if (octets != 4) return std::nullopt;
  return Ipv4{bits};
}

std::string Ipv4::to_string() const {
  return std::to_string(bits >> 24) + "." + std::to_string((bits >> 16) & 0xFF) +
         "." + std::to_string((bits >> 8) & 0xFF) + "." +
         std::to_string(bits & 0xFF);
}

std::optional<SourcePattern> SourcePattern::parse(std::string_view text) {
  if (text == "*") return SourcePattern{};
  int prefix = 32;
  auto slash = text.find('/');
  auto addr_text = text.substr(0, slash);
  if (slash != std::string_view::npos) {
    auto prefix_text = text.substr(slash + 1);
    auto [ptr, ec] = std::from_chars(
        prefix_text.data(), prefix_text.data() + prefix_text.size(), prefix);
    if (prefix_text.empty() || ec != std::errc() ||
        ptr != prefix_text.data() + prefix_text.size() || prefix < 0 ||
        prefix > 32) {
      return std::nullopt;
    }
  }
  auto addr = Ipv4::parse(addr_text);
  if (!addr) return std::nullopt;
  return SourcePattern{false, Ipv4{addr->bits & mask_for(prefix)}, prefix};
}

bool SourcePattern::contains(Ipv4 address) const {
  if (any) return true;
  return (address.bits & mask_for(prefix)) == base.bits;
}

std::string SourcePattern::to_string() const {
  if (any) return "*";
  if (prefix == 32) return base.to_string();
  return base.to_string() + "/" + std::to_string(prefix);
}

bool Rule::matches(const AccessContext& ctx) const {
  return channel == ctx.channel &&
         (principal == "*" || principal == ctx.principal) &&
         source.contains(ctx.source);
}

std::string Rule::to_string() const {
  return std::string(action == Action::kAllow ? "allow" : "deny") + " " +
         principal + " " + source.to_string() + " " +
         std::string(policy::to_string(channel));
}

std::vector<Rule> parse_rules(std::string_view text) {
  std::vector<Rule> rules;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    ++line_no;
    pos = end + 1;
    if (auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    auto words = split_words(line);
    if (words.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (words.size() != 4) {
      throw ParseError(line_no, "expected 4 fields, found " +
                                    std::to_string(words.size()));
    }
    Rule rule;
    if (words[0] == "allow") {
      rule.action = Action::kAllow;
    } else if (words[0] == "deny") {
      rule.action = Action::kDeny;
    } else {
      throw ParseError(line_no, "unknown action '" + std::string(words[0]) + "'");
    }
    rule.principal = std::string(words[1]);
    auto source = SourcePattern::parse(words[2]);
    if (!source) {
      throw ParseError(line_no, "bad address or CIDR '" + std::string(words[2]) + "'");
    }
    rule.source = *source;
    auto channel = parse_channel(words[3]);
    if (!channel) {
      throw ParseError(line_no, "unknown channel '" + std::string(words[3]) + "'");
    }
    rule.channel = *channel;
    rules.push_back(std::move(rule));
    if (end == text.size()) break;
  }
  return rules;
}

std::vector<Rule> load_rules(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read policy file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_rules(buf.str());
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.detail(), path.string());
  }
}

Action evaluate(std::span<const Rule> rules, const AccessContext& ctx) {
  for (const auto& rule : rules) {
    if (rule.matches(ctx)) return rule.action;
  }
  return Action::kDeny;
}

bool admits_connection(std::span<const Rule> rules, Ipv4 source,
                       Channel channel) {
  // Principals already shadowed by an earlier specific deny.
  std::set<std::string> denied;
  for (const auto& rule : rules) {
    if (rule.channel != channel || !rule.source.contains(source)) continue;
    if (rule.principal == "*") return rule.action == Action::kAllow;
    if (rule.action == Action::kAllow) {
      if (!denied.contains(rule.principal)) return true;
    } else {
      denied.insert(rule.principal);
    }
  }
  return false;
}

std::shared_ptr<Engine> Engine::allow_all() {
  std::shared_ptr<Engine> engine(new Engine());
  engine->allow_all_ = true;
  engine->rules_ = std::make_shared<const std::vector<Rule>>();
  return engine;
}

std::shared_ptr<Engine> Engine::from_rules(std::vector<Rule> rules) {
  std::shared_ptr<Engine> engine(new Engine());
  engine->rules_ = std::make_shared<const std::vector<Rule>>(std::move(rules));
  return engine;
}

std::shared_ptr<Engine> Engine::from_file(std::filesystem::path path) {
  auto engine = from_rules(load_rules(path));
  engine->path_ = std::move(path);
  return engine;
}

std::shared_ptr<const std::vector<Rule>> Engine::snapshot() const {
  std::lock_guard lock(mutex_);
  return rules_;
}

Action Engine::evaluate(const AccessContext& ctx) const {
  if (allow_all_) return Action::kAllow;
  return policy::evaluate(*snapshot(), ctx);
}

bool Engine::admits_connection(std::string_view source, Channel channel) const {
  if (allow_all_) return true;
  auto addr = Ipv4::parse(source);
  return addr && policy::admits_connection(*snapshot(), *addr, channel);
}

bool Engine::allows(std::string_view principal, std::string_view source,
                    Channel channel) const {
  if (allow_all_) return true;
  auto addr = Ipv4::parse(source);
  if (!addr) return false;
  return evaluate(AccessContext{std::string(principal), *addr, channel}) ==
         Action::kAllow;
}

std::size_t Engine::reload() {
  if (!path_) return rule_count();
  auto fresh = std::make_shared<const std::vector<Rule>>(load_rules(*path_));
  std::lock_guard lock(mutex_);
  rules_ = std::move(fresh);
  return rules_->size();
}

std::size_t Engine::rule_count() const { return snapshot()->size(); }

}  // namespace ice::policy
