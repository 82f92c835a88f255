#include "ice/policy.h"

#include <gtest/gtest.h>

#include <random>

#include "test_support.h"

namespace ice::policy {
namespace {

using testing::ReferenceRule;

AccessContext ctx(const std::string& principal, const std::string& address, Channel channel) {
  return {principal, *Ipv4::parse(address), channel};
}

TEST(PolicyParse, EmptyTextGivesNoRules) {
  EXPECT_TRUE(parse_rules("").empty());
  EXPECT_TRUE(parse_rules("\n   \n# only a comment\n").empty());
}

TEST(PolicyParse, SingleAllowRule) {
  auto rules = parse_rules("allow * 127.0.0.0/8 control\n");
  ASSERT_EQ(rules.size(), 1u);
  EXPECT_EQ(rules[0].action, Action::kAllow);
  EXPECT_EQ(rules[0].principal, "*");
  EXPECT_EQ(rules[0].channel, Channel::kControl);
  EXPECT_FALSE(rules[0].source.any);
  EXPECT_EQ(rules[0].source.prefix, 8);
  EXPECT_EQ(rules[0].to_string(), "allow * 127.0.0.0/8 control");
}

TEST(PolicyParse, TrailingCommentsAndSpacing) {
  auto rules = parse_rules("  deny   alice\t10.1.2.3   data   # laptop\nallow ops * registry");
  ASSERT_EQ(rules.size(), 2u);
  EXPECT_EQ(rules[0].action, Action::kDeny);
  EXPECT_EQ(rules[0].source.prefix, 32);
  EXPECT_EQ(rules[1].principal, "ops");
  EXPECT_TRUE(rules[1].source.any);
}

TEST(PolicyParse, BadCidrNamesTheLine) {
  try {
    parse_rules("allow * * control\n# comment\nallow * 10.0.0.0/40 data\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(PolicyParse, OtherMalformedLinesAreRejected) {
  for (const char* bad : {"permit * * control", "allow * * telnet", "allow * *",
                          "allow * 1.2.3 control", "allow * 1.2.3.4.5 control",
                          "allow * 256.0.0.1 control", "allow * 1.2.3.4/ control",
                          "allow * * control extra"}) {
    EXPECT_THROW(parse_rules(bad), ParseError) << bad;
  }
}

TEST(PolicyParse, FailedLoadIsAllOrNothing) {
  testing::TempDir dir;
  auto path = dir / "rules.policy";
  testing::write_file(path, "allow ops * control\n");
  auto engine = Engine::from_file(path);
  EXPECT_EQ(engine->rule_count(), 1u);

  testing::write_file(path, "allow ops * control\nallow * 10.0.0.0/40 data\n");
  EXPECT_THROW(engine->reload(), ParseError);
  EXPECT_EQ(engine->rule_count(), 1u);
  EXPECT_TRUE(engine->allows("ops", "127.0.0.1", Channel::kControl));

  testing::write_file(path, "deny ops * control\n");
  EXPECT_EQ(engine->reload(), 1u);
  EXPECT_FALSE(engine->allows("ops", "127.0.0.1", Channel::kControl));
}

TEST(PolicyEvaluate, EmptyRuleListDeniesEverything) {
  std::vector<Rule> none;
  for (auto ch : {Channel::kControl, Channel::kData, Channel::kRegistry}) {
    EXPECT_EQ(evaluate(none, ctx("anyone", "127.0.0.1", ch)), Action::kDeny);
  }
}

TEST(PolicyEvaluate, FirstMatchWins) {
  auto rules = parse_rules("deny alice * control\nallow * * control\n");
  EXPECT_EQ(evaluate(rules, ctx("alice", "10.0.0.1", Channel::kControl)), Action::kDeny);
  EXPECT_EQ(evaluate(rules, ctx("bob", "10.0.0.1", Channel::kControl)), Action::kAllow);
  EXPECT_EQ(evaluate(rules, ctx("bob", "10.0.0.1", Channel::kData)), Action::kDeny);
}

TEST(PolicyEvaluate, TwentyFourContextsMatchBruteForceReference) {
  // Exercises principal, CIDR, exact address and channel matching.
  std::vector<ReferenceRule> ref{
      {"deny", "alice", "10.0.0.0/24", "data"},
      {"allow", "alice", "*", "data"},
      {"allow", "*", "192.168.1.7", "registry"},
  };
  auto rules = parse_rules(testing::to_rule_text(ref));
  ASSERT_EQ(rules.size(), 3u);

  const std::vector<std::string> principals{"alice", "bob"};
  const std::vector<std::string> addresses{"10.0.0.5", "10.0.1.5", "192.168.1.7", "127.0.0.1"};
  const std::vector<std::pair<std::string, Channel>> channels{
      {"control", Channel::kControl}, {"data", Channel::kData}, {"registry", Channel::kRegistry}};
  int checked = 0;
  for (const auto& p : principals) {
    for (const auto& a : addresses) {
      for (const auto& [name, ch] : channels) {
        bool expected = testing::reference_allows(ref, p, a, name);
        EXPECT_EQ(evaluate(rules, ctx(p, a, ch)) == Action::kAllow, expected)
            << p << " " << a << " " << name;
        ++checked;
      }
    }
  }
  EXPECT_EQ(checked, 24);
}

TEST(PolicyEvaluate, RandomRuleSetsMatchReference) {
  std::mt19937 rng(7);
  const std::vector<std::string> principals{"*", "ops", "alice", "bob"};
  const std::vector<std::string> sources{"*", "10.0.0.0/8", "10.1.0.0/16", "10.1.2.0/24",
                                         "10.1.2.3", "192.168.0.0/23", "0.0.0.0/0"};
  const std::vector<std::string> channels{"control", "data", "registry"};
  const std::vector<std::string> addrs{"10.1.2.3", "10.1.2.4", "10.9.9.9", "192.168.1.200",
                                       "192.168.2.1", "8.8.8.8"};
  auto pick = [&](const auto& v) { return v[rng() % v.size()]; };
  for (int round = 0; round < 200; ++round) {
    std::vector<ReferenceRule> ref;
    for (int i = 0, n = static_cast<int>(rng() % 6); i < n; ++i) {
      ref.push_back({rng() % 2 ? "allow" : "deny", pick(principals), pick(sources), pick(channels)});
    }
    auto rules = parse_rules(testing::to_rule_text(ref));
    for (const auto& p : {"ops", "alice", "bob", "zed"}) {
      for (const auto& a : addrs) {
        for (std::size_t c = 0; c < channels.size(); ++c) {
          bool expected = testing::reference_allows(ref, p, a, channels[c]);
          auto got = evaluate(rules, ctx(p, a, static_cast<Channel>(c)));
          ASSERT_EQ(got == Action::kAllow, expected)
              << testing::to_rule_text(ref) << p << " " << a << " " << channels[c];
        }
      }
    }
  }
}

TEST(PolicyCidr, SlashTwentyFourToThirtyTwoBruteForce) {
  const Ipv4 base = *Ipv4::parse("172.16.5.0");
  for (int prefix = 24; prefix <= 32; ++prefix) {
    for (std::uint32_t base_low = 0; base_low < 256; base_low += 37) {
      Ipv4 block_base{base.bits | base_low};
      auto pattern = SourcePattern::parse(block_base.to_string() + "/" + std::to_string(prefix));
      ASSERT_TRUE(pattern);
      std::uint32_t mask = prefix == 0 ? 0 : ~std::uint32_t{0} << (32 - prefix);
      for (std::uint32_t low = 0; low < 256; ++low) {
        Ipv4 addr{base.bits | low};
        bool expected = (addr.bits & mask) == (block_base.bits & mask);
        ASSERT_EQ(pattern->contains(addr), expected)
            << addr.to_string() << " in " << block_base.to_string() << "/" << prefix;
      }
      // Addresses in a neighbouring /24 are never inside.
      EXPECT_FALSE(pattern->contains(Ipv4{base.bits + 256 + base_low}));
    }
  }
}

TEST(PolicyConnection, AdmitsWhenAnyPrincipalCouldBeAllowed) {
  auto rules = parse_rules("allow ops 127.0.0.1 data\ndeny * * data\n");
  EXPECT_TRUE(admits_connection(rules, *Ipv4::parse("127.0.0.1"), Channel::kData));
  EXPECT_FALSE(admits_connection(rules, *Ipv4::parse("10.0.0.1"), Channel::kData));
  EXPECT_FALSE(admits_connection(rules, *Ipv4::parse("127.0.0.1"), Channel::kControl));

  auto blanket = parse_rules("deny * 127.0.0.1 data\nallow ops * data\n");
  EXPECT_FALSE(admits_connection(blanket, *Ipv4::parse("127.0.0.1"), Channel::kData));
  EXPECT_TRUE(admits_connection(blanket, *Ipv4::parse("127.0.0.2"), Channel::kData));
}

TEST(PolicyConnection, AgreesWithExistentialDefinition) {
  std::mt19937 rng(11);
  const std::vector<std::string> principals{"*", "ops", "alice"};
  const std::vector<std::string> sources{"*", "10.0.0.0/8", "10.1.2.3", "127.0.0.1"};
  const std::vector<std::string> addrs{"10.1.2.3", "10.2.0.1", "127.0.0.1", "8.8.4.4"};
  auto pick = [&](const auto& v) { return v[rng() % v.size()]; };
  for (int round = 0; round < 300; ++round) {
    std::vector<ReferenceRule> ref;
    for (int i = 0, n = static_cast<int>(rng() % 5); i < n; ++i) {
      ref.push_back({rng() % 2 ? "allow" : "deny", pick(principals), pick(sources), "data"});
    }
    auto rules = parse_rules(testing::to_rule_text(ref));
    for (const auto& a : addrs) {
      // Named principals plus one that no rule mentions.
      bool expected = false;
      for (const auto& p : {"ops", "alice", "stranger"}) {
        expected = expected || testing::reference_allows(ref, p, a, "data");
      }
      ASSERT_EQ(admits_connection(rules, *Ipv4::parse(a), Channel::kData), expected)
          << testing::to_rule_text(ref) << a;
    }
  }
}

TEST(PolicyEngine, AllowAllPermitsEverything) {
  auto engine = Engine::allow_all();
  EXPECT_TRUE(engine->allows("whoever", "1.2.3.4", Channel::kData));
  EXPECT_TRUE(engine->admits_connection("1.2.3.4", Channel::kControl));
}

TEST(PolicyEngine, UnparseableSourceAddressIsDenied) {
  auto engine = Engine::from_rules(parse_rules("allow * 127.0.0.0/8 control\n"));
  EXPECT_FALSE(engine->allows("ops", "", Channel::kControl));
  EXPECT_FALSE(engine->allows("ops", "::1", Channel::kControl));
}

}  // namespace
}  // namespace ice::policy
