#include "ice/registry.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "test_support.h"

namespace ice::registry {
namespace {

void expect_code(ErrorCode code, const std::function<void()>& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

std::vector<std::string> names(const std::vector<NameRecord>& records) {
  std::vector<std::string> out;
  for (const auto& r : records) out.push_back(r.name);
  return out;
}

TEST(Registry, RegisterThenLookup) {
  Registry reg;
  reg.register_name("u200.microscope", "127.0.0.1:9101", {{"kind", "stem"}});
  auto rec = reg.lookup("u200.microscope");
  EXPECT_EQ(rec.endpoint, "127.0.0.1:9101");
  EXPECT_EQ(rec.metadata["kind"], "stem");
  EXPECT_GT(rec.registered_at, 0);
}

TEST(Registry, ReRegisterReplacesEndpoint) {
  Registry reg;
  reg.register_name("a", "127.0.0.1:1");
  reg.register_name("a", "127.0.0.1:2");
  EXPECT_EQ(reg.lookup("a").endpoint, "127.0.0.1:2");
  EXPECT_EQ(reg.size(), 1u);
}

TEST(Registry, InvalidRegistrations) {
  Registry reg;
  expect_code(ErrorCode::kInvalidParams, [&] { reg.register_name("", "127.0.0.1:1"); });
  expect_code(ErrorCode::kInvalidParams, [&] { reg.register_name("a", "no-port"); });
  expect_code(ErrorCode::kInvalidParams, [&] { reg.register_name("a", "host:0"); });
  expect_code(ErrorCode::kInvalidParams, [&] { reg.register_name("a", "host:70000"); });
  EXPECT_EQ(reg.size(), 0u);
}

TEST(Registry, LookupMissing) {
  Registry reg;
  expect_code(ErrorCode::kNotFound, [&] { reg.lookup("ghost"); });
  reg.register_name("x", "127.0.0.1:5");
  reg.unregister("x");
  expect_code(ErrorCode::kNotFound, [&] { reg.lookup("x"); });
}

TEST(Registry, UnregisterIsIdempotent) {
  Registry reg;
  reg.register_name("keep", "127.0.0.1:5");
  reg.unregister("absent");
  EXPECT_EQ(names(reg.list()), std::vector<std::string>{"keep"});
  reg.register_name("gone", "127.0.0.1:6");
  reg.unregister("gone");
  auto once = reg.list();
  reg.unregister("gone");
  EXPECT_EQ(reg.list(), once);
}

TEST(Registry, ListFiltersByPrefix) {
  Registry reg;
  EXPECT_TRUE(reg.list().empty());
  for (const char* n : {"b.z", "a.y", "a.x"}) reg.register_name(n, "127.0.0.1:1");
  EXPECT_EQ(names(reg.list("a.")), (std::vector<std::string>{"a.x", "a.y"}));
  EXPECT_EQ(names(reg.list()), (std::vector<std::string>{"a.x", "a.y", "b.z"}));
  EXPECT_TRUE(reg.list("c").empty());
}

TEST(Registry, HundredRecordsEachResolveToTheirOwnEndpoint) {
  Registry reg;
  for (int i = 0; i < 100; ++i) {
    reg.register_name("obj." + std::to_string(i), "10.0." + std::to_string(i / 50) + "." +
                                                       std::to_string(i % 50) + ":" +
                                                       std::to_string(9000 + i));
  }
  for (int i = 0; i < 100; ++i) {
    auto expected = "10.0." + std::to_string(i / 50) + "." + std::to_string(i % 50) + ":" +
                    std::to_string(9000 + i);
    EXPECT_EQ(reg.lookup("obj." + std::to_string(i)).endpoint, expected);
  }
}

TEST(Registry, ListIsSortedForEveryRegistrationOrder) {
  std::vector<std::string> base{"delta", "alpha", "echo", "charlie", "bravo", "alpha.2", "Zulu"};
  auto sorted = base;
  std::sort(sorted.begin(), sorted.end());
  std::mt19937 rng(3);
  for (int round = 0; round < 200; ++round) {
    std::shuffle(base.begin(), base.end(), rng);
    Registry reg;
    for (const auto& n : base) reg.register_name(n, "127.0.0.1:1");
    ASSERT_EQ(names(reg.list()), sorted);
  }
}

TEST(Registry, SnapshotSurvivesRestart) {
  testing::TempDir dir;
  auto snap = dir / "registry.json";
  {
    Registry reg(snap);
    reg.register_name("a", "127.0.0.1:1", {{"k", 1}});
    reg.register_name("b", "127.0.0.1:2");
    reg.unregister("b");
  }
  Registry reloaded(snap);
  ASSERT_EQ(reloaded.size(), 1u);
  EXPECT_EQ(reloaded.lookup("a").metadata["k"], 1);
}

TEST(Registry, RequestHandlerReportsCodes) {
  Registry reg;
  auto req = [](std::string method, wire::Value params) {
    return wire::Message::request("registry", std::move(method), std::move(params), "t");
  };
  auto resp = handle_request(reg, req("register", {{"name", "n"}, {"endpoint", "127.0.0.1:7"}}));
  EXPECT_EQ(resp.status, wire::Status::kOk);
  resp = handle_request(reg, req("lookup", {{"name", "missing"}}));
  EXPECT_EQ(resp.error->code, ErrorCode::kNotFound);
  resp = handle_request(reg, req("register", {{"name", 5}}));
  EXPECT_EQ(resp.error->code, ErrorCode::kInvalidParams);
  resp = handle_request(reg, req("frobnicate", wire::Value::object()));
  EXPECT_EQ(resp.error->code, ErrorCode::kNotFound);
  resp = handle_request(reg, req("list", {{"prefix", ""}}));
  ASSERT_EQ(resp.result->size(), 1u);
}

TEST(RegistryServer, ClientRoundTripOverTcp) {
  auto reg = std::make_shared<Registry>();
  RegistryServer server(reg, {.channel = policy::Channel::kRegistry});
  server.start();
  RegistryClient client({"127.0.0.1", server.port()}, "tester");
  client.register_name("u200.microscope", "127.0.0.1:9101");
  EXPECT_EQ(client.lookup("u200.microscope").endpoint, "127.0.0.1:9101");
  EXPECT_EQ(client.list().size(), 1u);
  client.unregister("u200.microscope");
  expect_code(ErrorCode::kNotFound, [&] { client.lookup("u200.microscope"); });
  server.stop();
}

TEST(RegistryServer, PolicyDeniesUnknownPrincipal) {
  auto reg = std::make_shared<Registry>();
  auto engine = policy::Engine::from_rules(policy::parse_rules("allow ops * registry\n"));
  RegistryServer server(reg, {.channel = policy::Channel::kRegistry, .policy = engine});
  server.start();
  RegistryClient ops({"127.0.0.1", server.port()}, "ops");
  ops.register_name("x", "127.0.0.1:1");
  RegistryClient intruder({"127.0.0.1", server.port()}, "intruder");
  expect_code(ErrorCode::kPolicyDenied, [&] { intruder.list(); });
  server.stop();
}

}  // namespace
}  // namespace ice::registry
