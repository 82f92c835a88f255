#include "ice/datachannel.h"

#include <gtest/gtest.h>

#include <thread>

#include "ice/digest.h"
#include "pinned.h"
#include "test_support.h"

namespace ice::data {
namespace {

using namespace std::chrono_literals;
namespace fs = std::filesystem;
using testing::TempDir;
using testing::random_bytes;
using testing::read_file;
using testing::write_file;

void expect_code(ErrorCode code, const std::function<void()>& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

// Store server plus a client-side mirror directory.
struct StoreFixture {
  explicit StoreFixture(std::shared_ptr<policy::Engine> engine = nullptr)
      : server(store.path(), FrameServerOptions{.policy = std::move(engine)}) {
    server.start();
  }
  ~StoreFixture() { server.stop(); }
  net::Endpoint endpoint() const { return {"127.0.0.1", server.port()}; }

  TempDir store;
  TempDir mirror;
  StoreServer server;
};

TEST(FileIds, SafeAndUnsafe) {
  for (const char* ok : {"a.icem", "run/a.icem", "2026/01/x.meta.json"}) {
    EXPECT_TRUE(is_safe_file_id(ok)) << ok;
  }
  for (const char* bad : {"", "../secret", "/etc/passwd", "a/../b", "a//b", "./a", ".hidden",
                          "dir/.part", "a\\b", "a/", "..", "."}) {
    EXPECT_FALSE(is_safe_file_id(bad)) << bad;
  }
}

TEST(Manifest, EmptyDirectory) {
  TempDir dir;
  auto m = build_manifest(dir.path());
  EXPECT_TRUE(m.records.empty());
  EXPECT_EQ(m.generation, 1u);
}

TEST(Manifest, FourByteFileMatchesIndependentDigest) {
  TempDir dir;
  write_file(dir / "abcd", "abcd");
  auto m = build_manifest(dir.path());
  ASSERT_EQ(m.records.size(), 1u);
  EXPECT_EQ(m.records[0].file_id, "abcd");
  EXPECT_EQ(m.records[0].size_bytes, 4u);
  EXPECT_EQ(m.records[0].sha256, testing::pinned::kAbcdSha256);
  EXPECT_EQ(m.records[0].chunk_count(), 1u);
}

TEST(Manifest, DeterministicSortedAndHidesPartials) {
  TempDir dir;
  write_file(dir / "b.icem", "bb");
  write_file(dir / "a.icem", "a");
  write_file(dir / "a.meta.json", "{}");
  write_file(dir / "sub" / "c.icem", "ccc");
  write_file(dir / ".d.icem.part", "partial");
  write_file(dir / ".hidden" / "e.icem", "e");
  fs::create_symlink(dir / "a.icem", dir / "link.icem");
  auto first = build_manifest(dir.path());
  auto second = build_manifest(dir.path());
  EXPECT_EQ(first.records, second.records);
  std::vector<std::string> ids;
  for (const auto& r : first.records) ids.push_back(r.file_id);
  EXPECT_EQ(ids, (std::vector<std::string>{"a.icem", "a.meta.json", "b.icem", "sub/c.icem"}));
  EXPECT_EQ(first.find("a.icem")->sidecar, "a.meta.json");
  EXPECT_FALSE(first.find("b.icem")->sidecar);
}

TEST(Manifest, UnreadableDirectoryIsInternal) {
  expect_code(ErrorCode::kInternal, [] { build_manifest("/nonexistent/ice/store"); });
}

TEST(Manifest, CatalogGenerationTracksChanges) {
  TempDir dir;
  ManifestCatalog catalog(dir.path());
  EXPECT_EQ(catalog.refresh()->generation, 1u);
  EXPECT_EQ(catalog.refresh()->generation, 1u);
  write_file(dir / "x", "1");
  EXPECT_EQ(catalog.refresh()->generation, 2u);
  EXPECT_EQ(catalog.current()->generation, 2u);
  write_file(dir / "x", "22");
  auto m = catalog.refresh();
  EXPECT_EQ(m->generation, 3u);
  EXPECT_EQ(m->records[0].sha256, sha256_hex(std::string_view("22")));
}

TEST(Chunks, BoundariesAndReassembly) {
  TempDir dir;
  for (std::size_t size : {kChunkSize - 1, kChunkSize, kChunkSize + 1}) {
    auto bytes = random_bytes(size, size);
    auto name = "f" + std::to_string(size);
    write_file(dir / name, bytes);
    auto manifest = build_manifest(dir.path());
    const auto* rec = manifest.find(name);
    ASSERT_TRUE(rec);
    std::vector<std::uint8_t> joined;
    for (std::uint64_t i = 0; i < rec->chunk_count(); ++i) {
      auto chunk = read_chunk(dir.path(), manifest, name, static_cast<std::int64_t>(i));
      EXPECT_EQ(chunk.offset, i * kChunkSize);
      joined.insert(joined.end(), chunk.bytes.begin(), chunk.bytes.end());
    }
    EXPECT_EQ(joined, bytes) << size;
    EXPECT_EQ(rec->chunk_count(), size > kChunkSize ? 2u : 1u);
  }
}

TEST(Chunks, ExamplesAndErrors) {
  TempDir dir;
  write_file(dir / "one", "x");
  write_file(dir / "big", random_bytes(kChunkSize + 1, 1));
  auto manifest = build_manifest(dir.path());
  EXPECT_EQ(read_chunk(dir.path(), manifest, "one", 0).bytes.size(), 1u);
  EXPECT_EQ(read_chunk(dir.path(), manifest, "big", 0).bytes.size(), kChunkSize);
  EXPECT_EQ(read_chunk(dir.path(), manifest, "big", 1).bytes.size(), 1u);
  expect_code(ErrorCode::kOutOfRange, [&] { read_chunk(dir.path(), manifest, "big", 2); });
  expect_code(ErrorCode::kOutOfRange, [&] { read_chunk(dir.path(), manifest, "one", -1); });
  expect_code(ErrorCode::kNotFound, [&] { read_chunk(dir.path(), manifest, "ghost", 0); });
  expect_code(ErrorCode::kInvalidParams, [&] { read_chunk(dir.path(), manifest, "../secret", 0); });
}

TEST(StoreServer, TraversalOverTheWireIsInvalidParams) {
  StoreFixture fx;
  write_file(fx.store / "a", "a");
  StoreClient client(fx.endpoint(), "ops");
  client.manifest();
  expect_code(ErrorCode::kInvalidParams, [&] { client.get_chunk("../secret", 0); });
  expect_code(ErrorCode::kNotFound, [&] { client.get_chunk("zzz", 0); });
  auto chunk = client.get_chunk("a", 0);
  EXPECT_EQ(chunk.bytes, (std::vector<std::uint8_t>{'a'}));
}

TEST(Sync, TransfersNewFilesThenNothing) {
  StoreFixture fx;
  for (int i = 0; i < 3; ++i) write_file(fx.store / ("m" + std::to_string(i)), random_bytes(1000 + i, i));
  auto r1 = sync_once(fx.endpoint(), fx.mirror.path());
  EXPECT_EQ(r1.files_examined, 3u);
  EXPECT_EQ(r1.files_transferred, 3u);
  EXPECT_EQ(r1.bytes_transferred, 3003u);
  EXPECT_TRUE(r1.converged());
  auto r2 = sync_once(fx.endpoint(), fx.mirror.path());
  EXPECT_EQ(r2.files_transferred, 0u);
  EXPECT_EQ(r2.bytes_transferred, 0u);
  EXPECT_EQ(r2.files_verified, 3u);
}

TEST(Sync, MirrorIsByteIdenticalByRehash) {
  StoreFixture fx;
  write_file(fx.store / "big.icem", random_bytes(3 * kChunkSize + 17, 5));
  write_file(fx.store / "nested" / "small.icem", random_bytes(10, 6));
  write_file(fx.store / "empty.icem", "");
  auto r = sync_once(fx.endpoint(), fx.mirror.path());
  ASSERT_TRUE(r.converged());
  for (const char* id : {"big.icem", "nested/small.icem", "empty.icem"}) {
    EXPECT_EQ(sha256_hex(read_file(fx.mirror / id)), sha256_hex(read_file(fx.store / id))) << id;
  }
  for (const auto& e : fs::recursive_directory_iterator(fx.mirror.path())) {
    EXPECT_FALSE(e.path().filename().string().ends_with(".part")) << e.path();
  }
}

TEST(Sync, CorruptedLocalFileIsTheOnlyOneRetransferred) {
  StoreFixture fx;
  for (int i = 0; i < 4; ++i) write_file(fx.store / ("f" + std::to_string(i)), random_bytes(500, i));
  sync_once(fx.endpoint(), fx.mirror.path());
  auto damaged = read_file(fx.mirror / "f2");
  damaged[10] ^= 0xFF;
  write_file(fx.mirror / "f2", damaged);
  auto r = sync_once(fx.endpoint(), fx.mirror.path());
  EXPECT_EQ(r.files_transferred, 1u);
  EXPECT_EQ(r.bytes_transferred, 500u);
  EXPECT_EQ(read_file(fx.mirror / "f2"), read_file(fx.store / "f2"));
}

TEST(Sync, PersistentDigestMismatchIsRecordedAndOthersSucceed) {
  // A store that serves flipped bytes for one file.
  TempDir store, mirror;
  write_file(store / "good", "good data");
  write_file(store / "bad", "bad data");
  ManifestCatalog catalog(store.path());
  int bad_fetches = 0;
  FrameServer server({}, [&](const wire::Message& req, const PeerInfo&) {
    if (req.method == "manifest") return wire::Message::ok(req, catalog.refresh()->to_json());
    auto chunk = read_chunk(store.path(), *catalog.current(), req.params["file_id"].get<std::string>(),
                            req.params["index"].get<std::int64_t>());
    if (chunk.file_id == "bad") {
      ++bad_fetches;
      chunk.bytes[0] ^= 1;
    }
    return wire::Message::ok(req, {{"file_id", chunk.file_id},
                                   {"index", 0},
                                   {"offset", 0},
                                   {"length", static_cast<std::int64_t>(chunk.bytes.size())},
                                   {"total_chunks", 1},
                                   {"data", base64_encode(chunk.bytes)}});
  });
  server.start();
  auto r = sync_once({"127.0.0.1", server.port()}, mirror.path());
  server.stop();
  ASSERT_EQ(r.mismatches.size(), 1u);
  EXPECT_EQ(r.mismatches[0].file_id, "bad");
  EXPECT_EQ(bad_fetches, 3);  // first attempt plus two retries
  EXPECT_EQ(r.files_transferred, 1u);
  EXPECT_FALSE(r.converged());
  EXPECT_TRUE(fs::exists(mirror / "good"));
  EXPECT_FALSE(fs::exists(mirror / "bad"));
  EXPECT_FALSE(fs::exists(mirror / ".bad.part"));
}

TEST(Sync, PolicyRefusalClosesTheDataConnection) {
  auto engine = policy::Engine::from_rules(policy::parse_rules("allow ops * data\n"));
  StoreFixture fx(engine);
  write_file(fx.store / "a", "a");
  SyncOptions intruder;
  intruder.principal = "intruder";
  expect_code(ErrorCode::kPolicyDenied, [&] { sync_once(fx.endpoint(), fx.mirror.path(), intruder); });
  SyncOptions ops;
  ops.principal = "ops";
  EXPECT_EQ(sync_once(fx.endpoint(), fx.mirror.path(), ops).files_transferred, 1u);
}

TEST(Sync, SourceAddressRefusedAtAccept) {
  auto engine = policy::Engine::from_rules(policy::parse_rules("allow * 10.0.0.0/8 data\n"));
  StoreFixture fx(engine);
  try {
    sync_once(fx.endpoint(), fx.mirror.path());
    FAIL() << "expected the connection to be refused";
  } catch (const TransportError& e) {
    EXPECT_NE(e.kind(), TransportError::Kind::kTimeout);
  }
}

TEST(Sync, StatusFileRoundTrip) {
  TempDir mirror;
  EXPECT_FALSE(read_sync_report(mirror.path()));
  SyncReport r;
  r.generation = 4;
  r.files_examined = 2;
  r.files_transferred = 1;
  r.mismatches.push_back({"x", "why"});
  record_sync_report(mirror.path(), r);
  auto back = read_sync_report(mirror.path());
  ASSERT_TRUE(back);
  EXPECT_EQ(back->to_json().dump(), r.to_json().dump());
  EXPECT_EQ(build_manifest(mirror.path()).records.size(), 0u);
}

TEST(Watch, QuietStoreGivesZeroTransferReports) {
  StoreFixture fx;
  write_file(fx.store / "a", "a");
  std::mutex m;
  std::vector<SyncReport> reports;
  {
    std::jthread watcher([&](std::stop_token stop) {
      watch_and_sync(fx.endpoint(), fx.mirror.path(), 30ms, stop, {},
                     [&](const SyncReport& r) {
                       std::lock_guard lock(m);
                       reports.push_back(r);
                     });
    });
    ASSERT_TRUE(testing::wait_until(
        [&] {
          std::lock_guard lock(m);
          return reports.size() >= 5;
        },
        5s));
  }
  EXPECT_EQ(reports[0].files_transferred, 1u);
  for (std::size_t i = 1; i < reports.size(); ++i) EXPECT_EQ(reports[i].files_transferred, 0u);
}

TEST(Watch, NewFileAppearsWithinTwoIntervalsAndSurvivesStoreRestart) {
  TempDir store, mirror;
  auto server = std::make_unique<StoreServer>(store.path(), FrameServerOptions{});
  server->start();
  auto port = server->port();
  std::atomic<int> errors{0};
  constexpr auto kInterval = 100ms;
  std::jthread watcher([&](std::stop_token stop) {
    watch_and_sync({"127.0.0.1", port}, mirror.path(), kInterval, stop, {}, {},
                   [&](const std::exception&) { ++errors; });
  });

  std::this_thread::sleep_for(kInterval);
  write_file(store / ".fresh.icem.part", random_bytes(4096, 1));
  fs::rename(store / ".fresh.icem.part", store / "fresh.icem");
  auto t0 = std::chrono::steady_clock::now();
  ASSERT_TRUE(testing::wait_until([&] { return fs::exists(mirror / "fresh.icem"); }, 2 * kInterval + 100ms));
  EXPECT_LE(std::chrono::steady_clock::now() - t0, 2 * kInterval + 100ms);

  server->stop();
  server.reset();
  ASSERT_TRUE(testing::wait_until([&] { return errors.load() > 0; }, 2s));
  write_file(store / "after.icem", "after restart");
  server = std::make_unique<StoreServer>(store.path(), FrameServerOptions{.port = port});
  server->start();
  EXPECT_TRUE(testing::wait_until([&] { return fs::exists(mirror / "after.icem"); }, 3s));
  watcher.request_stop();
  watcher.join();
  server->stop();
  EXPECT_EQ(read_file(mirror / "after.icem"), read_file(store / "after.icem"));
}

}  // namespace
}  // namespace ice::data
