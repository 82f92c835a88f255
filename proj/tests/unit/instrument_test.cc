#include "ice/instrument.h"

#include <gtest/gtest.h>

#include "ice/digest.h"
#include "pinned.h"
#include "test_support.h"

namespace ice::instrument {
namespace {

using namespace std::chrono_literals;
namespace fs = std::filesystem;

ScanParameters params(std::uint32_t w, std::uint32_t h, std::uint64_t seed = 0,
                      std::uint32_t dwell = 1) {
  ScanParameters p;
  p.width = w;
  p.height = h;
  p.seed = seed;
  p.dwell_time_us = dwell;
  return p;
}

std::string pixels_sha(const Frame& f) { return sha256_hex(f.pixel_bytes()); }
std::string pgm_sha(const Frame& f) { return sha256_hex(to_pgm(f)); }

std::size_t count_files(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.is_regular_file() ? 1 : 0;
  return n;
}

void expect_code(ErrorCode code, const std::function<void()>& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

TEST(SplitMix64, KnownSequenceFromZero) {
  std::uint64_t state = 0;
  EXPECT_EQ(splitmix64(state), 0xE220A8397B1DCDAFull);
  EXPECT_EQ(splitmix64(state), 0x6E789E6AA1B965F4ull);
  EXPECT_EQ(splitmix64(state), 0x06C45D188009454Full);
}

TEST(GenerateFrame, Seed42RegressionDigest) {
  auto f = generate_frame(params(8, 8, 42), {0.5, 0.5});
  ASSERT_EQ(f.pixels.size(), 64u);
  EXPECT_EQ(pixels_sha(f), testing::pinned::kSeed42PixelsSha256);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(f.pixels[i], testing::pinned::kSeed42FirstRow[i]);
}

TEST(GenerateFrame, SinglePixelHasNoNoise) {
  for (std::uint64_t seed : {0ull, 7ull, 123456ull}) {
    auto f = generate_frame(params(1, 1, seed), {0.5, 0.5});
    ASSERT_EQ(f.pixels.size(), 1u);
    EXPECT_EQ(f.pixels[0], testing::pinned::kSinglePixel);
  }
  EXPECT_EQ(pixels_sha(generate_frame(params(1, 1, 7), {0.5, 0.5})),
            testing::pinned::kSinglePixelSha256);
}

TEST(GenerateFrame, OtherPinnedShapes) {
  EXPECT_EQ(pixels_sha(generate_frame(params(64, 64, 7), {0.3, 0.7})),
            testing::pinned::kDemoPixelsSha256);
  EXPECT_EQ(pixels_sha(generate_frame(params(16, 12, 123456789), {0.1, 0.9})),
            testing::pinned::kOddPixelsSha256);
}

TEST(GenerateFrame, DeterministicAndSeedSensitive) {
  auto p = params(32, 24, 5);
  EXPECT_EQ(generate_frame(p, {0.2, 0.4}), generate_frame(p, {0.2, 0.4}));
  EXPECT_NE(generate_frame(p, {0.2, 0.4}), generate_frame(params(32, 24, 6), {0.2, 0.4}));
  EXPECT_NE(generate_frame(p, {0.2, 0.4}), generate_frame(p, {0.21, 0.4}));
}

TEST(ScanParameters, Validation) {
  EXPECT_NO_THROW(params(1, 1).validate());
  EXPECT_NO_THROW(params(4096, 4096, 0, 10000).validate());
  expect_code(ErrorCode::kInvalidParams, [] { params(0, 8).validate(); });
  expect_code(ErrorCode::kInvalidParams, [] { params(8, 4097).validate(); });
  expect_code(ErrorCode::kInvalidParams, [] { params(8, 8, 0, 0).validate(); });
  expect_code(ErrorCode::kInvalidParams, [] { params(8, 8, 0, 10001).validate(); });
  expect_code(ErrorCode::kInvalidParams,
              [] { ScanParameters::from_json({{"width", 8}, {"height", 8}, {"colour", 1}}); });
  expect_code(ErrorCode::kInvalidParams, [] { ScanParameters::from_json({{"width", 8}}); });
  expect_code(ErrorCode::kInvalidParams,
              [] { ScanParameters::from_json({{"width", 8}, {"height", 8}, {"seed", -1}}); });
  auto parsed = ScanParameters::from_json({{"width", 8}, {"height", 4}});
  EXPECT_EQ(parsed.dwell_time_us, 1u);
  EXPECT_EQ(parsed.seed, 0u);
}

TEST(Icem, EncodeDecodeRoundTrip) {
  auto f = generate_frame(params(16, 12, 3), {0.4, 0.6});
  auto bytes = encode_icem(f);
  ASSERT_EQ(bytes.size(), 13u + 2u * 16u * 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "ICEM");
  EXPECT_EQ(bytes[4], kIcemVersion);
  EXPECT_EQ(decode_icem(bytes), f);
}

TEST(Icem, RejectsDamagedFiles) {
  auto bytes = encode_icem(generate_frame(params(4, 4), {0.5, 0.5}));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_icem(bad_magic), std::invalid_argument);
  auto short_body = bytes;
  short_body.pop_back();
  EXPECT_THROW(decode_icem(short_body), std::invalid_argument);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_icem(bad_version), std::invalid_argument);
  EXPECT_THROW(decode_icem(std::vector<std::uint8_t>{'I', 'C'}), std::invalid_argument);
}

TEST(Pgm, HeaderAndSizeForEightByEight) {
  auto pgm = to_pgm(generate_frame(params(8, 8, 42), {0.5, 0.5}));
  std::string header = "P5 8 8 255\n";
  ASSERT_EQ(pgm.size(), header.size() + 64);
  EXPECT_EQ(std::string(pgm.begin(), pgm.begin() + static_cast<std::ptrdiff_t>(header.size())),
            header);
}

TEST(Pgm, PinnedPreviewBytes) {
  EXPECT_EQ(pgm_sha(generate_frame(params(8, 8, 42), {0.5, 0.5})),
            testing::pinned::kSeed42PgmSha256);
  EXPECT_EQ(pgm_sha(generate_frame(params(1, 1, 7), {0.5, 0.5})),
            testing::pinned::kSinglePixelPgmSha256);
  EXPECT_EQ(pgm_sha(generate_frame(params(64, 64, 7), {0.3, 0.7})),
            testing::pinned::kDemoPgmSha256);
  EXPECT_EQ(pgm_sha(generate_frame(params(16, 12, 123456789), {0.1, 0.9})),
            testing::pinned::kOddPgmSha256);
}

TEST(Pgm, UniformFrameIsMidGray) {
  Frame f{3, 2, std::vector<std::uint16_t>(6, 777)};
  auto pgm = to_pgm(f);
  std::string header = "P5 3 2 255\n";
  ASSERT_EQ(pgm.size(), header.size() + 6);
  for (std::size_t i = header.size(); i < pgm.size(); ++i) EXPECT_EQ(pgm[i], 128);
}

TEST(Pgm, FullRangeMapsToZeroAnd255) {
  Frame f{3, 1, {100, 150, 200}};
  auto pgm = to_pgm(f);
  auto body = std::vector<std::uint8_t>(pgm.end() - 3, pgm.end());
  EXPECT_EQ(body, (std::vector<std::uint8_t>{0, 128, 255}));
}

class SimulatorTest : public ::testing::Test {
 protected:
  testing::TempDir dir;
  fs::path store() const { return dir.path(); }
};

TEST_F(SimulatorTest, FreshState) {
  Simulator sim({store(), 0.0, {}});
  auto s = sim.scan_status();
  EXPECT_EQ(s.state, ScanState::kIdle);
  EXPECT_FALSE(s.scan_id);
  EXPECT_EQ(s.progress, 0.0);
  EXPECT_EQ(s.frames_completed, 0u);
  EXPECT_EQ(sim.probe_position(), (ProbePosition{0.5, 0.5}));
  auto j = s.to_json();
  EXPECT_EQ(j["state"], "Idle");
  EXPECT_TRUE(j["scan_id"].is_null());
}

TEST_F(SimulatorTest, ProbeReadYourWriteAndBounds) {
  Simulator sim({store(), 0.0, {}});
  sim.set_probe_position({0.25, 0.75});
  EXPECT_EQ(sim.probe_position(), (ProbePosition{0.25, 0.75}));
  expect_code(ErrorCode::kOutOfRange, [&] { sim.set_probe_position({1.2, 0.0}); });
  expect_code(ErrorCode::kOutOfRange, [&] { sim.set_probe_position({0.1, -0.01}); });
  EXPECT_EQ(sim.probe_position(), (ProbePosition{0.25, 0.75}));
  sim.set_probe_position({0.0, 1.0});
  EXPECT_EQ(sim.probe_position(), (ProbePosition{0.0, 1.0}));
}

TEST_F(SimulatorTest, ScanLifecycleWritesOneFileAndSidecar) {
  Simulator sim({store(), 0.0, {}});
  auto id = sim.start_scan(params(8, 8, 42));
  ASSERT_TRUE(sim.wait_idle(5s));
  auto s = sim.scan_status();
  EXPECT_EQ(s.state, ScanState::kIdle);
  EXPECT_EQ(s.frames_completed, 1u);
  EXPECT_EQ(count_files(store()), 2u);
  auto frame = read_icem(store() / (id + ".icem"));
  EXPECT_EQ(pixels_sha(frame), testing::pinned::kSeed42PixelsSha256);
  std::ifstream meta_in(store() / (id + ".meta.json"));
  auto meta = wire::Value::parse(meta_in);
  EXPECT_EQ(meta["scan_id"], id);
  EXPECT_EQ(meta["params"]["seed"], 42);
  EXPECT_EQ(meta["sha256"], sha256_file(store() / (id + ".icem")));
  EXPECT_EQ(sim.metadata()["experiment"]["last_scan"]["scan_id"], id);
}

TEST_F(SimulatorTest, ScanningStateAndBusyRules) {
  // 100x100 at 100 us dwell is one second of nominal scan time.
  Simulator sim({store(), 1.0, {}});
  auto id = sim.start_scan(params(100, 100, 0, 100));
  auto s = sim.scan_status();
  EXPECT_EQ(s.state, ScanState::kScanning);
  EXPECT_EQ(s.scan_id, id);
  EXPECT_LT(s.progress, 1.0);
  expect_code(ErrorCode::kInstrumentBusy, [&] { sim.start_scan(params(8, 8)); });
  expect_code(ErrorCode::kInstrumentBusy, [&] { sim.set_probe_position({0.1, 0.1}); });
  EXPECT_EQ(sim.probe_position(), (ProbePosition{0.5, 0.5}));
  EXPECT_FALSE(sim.abort_scan("scan-stale"));
  EXPECT_EQ(sim.scan_status().scan_id, id);
  EXPECT_TRUE(sim.abort_scan(id));
}

TEST_F(SimulatorTest, CompletesAfterNominalTimeElapses) {
  Simulator sim({store(), 1.0, {}});
  auto start = std::chrono::steady_clock::now();
  sim.start_scan(params(50, 40, 1, 100));  // 0.2 s
  ASSERT_TRUE(sim.wait_idle(5s));
  EXPECT_GE(std::chrono::steady_clock::now() - start, 200ms);
  EXPECT_EQ(sim.scan_status().frames_completed, 1u);
}

TEST_F(SimulatorTest, AbortLeavesNoFile) {
  Simulator sim({store(), 1.0, {}});
  auto id = sim.start_scan(params(100, 100, 0, 100));
  EXPECT_TRUE(sim.abort_scan(id));
  EXPECT_EQ(sim.scan_status().state, ScanState::kIdle);
  std::this_thread::sleep_for(50ms);
  EXPECT_EQ(count_files(store()), 0u);
  EXPECT_EQ(sim.scan_status().frames_completed, 0u);
  EXPECT_FALSE(sim.abort_scan(id));
  EXPECT_FALSE(sim.abort_scan("anything"));
}

TEST_F(SimulatorTest, ScanIdsAreUnique) {
  Simulator sim({store(), 0.0, {}});
  std::set<std::string> ids;
  for (int i = 0; i < 20; ++i) {
    ids.insert(sim.start_scan(params(2, 2, static_cast<std::uint64_t>(i))));
    ASSERT_TRUE(sim.wait_idle(5s));
  }
  EXPECT_EQ(ids.size(), 20u);
  EXPECT_EQ(count_files(store()), 40u);
}

TEST_F(SimulatorTest, TwoSimulatorsProduceIdenticalPixels) {
  testing::TempDir other;
  Simulator a({store(), 0.0, {}});
  Simulator b({other.path(), 0.0, {}});
  a.set_probe_position({0.3, 0.7});
  b.set_probe_position({0.3, 0.7});
  auto ia = a.start_scan(params(32, 32, 99));
  auto ib = b.start_scan(params(32, 32, 99));
  ASSERT_TRUE(a.wait_idle(5s));
  ASSERT_TRUE(b.wait_idle(5s));
  EXPECT_EQ(read_icem(store() / (ia + ".icem")).pixel_bytes(),
            read_icem(other.path() / (ib + ".icem")).pixel_bytes());
}

TEST_F(SimulatorTest, MethodTableSpeaksWireValues) {
  Simulator sim({store(), 0.0, {}});
  const auto& m = sim.methods();
  EXPECT_EQ(m.at("scan_status")(wire::Value::object())["state"], "Idle");
  EXPECT_EQ(m.at("set_probe_position")({{"x", 0.3}, {"y", 0.7}}), (wire::Value{{"x", 0.3}, {"y", 0.7}}));
  EXPECT_EQ(m.at("get_probe_position")(wire::Value::object())["x"], 0.3);
  auto started = m.at("start_scan")({{"width", 8}, {"height", 8}});
  EXPECT_TRUE(started["scan_id"].is_string());
  EXPECT_EQ(started["file_id"], started["scan_id"].get<std::string>() + ".icem");
  ASSERT_TRUE(sim.wait_idle(5s));
  EXPECT_EQ(m.at("abort_scan")({{"scan_id", "nope"}})["aborted"], false);
  expect_code(ErrorCode::kInvalidParams, [&] { m.at("set_probe_position")({{"x", 0.3}}); });
  expect_code(ErrorCode::kInvalidParams, [&] { m.at("scan_status")({{"verbose", true}}); });
  auto md = m.at("metadata")(wire::Value::object());
  EXPECT_EQ(md["instrument_name"], "U200-sim");
  for (const auto& name : Simulator::mutating_methods()) EXPECT_TRUE(m.contains(name));
}

}  // namespace
}  // namespace ice::instrument
