#include <benchmark/benchmark.h>

#include <cstdlib>
#include <fstream>
#include <random>

#include "ice/datachannel.h"
#include "ice/instrument.h"
#include "ice/policy.h"
#include "ice/wire.h"

namespace {

namespace fs = std::filesystem;

ice::wire::Message sample_request(int width) {
  ice::wire::Value params = {{"width", width}, {"height", width}, {"seed", 7},
                             {"label", "benchmark scan"}, {"tags", {"a", "b", "c"}}};
  return ice::wire::Message::request("u200.microscope", "start_scan", params, "ops");
}

void BM_EncodeFrame(benchmark::State& state) {
  auto msg = sample_request(64);
  for (auto _ : state) benchmark::DoNotOptimize(ice::wire::encode_frame(msg));
}
BENCHMARK(BM_EncodeFrame);

void BM_DecodeFrame(benchmark::State& state) {
  auto bytes = ice::wire::encode_frame(sample_request(64));
  for (auto _ : state) {
    ice::wire::BufferSource src(bytes);
    benchmark::DoNotOptimize(ice::wire::decode_frame(src));
  }
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(bytes.size()));
}
BENCHMARK(BM_DecodeFrame);

// First-match evaluation where the deciding rule sits at the end of the list.
void BM_PolicyEvaluate(benchmark::State& state) {
  std::string text;
  for (int i = 0; i < state.range(0); ++i) text += "deny user" + std::to_string(i) + " 10.0.0.0/8 control\n";
  text += "allow ops 192.168.0.0/16 control\n";
  auto rules = ice::policy::parse_rules(text);
  ice::policy::AccessContext ctx{"ops", *ice::policy::Ipv4::parse("192.168.4.2"),
                                 ice::policy::Channel::kControl};
  for (auto _ : state) benchmark::DoNotOptimize(ice::policy::evaluate(rules, ctx));
}
BENCHMARK(BM_PolicyEvaluate)->Arg(1)->Arg(16)->Arg(256);

void BM_GenerateFrame(benchmark::State& state) {
  ice::instrument::ScanParameters p;
  p.width = p.height = static_cast<std::uint32_t>(state.range(0));
  p.seed = 42;
  for (auto _ : state) benchmark::DoNotOptimize(ice::instrument::generate_frame(p, {0.3, 0.7}));
  state.SetItemsProcessed(state.iterations() * state.range(0) * state.range(0));
}
BENCHMARK(BM_GenerateFrame)->Arg(64)->Arg(256)->Arg(1024);

// Manifest rebuild over a directory of 1 MiB files, cold and with the
// catalog's digest cache warm.
class ManifestFixture : public benchmark::Fixture {
 public:
  void SetUp(const benchmark::State& state) override {
    char tmpl[] = "/tmp/ice-bench-XXXXXX";
    dir_ = mkdtemp(tmpl);
    std::mt19937_64 rng(1);
    std::vector<char> bytes(ice::data::kChunkSize);
    for (int i = 0; i < state.range(0); ++i) {
      for (auto& b : bytes) b = static_cast<char>(rng());
      std::ofstream(dir_ / ("f" + std::to_string(i))).write(bytes.data(), bytes.size());
    }
  }
  void TearDown(const benchmark::State&) override { fs::remove_all(dir_); }

 protected:
  fs::path dir_;
};

BENCHMARK_DEFINE_F(ManifestFixture, Cold)(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(ice::data::build_manifest(dir_));
  state.SetBytesProcessed(state.iterations() * state.range(0) * ice::data::kChunkSize);
}
BENCHMARK_REGISTER_F(ManifestFixture, Cold)->Arg(16);

BENCHMARK_DEFINE_F(ManifestFixture, CachedRefresh)(benchmark::State& state) {
  ice::data::ManifestCatalog catalog(dir_);
  catalog.refresh();
  for (auto _ : state) benchmark::DoNotOptimize(catalog.refresh());
}
BENCHMARK_REGISTER_F(ManifestFixture, CachedRefresh)->Arg(16);

}  // namespace

BENCHMARK_MAIN();
