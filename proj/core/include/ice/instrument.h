#ifndef ICE_INSTRUMENT_H_
#define ICE_INSTRUMENT_H_

// Instrument adapter contract and the simulated STEM microscope.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ice/wire.h"

namespace ice::instrument {

// A command takes the request params map and returns a result value. Errors
// are reported by throwing ice::Error; anything else thrown becomes Internal.
using Method = std::function<wire::Value(const wire::Value& params)>;
using MethodTable = std::map<std::string, Method, std::less<>>;

// An instrument is anything that exposes a named-method dispatch table.
class Adapter {
 public:
  virtual ~Adapter() = default;
  virtual const MethodTable& methods() const = 0;
};

// Adapter over an explicit table, for wrapping ad-hoc commands.
class TableAdapter : public Adapter {
 public:
  TableAdapter() = default;
  explicit TableAdapter(MethodTable table) : table_(std::move(table)) {}
  TableAdapter& add(std::string name, Method method) {
    table_[std::move(name)] = std::move(method);
    return *this;
  }
  const MethodTable& methods() const override { return table_; }

 private:
  MethodTable table_;
};

struct ProbePosition {
  double x = 0.5;
  double y = 0.5;

  wire::Value to_json() const { return {{"x", x}, {"y", y}}; }
  // Throws Error(kInvalidParams) on missing/non-numeric fields and
  // Error(kOutOfRange) when a coordinate leaves [0, 1].
  static ProbePosition from_json(const wire::Value& json);

  friend bool operator==(const ProbePosition&, const ProbePosition&) = default;
};

enum class ScanState { kIdle, kScanning };

struct ScanStatus {
  ScanState state = ScanState::kIdle;
  std::optional<std::string> scan_id;
  double progress = 0.0;
  std::uint64_t frames_completed = 0;

  wire::Value to_json() const;
  static ScanStatus from_json(const wire::Value& json);
};

struct ScanParameters {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t dwell_time_us = 1;
  std::uint64_t seed = 0;

  // Throws Error(kInvalidParams) if any bound is violated.
  void validate() const;
  std::chrono::microseconds scan_time() const {
    return std::chrono::microseconds(std::int64_t{width} * height * dwell_time_us);
  }
  wire::Value to_json() const;
  static ScanParameters from_json(const wire::Value& json);
};

struct InstrumentMetadata {
  std::string instrument_name = "U200-sim";
  std::string facility = "CNMS-sim";
  std::string controller = "swift-sim";
  wire::Value fields = wire::Value::object();

  wire::Value to_json() const;
};

struct Frame {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint16_t> pixels;  // row-major

  // Pixels as big-endian 16-bit words.
  std::vector<std::uint8_t> pixel_bytes() const;
  friend bool operator==(const Frame&, const Frame&) = default;
};

// Next output of a SplitMix64 generator.
std::uint64_t splitmix64(std::uint64_t& state);

// Synthetic STEM image: a square lattice of Gaussian peaks (lattice constant
// width/8 pixels, sigma lattice/6, amplitude 40000, background 1000) shifted
// by the probe position, plus uniform [0, 256) noise drawn from SplitMix64
// seeded with params.seed, one draw per pixel in row-major order. A 1x1
// frame carries no noise.
Frame generate_frame(const ScanParameters& params, const ProbePosition& position);

// Measurement file: "ICEM", version byte 1, u32 BE width, u32 BE height,
// then width*height u16 BE pixels.
inline constexpr std::uint8_t kIcemVersion = 1;
std::vector<std::uint8_t> encode_icem(const Frame& frame);
// Throws std::invalid_argument if the bytes are not a valid ICEM file.
Frame decode_icem(std::span<const std::uint8_t> bytes);
Frame read_icem(const std::filesystem::path& path);

// Binary PGM ("P5 W H 255\n"), min-max normalized to 8 bits. A uniform frame
// maps to mid-gray 128.
std::vector<std::uint8_t> to_pgm(const Frame& frame);

struct SimulatorOptions {
  std::filesystem::path store_dir;
  // Multiplies the nominal scan time; 0 completes scans immediately.
  double time_scale = 1.0;
  InstrumentMetadata metadata;
};

// Deterministic stand-in for the microscope. Completed scans write
// <scan_id>.icem and <scan_id>.meta.json into the store directory.
class Simulator : public Adapter {
 public:
  explicit Simulator(SimulatorOptions options);
  ~Simulator() override;
  Simulator(const Simulator&) = delete;
  Simulator& operator=(const Simulator&) = delete;

  ScanStatus scan_status() const;
  ProbePosition probe_position() const;
  // Throws kOutOfRange or kInstrumentBusy; position is unchanged on error.
  void set_probe_position(const ProbePosition& position);
  // Throws kInstrumentBusy or kInvalidParams. Returns the scan id.
  std::string start_scan(const ScanParameters& params);
  // No-op unless `scan_id` names the active scan.
  bool abort_scan(const std::string& scan_id);
  wire::Value metadata() const;

  const MethodTable& methods() const override { return methods_; }
  // Methods that change instrument state.
  static const std::set<std::string>& mutating_methods();

  // Blocks until Idle or the timeout passes. Returns true when Idle.
  bool wait_idle(std::chrono::milliseconds timeout) const;

 private:
  struct Job {
    std::string id;
    ScanParameters params;
    ProbePosition position;
    std::chrono::steady_clock::time_point started;
    std::chrono::steady_clock::duration duration;
    bool aborted = false;
  };

  void run_job(std::shared_ptr<Job> job);
  void build_methods();
  double progress_locked() const;

  SimulatorOptions options_;
  MethodTable methods_;

  mutable std::mutex mutex_;
  mutable std::condition_variable cv_;
  ProbePosition position_;
  std::shared_ptr<Job> active_;
  std::uint64_t frames_completed_ = 0;
  std::uint64_t scans_started_ = 0;
  wire::Value last_scan_;
  bool shutting_down_ = false;
  std::thread worker_;
};

}  // namespace ice::instrument

#endif  // ICE_INSTRUMENT_H_
