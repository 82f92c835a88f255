#include "ice/instrument.h"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ice/digest.h"
#include "ice/error.h"
#include "ice/timeutil.h"

namespace ice::instrument {
namespace {

constexpr double kAmplitude = 40000.0;
constexpr double kBackground = 1000.0;
constexpr std::uint32_t kMaxDimension = 4096;
constexpr std::uint32_t kMaxDwellUs = 10000;
// Progress stays below 1 until the frame is committed.
constexpr double kMaxRunningProgress = 0.999;

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32_be(std::span<const std::uint8_t> b) {
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
         (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

double require_number(const wire::Value& params, const char* key) {
  auto it = params.find(key);
  if (it == params.end() || !it->is_number()) {
    throw Error(ErrorCode::kInvalidParams,
                std::string("parameter '") + key + "' must be a number");
  }
  return it->get<double>();
}

std::int64_t require_integer(const wire::Value& params, const char* key) {
  auto it = params.find(key);
  if (it == params.end() || !it->is_number_integer()) {
    throw Error(ErrorCode::kInvalidParams,
                std::string("parameter '") + key + "' must be an integer");
  }
  return it->get<std::int64_t>();
}

void reject_unknown(const wire::Value& params,
                    std::initializer_list<std::string_view> known) {
  if (!params.is_object()) {
    throw Error(ErrorCode::kInvalidParams, "params must be a map");
  }
  for (const auto& [key, _] : params.items()) {
    bool ok = false;
    for (auto k : known) ok = ok || k == key;
    if (!ok) throw Error(ErrorCode::kInvalidParams, "unknown parameter '" + key + "'");
  }
}

void write_file(const std::filesystem::path& path,
                std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string make_scan_id(std::uint64_t counter) {
  auto now = std::chrono::system_clock::now();
  auto stamp = iso8601(now);  // 2026-10-18T12:00:00.123Z
  std::string compact;
  for (char c : stamp) {
    if (std::isdigit(static_cast<unsigned char>(c)) || c == 'T') compact.push_back(c);
  }
  return fmt::format("scan-{}-{:04}", compact, counter);
}

}  // namespace

ProbePosition ProbePosition::from_json(const wire::Value& json) {
  reject_unknown(json, {"x", "y"});
  ProbePosition p{require_number(json, "x"), require_number(json, "y")};
  if (!(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0)) {
    throw Error(ErrorCode::kOutOfRange,
                fmt::format("probe position ({}, {}) outside [0,1]^2", p.x, p.y));
  }
  return p;
}

wire::Value ScanStatus::to_json() const {
  return {{"state", state == ScanState::kIdle ? "Idle" : "Scanning"},
          {"scan_id", scan_id ? wire::Value(*scan_id) : wire::Value()},
          {"progress", progress},
          {"frames_completed", static_cast<std::int64_t>(frames_completed)}};
}

ScanStatus ScanStatus::from_json(const wire::Value& json) {
  ScanStatus s;
  s.state = json.at("state") == "Scanning" ? ScanState::kScanning : ScanState::kIdle;
  if (json.contains("scan_id") && json["scan_id"].is_string()) {
    s.scan_id = json["scan_id"].get<std::string>();
  }
  s.progress = json.value("progress", 0.0);
  s.frames_completed = json.value("frames_completed", std::uint64_t{0});
  return s;
}

void ScanParameters::validate() const {
  if (width < 1 || width > kMaxDimension || height < 1 || height > kMaxDimension) {
    throw Error(ErrorCode::kInvalidParams,
                fmt::format("scan size {}x{} outside 1..4096", width, height));
  }
  if (dwell_time_us < 1 || dwell_time_us > kMaxDwellUs) {
    throw Error(ErrorCode::kInvalidParams,
                fmt::format("dwell time {} us outside 1..10000", dwell_time_us));
  }
}

wire::Value ScanParameters::to_json() const {
  return {{"width", width},
          {"height", height},
          {"dwell_time_us", dwell_time_us},
          {"seed", static_cast<std::int64_t>(seed)}};
}

ScanParameters ScanParameters::from_json(const wire::Value& json) {
  reject_unknown(json, {"width", "height", "dwell_time_us", "seed"});
  auto bounded = [&](const char* key, std::int64_t fallback, bool required) {
    std::int64_t v = (!required && !json.contains(key)) ? fallback
                                                       : require_integer(json, key);
    if (v < 0 || v > std::numeric_limits<std::uint32_t>::max()) {
      throw Error(ErrorCode::kInvalidParams,
                  fmt::format("parameter '{}' = {} out of bounds", key, v));
    }
    return static_cast<std::uint32_t>(v);
  };
  ScanParameters p;
  p.width = bounded("width", 0, true);
  p.height = bounded("height", 0, true);
  p.dwell_time_us = bounded("dwell_time_us", 1, false);
  if (json.contains("seed")) {
    auto seed = require_integer(json, "seed");
    if (seed < 0) throw Error(ErrorCode::kInvalidParams, "seed must be >= 0");
    p.seed = static_cast<std::uint64_t>(seed);
  }
  p.validate();
  return p;
}

wire::Value InstrumentMetadata::to_json() const {
  return {{"instrument_name", instrument_name},
          {"facility", facility},
          {"controller", controller},
          {"fields", fields}};
}

std::vector<std::uint8_t> Frame::pixel_bytes() const {
  std::vector<std::uint8_t> out;
  out.reserve(pixels.size() * 2);
  for (auto p : pixels) {
    out.push_back(static_cast<std::uint8_t>(p >> 8));
    out.push_back(static_cast<std::uint8_t>(p));
  }
  return out;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Frame generate_frame(const ScanParameters& params, const ProbePosition& position) {
  params.validate();
  if (!(position.x >= 0.0 && position.x <= 1.0 && position.y >= 0.0 &&
        position.y <= 1.0)) {
    throw Error(ErrorCode::kInvalidParams, "probe position outside [0,1]^2");
  }
  const std::uint32_t w = params.width;
  const std::uint32_t h = params.height;
  const double lattice = static_cast<double>(w) / 8.0;
  const double sigma = lattice / 6.0;
  const double two_sigma_sq = 2.0 * sigma * sigma;
  const double shift_x = position.x * w;
  const double shift_y = position.y * h;
  const bool noisy = std::uint64_t{w} * h > 1;

  Frame frame{w, h, {}};
  frame.pixels.reserve(std::size_t{w} * h);
  std::uint64_t rng = params.seed;
  for (std::uint32_t row = 0; row < h; ++row) {
    double dy = static_cast<double>(row) - shift_y;
    dy -= lattice * std::floor(dy / lattice + 0.5);
    for (std::uint32_t col = 0; col < w; ++col) {
      double dx = static_cast<double>(col) - shift_x;
      dx -= lattice * std::floor(dx / lattice + 0.5);
      double value =
          kBackground + kAmplitude * std::exp(-(dx * dx + dy * dy) / two_sigma_sq);
      auto pixel = static_cast<std::uint32_t>(std::floor(value + 0.5));
      if (noisy) pixel += static_cast<std::uint32_t>(splitmix64(rng) & 0xFF);
      frame.pixels.push_back(static_cast<std::uint16_t>(std::min<std::uint32_t>(pixel, 65535)));
    }
  }
  return frame;
}

std::vector<std::uint8_t> encode_icem(const Frame& frame) {
  std::vector<std::uint8_t> out{'I', 'C', 'E', 'M', kIcemVersion};
  out.reserve(13 + frame.pixels.size() * 2);
  put_u32_be(out, frame.width);
  put_u32_be(out, frame.height);
  auto pixels = frame.pixel_bytes();
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

Frame decode_icem(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 13 || std::memcmp(bytes.data(), "ICEM", 4) != 0) {
    throw std::invalid_argument("not an ICEM file");
  }
  if (bytes[4] != kIcemVersion) {
    throw std::invalid_argument("unsupported ICEM version " + std::to_string(bytes[4]));
  }
  Frame frame;
  frame.width = get_u32_be(bytes.subspan(5, 4));
  frame.height = get_u32_be(bytes.subspan(9, 4));
  std::uint64_t count = std::uint64_t{frame.width} * frame.height;
  if (count == 0 || bytes.size() != 13 + 2 * count) {
    throw std::invalid_argument("ICEM size does not match its header");
  }
  frame.pixels.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    frame.pixels[i] = static_cast<std::uint16_t>((bytes[13 + 2 * i] << 8) |
                                                 bytes[14 + 2 * i]);
  }
  return frame;
}

Frame read_icem(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_icem(bytes);
}

std::vector<std::uint8_t> to_pgm(const Frame& frame) {
  auto header = fmt::format("P5 {} {} 255\n", frame.width, frame.height);
  std::vector<std::uint8_t> out(header.begin(), header.end());
  if (frame.pixels.empty()) return out;
  auto [lo_it, hi_it] = std::minmax_element(frame.pixels.begin(), frame.pixels.end());
  const std::uint64_t lo = *lo_it;
  const std::uint64_t span = *hi_it - lo;
  out.reserve(out.size() + frame.pixels.size());
  for (auto p : frame.pixels) {
    if (span == 0) {
      out.push_back(128);
    } else {
      out.push_back(static_cast<std::uint8_t>(((p - lo) * 255 + span / 2) / span));
    }
  }
  return out;
}

Simulator::Simulator(SimulatorOptions options) : options_(std::move(options)) {
  if (options_.time_scale < 0.0) {
    throw std::invalid_argument("time scale must be >= 0");
  }
  if (!options_.store_dir.empty()) {
    std::filesystem::create_directories(options_.store_dir);
  }
  build_methods();
}

Simulator::~Simulator() {
  {
    std::lock_guard lock(mutex_);
    shutting_down_ = true;
    if (active_) active_->aborted = true;
  }
  cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

double Simulator::progress_locked() const {
  if (!active_) return 0.0;
  if (active_->duration.count() <= 0) return 0.0;
  auto elapsed = std::chrono::steady_clock::now() - active_->started;
  double fraction = std::chrono::duration<double>(elapsed).count() /
                    std::chrono::duration<double>(active_->duration).count();
  return std::clamp(fraction, 0.0, kMaxRunningProgress);
}

ScanStatus Simulator::scan_status() const {
  std::lock_guard lock(mutex_);
  ScanStatus s;
  s.frames_completed = frames_completed_;
  if (active_) {
    s.state = ScanState::kScanning;
    s.scan_id = active_->id;
    s.progress = progress_locked();
  }
  return s;
}

ProbePosition Simulator::probe_position() const {
  std::lock_guard lock(mutex_);
  return position_;
}

void Simulator::set_probe_position(const ProbePosition& position) {
  if (!(position.x >= 0.0 && position.x <= 1.0 && position.y >= 0.0 &&
        position.y <= 1.0)) {
    throw Error(ErrorCode::kOutOfRange,
                fmt::format("probe position ({}, {}) outside [0,1]^2",
                            position.x, position.y));
  }
  std::lock_guard lock(mutex_);
  if (active_) {
    throw Error(ErrorCode::kInstrumentBusy,
                "cannot move the probe while scan " + active_->id + " is running");
  }
  position_ = position;
}

std::string Simulator::start_scan(const ScanParameters& params) {
  params.validate();
  std::thread previous;
  std::string id;
  {
    std::lock_guard lock(mutex_);
    if (active_) {
      throw Error(ErrorCode::kInstrumentBusy, "scan " + active_->id + " is running");
    }
    if (shutting_down_) throw Error(ErrorCode::kInternal, "instrument shutting down");
    auto job = std::make_shared<Job>();
    job->id = id = make_scan_id(++scans_started_);
    job->params = params;
    job->position = position_;
    job->started = std::chrono::steady_clock::now();
    job->duration = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
        std::chrono::duration<double, std::micro>(
            static_cast<double>(params.scan_time().count()) * options_.time_scale));
    active_ = job;
    previous = std::move(worker_);
    worker_ = std::thread([this, job] { run_job(job); });
  }
  if (previous.joinable()) previous.join();
  return id;
}

bool Simulator::abort_scan(const std::string& scan_id) {
  {
    std::lock_guard lock(mutex_);
    if (!active_ || active_->id != scan_id) return false;
    active_->aborted = true;
    active_.reset();
  }
  cv_.notify_all();
  return true;
}

void Simulator::run_job(std::shared_ptr<Job> job) {
  {
    std::unique_lock lock(mutex_);
    cv_.wait_until(lock, job->started + job->duration,
                   [&] { return job->aborted || shutting_down_; });
    if (job->aborted || shutting_down_) return;
  }

  auto frame = generate_frame(job->params, job->position);
  auto icem = encode_icem(frame);
  auto digest = sha256_hex(icem);
  const auto& dir = options_.store_dir;
  auto data_name = job->id + ".icem";
  auto meta_name = job->id + ".meta.json";
  wire::Value sidecar = {
      {"scan_id", job->id},
      {"params", job->params.to_json()},
      {"probe_position", job->position.to_json()},
      {"instrument", options_.metadata.to_json()},
      {"timestamp", iso8601_now()},
      {"file", data_name},
      {"sha256", digest},
  };
  // Partial files are hidden (dot-prefixed) until the final rename.
  auto data_tmp = dir / ("." + data_name + ".part");
  auto meta_tmp = dir / ("." + meta_name + ".part");
  bool written = false;
  try {
    write_file(data_tmp, icem);
    auto text = sidecar.dump(2) + "\n";
    write_file(meta_tmp, std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                                   text.size()));
    written = true;
  } catch (const std::exception& e) {
    spdlog::error("scan {}: {}", job->id, e.what());
  }

  {
    std::lock_guard lock(mutex_);
    if (job->aborted || shutting_down_ || !written) {
      std::error_code ec;
      std::filesystem::remove(data_tmp, ec);
      std::filesystem::remove(meta_tmp, ec);
      if (active_ == job) active_.reset();
    } else {
      std::filesystem::rename(data_tmp, dir / data_name);
      std::filesystem::rename(meta_tmp, dir / meta_name);
      ++frames_completed_;
      last_scan_ = {{"scan_id", job->id},
                    {"file_id", data_name},
                    {"sidecar_id", meta_name},
                    {"sha256", digest},
                    {"completed_at", sidecar["timestamp"]}};
      active_.reset();
    }
  }
  cv_.notify_all();
}

wire::Value Simulator::metadata() const {
  auto doc = options_.metadata.to_json();
  std::lock_guard lock(mutex_);
  doc["experiment"] = {{"frames_completed", static_cast<std::int64_t>(frames_completed_)},
                       {"last_scan", last_scan_}};
  return doc;
}

bool Simulator::wait_idle(std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mutex_);
  return cv_.wait_for(lock, timeout, [&] { return !active_; });
}

const std::set<std::string>& Simulator::mutating_methods() {
  static const std::set<std::string> kMutating{"set_probe_position", "start_scan",
                                               "abort_scan"};
  return kMutating;
}

void Simulator::build_methods() {
  methods_["scan_status"] = [this](const wire::Value& params) {
    reject_unknown(params, {});
    return scan_status().to_json();
  };
  methods_["get_probe_position"] = [this](const wire::Value& params) {
    reject_unknown(params, {});
    return probe_position().to_json();
  };
  methods_["set_probe_position"] = [this](const wire::Value& params) {
    auto position = ProbePosition::from_json(params);
    set_probe_position(position);
    return position.to_json();
  };
  methods_["start_scan"] = [this](const wire::Value& params) {
    auto id = start_scan(ScanParameters::from_json(params));
    return wire::Value{{"scan_id", id},
                       {"file_id", id + ".icem"},
                       {"sidecar_id", id + ".meta.json"}};
  };
  methods_["abort_scan"] = [this](const wire::Value& params) {
    reject_unknown(params, {"scan_id"});
    auto it = params.find("scan_id");
    if (it == params.end() || !it->is_string()) {
      throw Error(ErrorCode::kInvalidParams, "parameter 'scan_id' must be a string");
    }
    return wire::Value{{"aborted", abort_scan(it->get<std::string>())}};
  };
  methods_["metadata"] = [this](const wire::Value& params) {
    reject_unknown(params, {});
    return metadata();
  };
}

}  // namespace ice::instrument
