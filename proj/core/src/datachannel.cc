#include "ice/datachannel.h"

#include <algorithm>
#include <condition_variable>
#include <fstream>
#include <set>
#include <thread>

#include <spdlog/spdlog.h>

#include "ice/digest.h"
#include "ice/error.h"
#include "ice/timeutil.h"

namespace fs = std::filesystem;

namespace ice::data {
namespace {

std::string modified_string(fs::file_time_type t) {
  auto sys = std::chrono::file_clock::to_sys(t);
  return iso8601(std::chrono::time_point_cast<std::chrono::system_clock::duration>(sys));
}

std::string sidecar_for(const std::string& file_id) {
  auto dot = file_id.rfind('.');
  auto slash = file_id.rfind('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) {
    return file_id + ".meta.json";
  }
  return file_id.substr(0, dot) + ".meta.json";
}

bool hidden_component(const fs::path& relative) {
  for (const auto& part : relative) {
    auto s = part.string();
    if (!s.empty() && s.front() == '.') return true;
  }
  return false;
}

struct FileEntry {
  std::string file_id;
  fs::path path;
  std::uint64_t size;
  fs::file_time_type mtime;
};

std::vector<FileEntry> list_files(const fs::path& dir, std::vector<std::string>& warnings) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) {
    throw Error(ErrorCode::kInternal, "store directory " + dir.string() + " is not readable");
  }
  fs::recursive_directory_iterator it(dir, fs::directory_options::none, ec);
  if (ec) {
    throw Error(ErrorCode::kInternal,
                "cannot list " + dir.string() + ": " + ec.message());
  }
  std::vector<FileEntry> files;
  for (auto end = fs::recursive_directory_iterator(); it != end; it.increment(ec)) {
    if (ec) {
      warnings.push_back("listing stopped early: " + ec.message());
      break;
    }
    auto relative = it->path().lexically_relative(dir);
    if (hidden_component(relative)) {
      if (it->is_directory(ec)) it.disable_recursion_pending();
      continue;
    }
    if (it->is_symlink(ec) || !it->is_regular_file(ec)) continue;
    FileEntry entry{relative.generic_string(), it->path(), 0, {}};
    entry.size = it->file_size(ec);
    if (!ec) entry.mtime = it->last_write_time(ec);
    if (ec) {
      warnings.push_back(entry.file_id + ": " + ec.message());
      continue;
    }
    files.push_back(std::move(entry));
  }
  std::sort(files.begin(), files.end(),
            [](const FileEntry& a, const FileEntry& b) { return a.file_id < b.file_id; });
  return files;
}

template <typename DigestFn>
Manifest assemble(const fs::path& dir, std::uint64_t generation, DigestFn&& digest_of) {
  Manifest m;
  m.generation = generation;
  auto files = list_files(dir, m.warnings);
  std::set<std::string> ids;
  for (const auto& f : files) ids.insert(f.file_id);
  for (const auto& f : files) {
    std::string digest;
    try {
      digest = digest_of(f);
    } catch (const std::exception& e) {
      m.warnings.push_back(f.file_id + ": " + e.what());
      continue;
    }
    MeasurementRecord rec{f.file_id, f.size, std::move(digest), modified_string(f.mtime),
                          std::nullopt};
    auto sidecar = sidecar_for(f.file_id);
    if (sidecar != f.file_id && ids.contains(sidecar)) rec.sidecar = sidecar;
    m.records.push_back(std::move(rec));
  }
  return m;
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes, bool append) {
  std::ofstream out(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

wire::Value MeasurementRecord::to_json() const {
  wire::Value j = {{"file_id", file_id},
                   {"size_bytes", static_cast<std::int64_t>(size_bytes)},
                   {"sha256", sha256},
                   {"modified_at", modified_at},
                   {"sidecar", sidecar ? wire::Value(*sidecar) : wire::Value()}};
  return j;
}

MeasurementRecord MeasurementRecord::from_json(const wire::Value& json) {
  MeasurementRecord r;
  r.file_id = json.at("file_id").get<std::string>();
  r.size_bytes = json.at("size_bytes").get<std::uint64_t>();
  r.sha256 = json.at("sha256").get<std::string>();
  r.modified_at = json.value("modified_at", "");
  if (json.contains("sidecar") && json["sidecar"].is_string()) {
    r.sidecar = json["sidecar"].get<std::string>();
  }
  return r;
}

const MeasurementRecord* Manifest::find(std::string_view file_id) const {
  auto it = std::lower_bound(records.begin(), records.end(), file_id,
                             [](const MeasurementRecord& r, std::string_view id) {
                               return r.file_id < id;
                             });
  return (it != records.end() && it->file_id == file_id) ? &*it : nullptr;
}

wire::Value Manifest::to_json() const {
  wire::Value recs = wire::Value::array();
  for (const auto& r : records) recs.push_back(r.to_json());
  wire::Value warns = wire::Value::array();
  for (const auto& w : warnings) warns.push_back(w);
  return {{"generation", static_cast<std::int64_t>(generation)},
          {"records", recs},
          {"warnings", warns}};
}

Manifest Manifest::from_json(const wire::Value& json) {
  Manifest m;
  m.generation = json.at("generation").get<std::uint64_t>();
  for (const auto& r : json.at("records")) m.records.push_back(MeasurementRecord::from_json(r));
  for (const auto& w : json.value("warnings", wire::Value::array())) {
    m.warnings.push_back(w.get<std::string>());
  }
  return m;
}

bool is_safe_file_id(std::string_view file_id) {
  if (file_id.empty() || file_id.front() == '/' ||
      file_id.find('\\') != std::string_view::npos ||
      file_id.find('\0') != std::string_view::npos) {
    return false;
  }
  std::size_t pos = 0;
  while (pos <= file_id.size()) {
    auto end = file_id.find('/', pos);
    if (end == std::string_view::npos) end = file_id.size();
    auto part = file_id.substr(pos, end - pos);
    if (part.empty() || part.front() == '.') return false;
    pos = end + 1;
  }
  return true;
}

Manifest build_manifest(const fs::path& dir, std::uint64_t generation) {
  return assemble(dir, generation, [](const FileEntry& f) { return sha256_file(f.path); });
}

std::shared_ptr<const Manifest> ManifestCatalog::refresh() {
  std::lock_guard build_lock(build_mutex_);
  std::map<std::string, CacheEntry> next_cache;
  auto built = assemble(dir_, 0, [&](const FileEntry& f) {
    auto it = cache_.find(f.file_id);
    std::string digest = (it != cache_.end() && it->second.size == f.size &&
                          it->second.mtime == f.mtime)
                             ? it->second.sha256
                             : sha256_file(f.path);
    next_cache[f.file_id] = CacheEntry{f.size, f.mtime, digest};
    return digest;
  });
  cache_ = std::move(next_cache);

  std::shared_ptr<const Manifest> previous;
  {
    std::lock_guard lock(snapshot_mutex_);
    previous = current_;
  }
  if (previous && previous->records == built.records) {
    built.generation = previous->generation;
  } else {
    built.generation = previous ? previous->generation + 1 : 1;
  }
  auto snapshot = std::make_shared<const Manifest>(std::move(built));
  std::lock_guard lock(snapshot_mutex_);
  current_ = snapshot;
  return snapshot;
}

std::shared_ptr<const Manifest> ManifestCatalog::current() {
  {
    std::lock_guard lock(snapshot_mutex_);
    if (current_) return current_;
  }
  if (build_mutex_.try_lock()) {
    build_mutex_.unlock();
    return refresh();
  }
  // A refresh is in progress on another thread; wait for it.
  std::lock_guard build_lock(build_mutex_);
  std::lock_guard lock(snapshot_mutex_);
  return current_;
}

Chunk read_chunk(const fs::path& dir, const Manifest& manifest, std::string_view file_id,
                 std::int64_t index) {
  if (!is_safe_file_id(file_id)) {
    throw Error(ErrorCode::kInvalidParams, "unsafe file id '" + std::string(file_id) + "'");
  }
  const auto* record = manifest.find(file_id);
  if (!record) {
    throw Error(ErrorCode::kNotFound, "no file '" + std::string(file_id) + "' in manifest");
  }
  auto total = record->chunk_count();
  if (index < 0 || static_cast<std::uint64_t>(index) >= total) {
    throw Error(ErrorCode::kOutOfRange,
                "chunk " + std::to_string(index) + " of '" + std::string(file_id) +
                    "' outside 0.." + std::to_string(total) + ")");
  }
  Chunk chunk;
  chunk.file_id = std::string(file_id);
  chunk.index = static_cast<std::uint64_t>(index);
  chunk.offset = chunk.index * kChunkSize;
  chunk.total_chunks = total;
  auto length = std::min<std::uint64_t>(kChunkSize, record->size_bytes - chunk.offset);
  chunk.bytes.resize(length);
  std::ifstream in(dir / fs::path(chunk.file_id), std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot open '" + chunk.file_id + "'");
  in.seekg(static_cast<std::streamoff>(chunk.offset));
  in.read(reinterpret_cast<char*>(chunk.bytes.data()), static_cast<std::streamsize>(length));
  chunk.bytes.resize(static_cast<std::size_t>(in.gcount()));
  return chunk;
}

StoreServer::StoreServer(fs::path dir, FrameServerOptions options)
    : catalog_(std::move(dir)),
      server_(
          [&] {
            options.channel = policy::Channel::kData;
            options.close_on_denied = true;
            return options;
          }(),
          [this](const wire::Message& request, const PeerInfo& peer) {
            return handle(request, peer);
          }) {}

wire::Message StoreServer::handle(const wire::Message& request, const PeerInfo& peer) {
  if (!server_.policy()->allows(request.principal, peer.address, policy::Channel::kData)) {
    return wire::Message::failure(
        request, {ErrorCode::kPolicyDenied,
                  "principal '" + request.principal + "' denied on data channel"});
  }
  if (request.object != kObjectName) {
    return wire::Message::failure(request,
                                  {ErrorCode::kNotFound, "this endpoint serves only 'store'"});
  }
  if (request.method == "manifest") {
    return wire::Message::ok(request, catalog_.refresh()->to_json());
  }
  if (request.method == "get_chunk") {
    const auto& p = request.params;
    if (!p.contains("file_id") || !p["file_id"].is_string() || !p.contains("index") ||
        !p["index"].is_number_integer()) {
      throw Error(ErrorCode::kInvalidParams, "get_chunk needs file_id and integer index");
    }
    auto chunk = read_chunk(catalog_.dir(), *catalog_.current(),
                            p["file_id"].get<std::string>(), p["index"].get<std::int64_t>());
    return wire::Message::ok(
        request, {{"file_id", chunk.file_id},
                  {"index", static_cast<std::int64_t>(chunk.index)},
                  {"offset", static_cast<std::int64_t>(chunk.offset)},
                  {"length", static_cast<std::int64_t>(chunk.bytes.size())},
                  {"total_chunks", static_cast<std::int64_t>(chunk.total_chunks)},
                  {"data", base64_encode(chunk.bytes)}});
  }
  return wire::Message::failure(
      request, {ErrorCode::kNotFound, "store has no method '" + request.method + "'"});
}

StoreClient::StoreClient(net::Endpoint endpoint, std::string principal,
                         std::chrono::milliseconds timeout)
    : endpoint_(std::move(endpoint)), principal_(std::move(principal)), timeout_(timeout) {}

wire::Value StoreClient::call(const std::string& method, wire::Value params) {
  if (!conn_ || !conn_->usable()) conn_ = Connection::open(endpoint_, timeout_);
  auto request = wire::Message::request(kObjectName, method, std::move(params), principal_);
  try {
    return unwrap(conn_->call(request, timeout_));
  } catch (const TransportError&) {
    conn_.reset();
    throw;
  }
}

Manifest StoreClient::manifest() { return Manifest::from_json(call("manifest", wire::Value::object())); }

Chunk StoreClient::get_chunk(const std::string& file_id, std::uint64_t index) {
  auto j = call("get_chunk", {{"file_id", file_id}, {"index", static_cast<std::int64_t>(index)}});
  Chunk chunk;
  chunk.file_id = j.at("file_id").get<std::string>();
  chunk.index = j.at("index").get<std::uint64_t>();
  chunk.offset = j.at("offset").get<std::uint64_t>();
  chunk.total_chunks = j.at("total_chunks").get<std::uint64_t>();
  try {
    chunk.bytes = base64_decode(j.at("data").get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw TransportError(TransportError::Kind::kProtocol, e.what());
  }
  return chunk;
}

wire::Value SyncReport::to_json() const {
  wire::Value mm = wire::Value::array();
  for (const auto& m : mismatches) mm.push_back({{"file_id", m.file_id}, {"reason", m.reason}});
  return {{"generation", static_cast<std::int64_t>(generation)},
          {"files_examined", static_cast<std::int64_t>(files_examined)},
          {"files_transferred", static_cast<std::int64_t>(files_transferred)},
          {"bytes_transferred", static_cast<std::int64_t>(bytes_transferred)},
          {"files_verified", static_cast<std::int64_t>(files_verified)},
          {"mismatches", mm},
          {"finished_at", finished_at}};
}

SyncReport SyncReport::from_json(const wire::Value& json) {
  SyncReport r;
  r.generation = json.value("generation", std::uint64_t{0});
  r.files_examined = json.value("files_examined", std::uint64_t{0});
  r.files_transferred = json.value("files_transferred", std::uint64_t{0});
  r.bytes_transferred = json.value("bytes_transferred", std::uint64_t{0});
  r.files_verified = json.value("files_verified", std::uint64_t{0});
  for (const auto& m : json.value("mismatches", wire::Value::array())) {
    r.mismatches.push_back({m.value("file_id", ""), m.value("reason", "")});
  }
  r.finished_at = json.value("finished_at", "");
  return r;
}

SyncReport sync_once(const net::Endpoint& remote, const fs::path& mirror,
                     const SyncOptions& options) {
  fs::create_directories(mirror);
  StoreClient client(remote, options.principal, options.timeout);
  auto manifest = client.manifest();

  SyncReport report;
  report.generation = manifest.generation;
  report.files_examined = manifest.records.size();
  for (const auto& record : manifest.records) {
    if (!is_safe_file_id(record.file_id)) {
      report.mismatches.push_back({record.file_id, "unsafe file id rejected"});
      continue;
    }
    auto target = mirror / fs::path(record.file_id);
    std::error_code ec;
    if (fs::is_regular_file(target, ec)) {
      try {
        if (sha256_file(target) == record.sha256) {
          ++report.files_verified;
          continue;
        }
      } catch (const std::exception&) {
        // Unreadable local copy: fetch it again.
      }
    }
    fs::create_directories(target.parent_path());
    auto temp = target.parent_path() / ("." + target.filename().string() + ".part");
    bool verified = false;
    std::string digest;
    for (int attempt = 0; attempt <= options.max_retries && !verified; ++attempt) {
      write_bytes(temp, {}, false);
      for (std::uint64_t i = 0; i < record.chunk_count(); ++i) {
        auto chunk = client.get_chunk(record.file_id, i);
        write_bytes(temp, chunk.bytes, true);
        report.bytes_transferred += chunk.bytes.size();
      }
      digest = sha256_file(temp);
      verified = digest == record.sha256;
    }
    if (verified) {
      fs::rename(temp, target);
      ++report.files_transferred;
      ++report.files_verified;
    } else {
      fs::remove(temp, ec);
      report.mismatches.push_back(
          {record.file_id, "digest " + digest + " != manifest " + record.sha256 + " after " +
                               std::to_string(options.max_retries + 1) + " attempts"});
    }
  }
  report.finished_at = iso8601_now();
  return report;
}

void record_sync_report(const fs::path& mirror, const SyncReport& report) {
  auto temp = mirror / (std::string(kSyncStatusFile) + ".part");
  {
    std::ofstream out(temp, std::ios::trunc);
    out << report.to_json().dump(2) << '\n';
  }
  std::error_code ec;
  fs::rename(temp, mirror / kSyncStatusFile, ec);
}

std::optional<SyncReport> read_sync_report(const fs::path& mirror) {
  std::ifstream in(mirror / kSyncStatusFile);
  if (!in) return std::nullopt;
  try {
    return SyncReport::from_json(wire::Value::parse(in));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void watch_and_sync(const net::Endpoint& remote, const fs::path& mirror,
                    std::chrono::milliseconds interval, std::stop_token stop,
                    const SyncOptions& options,
                    const std::function<void(const SyncReport&)>& on_report,
                    const std::function<void(const std::exception&)>& on_error) {
  std::mutex mutex;
  std::condition_variable_any cv;
  while (!stop.stop_requested()) {
    auto next = std::chrono::steady_clock::now() + interval;
    try {
      auto report = sync_once(remote, mirror, options);
      record_sync_report(mirror, report);
      if (on_report) on_report(report);
    } catch (const std::exception& e) {
      spdlog::warn("sync from {} failed: {}", remote.to_string(), e.what());
      if (on_error) on_error(e);
    }
    std::unique_lock lock(mutex);
    cv.wait_until(lock, stop, next, [] { return false; });
  }
}

}  // namespace ice::data
