#ifndef ICE_DATACHANNEL_H_
#define ICE_DATACHANNEL_H_

// Data channel: an instrument-side store server that publishes a manifest of
// its measurement directory and serves 1 MiB chunks, and a sync client that
// mirrors the store into a local directory.
//
// Protocol (object "store" over the frame codec):
//   manifest  {}                      -> {generation, records[]}
//   get_chunk {file_id, index}        -> {file_id, index, offset, length,
//                                         total_chunks, data (base64)}
// Files are compared by SHA-256. Dot-prefixed names are never published, so
// partially written files stay invisible.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stop_token>
#include <string>
#include <string_view>
#include <vector>

#include "ice/channel.h"
#include "ice/net.h"
#include "ice/wire.h"

namespace ice::data {

inline constexpr std::size_t kChunkSize = 1u << 20;
inline constexpr const char* kObjectName = "store";
// Written into a mirror after each sync; read by the bridge.
inline constexpr const char* kSyncStatusFile = ".ice-sync.json";

struct MeasurementRecord {
  std::string file_id;
  std::uint64_t size_bytes = 0;
  std::string sha256;
  std::string modified_at;
  std::optional<std::string> sidecar;

  std::uint64_t chunk_count() const {
    return (size_bytes + kChunkSize - 1) / kChunkSize;
  }
  wire::Value to_json() const;
  static MeasurementRecord from_json(const wire::Value& json);
  friend bool operator==(const MeasurementRecord&, const MeasurementRecord&) = default;
};

struct Manifest {
  std::uint64_t generation = 1;
  std::vector<MeasurementRecord> records;  // sorted by file_id
  std::vector<std::string> warnings;

  const MeasurementRecord* find(std::string_view file_id) const;
  wire::Value to_json() const;
  static Manifest from_json(const wire::Value& json);
};

// Store-relative, '/'-separated, no empty/"."/".." components, not absolute,
// no backslashes and no dot-prefixed components.
bool is_safe_file_id(std::string_view file_id);

// Walks `dir` recursively and hashes every regular, non-hidden file.
// Throws Error(kInternal) if `dir` cannot be listed; unreadable files are
// skipped and named in `warnings`.
Manifest build_manifest(const std::filesystem::path& dir, std::uint64_t generation = 1);

// Rebuilds manifests over one directory, reusing digests of files whose size
// and mtime are unchanged. The generation increases only when the record
// list changes. Readers get immutable snapshots.
class ManifestCatalog {
 public:
  explicit ManifestCatalog(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::shared_ptr<const Manifest> refresh();
  // Latest snapshot, building the first one if needed.
  std::shared_ptr<const Manifest> current();
  const std::filesystem::path& dir() const { return dir_; }

 private:
  struct CacheEntry {
    std::uint64_t size;
    std::filesystem::file_time_type mtime;
    std::string sha256;
  };

  std::filesystem::path dir_;
  std::mutex build_mutex_;
  std::map<std::string, CacheEntry> cache_;
  mutable std::mutex snapshot_mutex_;
  std::shared_ptr<const Manifest> current_;
};

struct Chunk {
  std::string file_id;
  std::uint64_t index = 0;
  std::uint64_t offset = 0;
  std::uint64_t total_chunks = 0;
  std::vector<std::uint8_t> bytes;
};

// Bytes [index*CHUNK, min((index+1)*CHUNK, size)) of a manifest file.
// Errors: kInvalidParams (unsafe id), kNotFound (not in manifest),
// kOutOfRange (index).
Chunk read_chunk(const std::filesystem::path& dir, const Manifest& manifest,
                 std::string_view file_id, std::int64_t index);

class StoreServer {
 public:
  StoreServer(std::filesystem::path dir, FrameServerOptions options);

  void start() { server_.start(); }
  void stop() { server_.stop(); }
  std::uint16_t port() const { return server_.port(); }
  ManifestCatalog& catalog() { return catalog_; }

 private:
  wire::Message handle(const wire::Message& request, const PeerInfo& peer);

  ManifestCatalog catalog_;
  FrameServer server_;
};

class StoreClient {
 public:
  StoreClient(net::Endpoint endpoint, std::string principal,
              std::chrono::milliseconds timeout = std::chrono::milliseconds(10000));

  Manifest manifest();
  Chunk get_chunk(const std::string& file_id, std::uint64_t index);

 private:
  wire::Value call(const std::string& method, wire::Value params);

  net::Endpoint endpoint_;
  std::string principal_;
  std::chrono::milliseconds timeout_;
  std::optional<Connection> conn_;
};

struct Mismatch {
  std::string file_id;
  std::string reason;
};

struct SyncReport {
  std::uint64_t generation = 0;
  std::uint64_t files_examined = 0;
  std::uint64_t files_transferred = 0;
  std::uint64_t bytes_transferred = 0;
  std::uint64_t files_verified = 0;
  std::vector<Mismatch> mismatches;
  std::string finished_at;

  bool converged() const { return mismatches.empty(); }
  wire::Value to_json() const;
  static SyncReport from_json(const wire::Value& json);
};

struct SyncOptions {
  std::string principal = "anonymous";
  std::chrono::milliseconds timeout{10000};
  // Extra attempts per file after a digest mismatch.
  int max_retries = 2;
};

// Pulls every file that is absent locally or differs by digest. Each file is
// written under a hidden temporary name and renamed into place only after
// its digest matches the manifest. Throws Error(kPolicyDenied) when the store
// refuses the principal and TransportError when it cannot be reached.
SyncReport sync_once(const net::Endpoint& remote, const std::filesystem::path& mirror,
                     const SyncOptions& options = {});

// Stores `report` as the mirror's sync status file.
void record_sync_report(const std::filesystem::path& mirror, const SyncReport& report);
std::optional<SyncReport> read_sync_report(const std::filesystem::path& mirror);

// Calls sync_once every `interval` until stop is requested. Failures are
// passed to `on_error` and retried on the next tick.
void watch_and_sync(const net::Endpoint& remote, const std::filesystem::path& mirror,
                    std::chrono::milliseconds interval, std::stop_token stop,
                    const SyncOptions& options,
                    const std::function<void(const SyncReport&)>& on_report = {},
                    const std::function<void(const std::exception&)>& on_error = {});

}  // namespace ice::data

#endif  // ICE_DATACHANNEL_H_
