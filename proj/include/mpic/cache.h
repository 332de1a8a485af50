#pragma once

#include "mpic/hash.h"
#include "mpic/tensor.h"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

namespace mpic {

using Clock = std::chrono::system_clock;
using TimePoint = Clock::time_point;
using Duration = Clock::duration;

// Namespace reserved for the dynamic library (MRAG corpus).
inline constexpr const char* kDynamicNamespace = "dynamic";

struct CacheKey {
    Hash256 content_hash{};
    uint64_t model_fingerprint = 0;
    std::string ns; // user id, or "dynamic"

    auto operator<=>(const CacheKey&) const = default;
    std::string hex() const { return hash_to_hex(content_hash); }
};

enum class Tier : uint8_t { Device = 0, Host = 1, Disk = 2 };

const char* tier_name(Tier t);

struct KvCacheEntry {
    CacheKey key;
    KvTensor kv;
    uint32_t token_count = 0;
    uint32_t position_base = 0; // position the cache was computed at; 0 for standalone precompute
    TimePoint created_at{};
    Duration ttl{};
    Tier tier = Tier::Device;
    std::optional<std::vector<float>> embedding; // dynamic-library retrieval key

    bool expired(TimePoint now) const { return created_at + ttl <= now; }
};

struct LookupReport {
    std::vector<std::pair<CacheKey, Tier>> hits;
    std::vector<CacheKey> misses;
};

// Disk container, little-endian:
//   "MPIC" | u32 version=1 | u64 model_fingerprint | u64 namespace_hash |
//   32B content_hash | u32 position_base | u32 n_layers | u32 n_tokens |
//   u32 n_heads | u32 head_dim | u8 dtype(0=f32) | 7B reserved |
//   K floats | V floats | u32 crc32(all preceding bytes)
std::vector<uint8_t> serialize_entry(const KvCacheEntry& entry);
KvCacheEntry deserialize_entry(std::span<const uint8_t> bytes, const std::string& ns);

inline constexpr char kEntryFileSuffix[] = ".mpic";

struct StoreConfig {
    std::filesystem::path dir;       // disk tier root; empty = temp-style in-memory only until demotion
    uint32_t device_budget = 64;     // entry counts
    uint32_t host_budget = 256;
    Duration default_ttl = std::chrono::hours(24);
    uint64_t model_fingerprint = 0;  // entries for other models are rejected on fetch
};

// Tiered, content-addressed KV store: the static library (per-user namespaces)
// and the dynamic library (the "dynamic" namespace). Safe for concurrent
// put/lookup/fetch; expiry runs via evict_and_expire.
class CacheStore {
public:
    explicit CacheStore(StoreConfig config);

    void put(KvCacheEntry entry);
    LookupReport lookup_many(std::span<const CacheKey> keys) const;

    // Returns the entry, promoting it to Device. Throws integrity_error on
    // checksum/fingerprint mismatch (callers treat the key as a miss) and
    // not_found_error when absent or expired.
    KvCacheEntry fetch(const CacheKey& key);

    bool contains(const CacheKey& key) const; // unexpired presence, metadata only
    std::optional<Tier> tier_of(const CacheKey& key) const;

    size_t evict_and_expire(TimePoint now);
    bool remove(const CacheKey& key);

    // Rebuilds the metadata index from headers of on-disk entry files.
    size_t rescan();

    struct EntryInfo {
        CacheKey key;
        Tier tier;
        uint32_t token_count;
        TimePoint created_at;
        Duration ttl;
    };
    std::vector<EntryInfo> list(const std::string& ns) const;

    const StoreConfig& config() const { return config_; }

    // Test-only: force an entry to a lower tier (writing it to disk if needed).
    void demote_to(const CacheKey& key, Tier tier);

private:
    struct Record {
        std::shared_ptr<const KvCacheEntry> resident; // Device/Host tiers
        Tier tier = Tier::Device;
        uint32_t token_count = 0;
        uint32_t position_base = 0;
        TimePoint created_at{};
        Duration ttl{};
        uint64_t last_fetch = 0;
        std::optional<std::vector<float>> embedding;
    };

    std::filesystem::path path_for(const CacheKey& key) const;
    void enforce_budgets_locked();
    void demote_one_locked(Tier from);
    void write_to_disk_locked(const CacheKey& key, const Record& rec);

    StoreConfig config_;
    mutable std::shared_mutex mutex_;
    std::map<CacheKey, Record> index_;
    uint64_t fetch_counter_ = 0;
};

} // namespace mpic
