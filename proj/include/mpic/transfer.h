#pragma once

#include "mpic/cache.h"
#include "mpic/model.h"

#include <chrono>
#include <map>
#include <optional>
#include <vector>

namespace mpic {

struct PrepareItem {
    CacheKey key;
    std::vector<uint8_t> bytes; // optional; verified against the key when present
    uint32_t token_count = 0;   // 0 = config.image_token_count
};

struct PrepareRequest {
    std::vector<PrepareItem> needed;
    std::optional<std::chrono::milliseconds> deadline; // loads past this are recomputed
};

struct PrepareOptions {
    // Test-only fault injection: each load fails independently as a pure
    // function of (failure_seed, key), or when the key is listed.
    double failure_probability = 0.0;
    uint64_t failure_seed = 0;
    std::vector<CacheKey> failing_keys;
    Duration computed_ttl = Duration::zero(); // zero = store default
};

struct PrepareReport {
    std::map<CacheKey, KvCacheEntry> entries;
    uint32_t loaded = 0;
    uint32_t computed = 0;
    uint32_t fallbacks = 0; // loads converted to recomputation
    double wall_ms = 0.0;
};

// Loads cache hits (possibly from disk) on a loader lane while the compute
// lane prefills the misses at position_base 0; failed loads are converted to
// recomputation and never surfaced. Computed entries are stored for reuse.
PrepareReport prepare(const PrepareRequest& req, CacheStore& store, const Model& model,
                      const PrepareOptions& options = {});

// Strictly serial implementation with the identical contract; the equivalence
// oracle for prepare() and a CLI mode.
PrepareReport prepare_sequential(const PrepareRequest& req, CacheStore& store, const Model& model,
                                 const PrepareOptions& options = {});

} // namespace mpic
