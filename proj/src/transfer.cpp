#include "mpic/transfer.h"

#include "mpic/errors.h"
#include "mpic/rng.h"

#include <algorithm>
#include <chrono>
#include <mutex>
#include <thread>

namespace mpic {

namespace {

using steady = std::chrono::steady_clock;

bool injected_failure(const PrepareOptions& opt, const CacheKey& key) {
    if (std::find(opt.failing_keys.begin(), opt.failing_keys.end(), key) !=
        opt.failing_keys.end()) {
        return true;
    }
    if (opt.failure_probability <= 0.0) {
        return false;
    }
    const uint64_t kh = fnv1a64(std::span<const uint8_t>(key.content_hash.data(),
                                                         key.content_hash.size())) ^
                        fnv1a64(key.ns) ^ key.model_fingerprint;
    const uint64_t draw = counter_hash(opt.failure_seed, 0x6661696cull, kh);
    return static_cast<double>(draw) <
           opt.failure_probability * static_cast<double>(UINT64_MAX);
}

void validate_request(const PrepareRequest& req) {
    for (const auto& item : req.needed) {
        if (!item.bytes.empty() && sha256(item.bytes) != item.key.content_hash) {
            throw validation_error("segment bytes do not match the key's content hash");
        }
    }
}

KvCacheEntry compute_entry(const PrepareItem& item, const Model& model,
                           const CacheStore& store, const PrepareOptions& opt) {
    const ModelConfig& cfg = model.config;
    const uint32_t count = item.token_count ? item.token_count : cfg.image_token_count;
    const TokenIds ids = image_token_ids(item.key.content_hash, cfg, count);
    PrefillResult r = prefill_extend(model, ids, KvTensor(), /*position_base=*/0);

    KvCacheEntry e;
    e.key = item.key;
    e.kv = std::move(r.kv);
    e.token_count = count;
    e.position_base = 0;
    e.created_at = Clock::now();
    e.ttl = opt.computed_ttl != Duration::zero() ? opt.computed_ttl
                                                 : store.config().default_ttl;
    e.tier = Tier::Device;
    return e;
}

struct Lanes {
    std::vector<const PrepareItem*> load;
    std::vector<const PrepareItem*> compute;
};

Lanes split_request(const PrepareRequest& req, const CacheStore& store) {
    std::vector<CacheKey> keys;
    keys.reserve(req.needed.size());
    for (const auto& item : req.needed) {
        keys.push_back(item.key);
    }
    const LookupReport rep = store.lookup_many(keys);
    Lanes lanes;
    for (const auto& item : req.needed) {
        const bool hit = std::any_of(rep.hits.begin(), rep.hits.end(),
                                     [&](const auto& h) { return h.first == item.key; });
        (hit ? lanes.load : lanes.compute).push_back(&item);
    }
    return lanes;
}

} // namespace

PrepareReport prepare(const PrepareRequest& req, CacheStore& store, const Model& model,
                      const PrepareOptions& options) {
    const auto t0 = steady::now();
    PrepareReport report;
    if (req.needed.empty()) {
        return report;
    }
    validate_request(req);
    const Lanes lanes = split_request(req, store);

    std::mutex mu;
    std::vector<const PrepareItem*> fallback;

    // loader lane: pull hits from the store while the misses are computed
    std::thread loader([&] {
        for (const PrepareItem* item : lanes.load) {
            const bool past_deadline =
                req.deadline && steady::now() - t0 > *req.deadline;
            if (past_deadline || injected_failure(options, item->key)) {
                std::lock_guard lock(mu);
                fallback.push_back(item);
                continue;
            }
            try {
                KvCacheEntry e = store.fetch(item->key);
                std::lock_guard lock(mu);
                report.entries.emplace(item->key, std::move(e));
                ++report.loaded;
            } catch (const error&) {
                // corrupt or vanished: recompute below
                std::lock_guard lock(mu);
                fallback.push_back(item);
            }
        }
    });

    // compute lane: prefill the misses and store them for future reuse
    try {
        for (const PrepareItem* item : lanes.compute) {
            KvCacheEntry e = compute_entry(*item, model, store, options);
            store.put(e);
            std::lock_guard lock(mu);
            report.entries.emplace(item->key, std::move(e));
            ++report.computed;
        }
    } catch (...) {
        loader.join();
        throw;
    }

    loader.join();
    for (const PrepareItem* item : fallback) {
        KvCacheEntry e = compute_entry(*item, model, store, options);
        store.put(e);
        report.entries.emplace(item->key, std::move(e));
        ++report.computed;
        ++report.fallbacks;
    }

    report.wall_ms =
        std::chrono::duration<double, std::milli>(steady::now() - t0).count();
    return report;
}

PrepareReport prepare_sequential(const PrepareRequest& req, CacheStore& store, const Model& model,
                                 const PrepareOptions& options) {
    const auto t0 = steady::now();
    PrepareReport report;
    if (req.needed.empty()) {
        return report;
    }
    validate_request(req);
    const Lanes lanes = split_request(req, store);

    std::vector<const PrepareItem*> fallback;
    for (const PrepareItem* item : lanes.load) {
        const bool past_deadline = req.deadline && steady::now() - t0 > *req.deadline;
        if (past_deadline || injected_failure(options, item->key)) {
            fallback.push_back(item);
            continue;
        }
        try {
            KvCacheEntry e = store.fetch(item->key);
            report.entries.emplace(item->key, std::move(e));
            ++report.loaded;
        } catch (const error&) {
            fallback.push_back(item);
        }
    }
    for (const PrepareItem* item : lanes.compute) {
        KvCacheEntry e = compute_entry(*item, model, store, options);
        store.put(e);
        report.entries.emplace(item->key, std::move(e));
        ++report.computed;
    }
    for (const PrepareItem* item : fallback) {
        KvCacheEntry e = compute_entry(*item, model, store, options);
        store.put(e);
        report.entries.emplace(item->key, std::move(e));
        ++report.computed;
        ++report.fallbacks;
    }

    report.wall_ms =
        std::chrono::duration<double, std::milli>(steady::now() - t0).count();
    return report;
}

} // namespace mpic
