#pragma once

#include "mpic/cache.h"

#include <cstdint>
#include <memory>
#include <shared_mutex>
#include <span>
#include <vector>

namespace mpic {

struct RetrievalQuery {
    std::vector<float> embedding; // mean-pooled last-layer hidden state of the query text
    uint32_t top_k = 1;
};

// True once the reserved sentinel id has been emitted.
bool trigger_policy(std::span<const int32_t> partial_output, int32_t sentinel_id);

// Exact (exhaustive) cosine-similarity index over dynamic-library entries.
// Read-mostly: retrieves take a snapshot, index() swaps in a new one.
class Retriever {
public:
    explicit Retriever(uint32_t dim) : dim_(dim) {}

    void index(const CacheKey& key, std::vector<float> embedding);

    // top_k keys by cosine similarity; ties by lowest key; clamped to the
    // index size.
    std::vector<CacheKey> retrieve(const RetrievalQuery& query) const;

    size_t size() const;
    std::vector<CacheKey> keys() const;

private:
    struct Item {
        CacheKey key;
        std::vector<float> embedding;
        double norm = 0.0;
    };
    using Snapshot = std::vector<Item>;

    uint32_t dim_;
    mutable std::shared_mutex mutex_;
    std::shared_ptr<const Snapshot> items_ = std::make_shared<Snapshot>();
};

} // namespace mpic
