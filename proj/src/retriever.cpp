#include "mpic/retriever.h"

#include "mpic/errors.h"

#include <algorithm>
#include <cmath>
#include <mutex>

namespace mpic {

bool trigger_policy(std::span<const int32_t> partial_output, int32_t sentinel_id) {
    return std::find(partial_output.begin(), partial_output.end(), sentinel_id) !=
           partial_output.end();
}

void Retriever::index(const CacheKey& key, std::vector<float> embedding) {
    if (embedding.size() != dim_) {
        throw validation_error("embedding dimension " + std::to_string(embedding.size()) +
                               " does not match index dimension " + std::to_string(dim_));
    }
    double norm = 0.0;
    for (float x : embedding) {
        norm += static_cast<double>(x) * x;
    }
    std::unique_lock lock(mutex_);
    auto next = std::make_shared<Snapshot>(*items_);
    auto it = std::find_if(next->begin(), next->end(),
                           [&](const Item& i) { return i.key == key; });
    Item item{key, std::move(embedding), std::sqrt(norm)};
    if (it != next->end()) {
        *it = std::move(item);
    } else {
        next->push_back(std::move(item));
    }
    items_ = std::move(next);
}

std::vector<CacheKey> Retriever::retrieve(const RetrievalQuery& query) const {
    if (query.embedding.size() != dim_) {
        throw validation_error("query embedding dimension mismatch");
    }
    if (query.top_k == 0) {
        throw validation_error("top_k must be at least 1");
    }
    std::shared_ptr<const Snapshot> snap;
    {
        std::shared_lock lock(mutex_);
        snap = items_;
    }

    double qnorm = 0.0;
    for (float x : query.embedding) {
        qnorm += static_cast<double>(x) * x;
    }
    qnorm = std::sqrt(qnorm);

    std::vector<std::pair<double, const CacheKey*>> scored;
    scored.reserve(snap->size());
    for (const Item& item : *snap) {
        double dot = 0.0;
        for (uint32_t d = 0; d < dim_; ++d) {
            dot += static_cast<double>(query.embedding[d]) * item.embedding[d];
        }
        const double denom = qnorm * item.norm;
        scored.emplace_back(denom > 0.0 ? dot / denom : 0.0, &item.key);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) {
            return a.first > b.first;
        }
        return *a.second < *b.second;
    });

    const size_t take = std::min<size_t>(query.top_k, scored.size());
    std::vector<CacheKey> out;
    out.reserve(take);
    for (size_t i = 0; i < take; ++i) {
        out.push_back(*scored[i].second);
    }
    return out;
}

size_t Retriever::size() const {
    std::shared_lock lock(mutex_);
    return items_->size();
}

std::vector<CacheKey> Retriever::keys() const {
    std::shared_lock lock(mutex_);
    std::vector<CacheKey> out;
    out.reserve(items_->size());
    for (const Item& i : *items_) {
        out.push_back(i.key);
    }
    return out;
}

} // namespace mpic
