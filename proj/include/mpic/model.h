#pragma once

#include "mpic/config.h"
#include "mpic/hash.h"
#include "mpic/tensor.h"

#include <cstdint>
#include <span>
#include <vector>

namespace mpic {

using TokenIds = std::vector<int32_t>;
using Logits = std::vector<float>;

struct LayerWeights {
    std::vector<float> wq, wk, wv, wo; // [hidden][hidden]
    std::vector<float> w1;             // [4*hidden][hidden]
    std::vector<float> w2;             // [hidden][4*hidden]
};

// Immutable after build_model; safe to share across concurrent requests.
struct Model {
    ModelConfig config;
    std::vector<float> embedding; // [vocab][hidden]
    std::vector<float> lm_head;   // [vocab][hidden]
    std::vector<LayerWeights> layers;

    uint64_t weight_checksum() const;
};

Model build_model(const ModelConfig& config);

// Pseudo vision encoder: expands a hash of the image bytes into exactly
// config.image_token_count vocabulary ids.
TokenIds encode_image(std::span<const uint8_t> image_bytes, const ModelConfig& config);

// Same expansion keyed directly by the content hash, so a stored cache entry
// is enough to recover the ids of its image tokens.
TokenIds image_token_ids(const Hash256& content_hash, const ModelConfig& config);
TokenIds image_token_ids(const Hash256& content_hash, const ModelConfig& config, uint32_t count);

// Softmax of q.k_j / sqrt(head_dim) over the given keys.
std::vector<float> attention_row(std::span<const float> q,
                                 std::span<const std::vector<float>> keys,
                                 uint32_t head_dim);

// Full causal attention matrices captured during a prefill, softmax-normalized
// rows; entries above the diagonal are zero. Layout [layer][head][query][key].
struct AttentionDump {
    uint32_t n_layers = 0;
    uint32_t n_heads = 0;
    uint32_t n_tokens = 0;
    uint64_t model_fingerprint = 0;
    std::vector<float> scores;
    std::vector<uint32_t> segment_starts;  // one per prompt segment
    std::vector<uint8_t> segment_is_image; // parallel to segment_starts

    const float* row(uint32_t layer, uint32_t head, uint32_t query) const {
        const size_t n = n_tokens;
        return scores.data() + ((static_cast<size_t>(layer) * n_heads + head) * n + query) * n;
    }
    float* row(uint32_t layer, uint32_t head, uint32_t query) {
        const size_t n = n_tokens;
        return scores.data() + ((static_cast<size_t>(layer) * n_heads + head) * n + query) * n;
    }
    // The rows used to produce the first output token.
    const float* first_output_row(uint32_t layer, uint32_t head) const {
        return row(layer, head, n_tokens - 1);
    }
};

struct PrefillResult {
    KvTensor kv;
    Logits logits; // last position
};

// Ground-truth oracle for every cache-reuse mode: computes rows
// [cache.n_tokens, |ids|) of `ids` on top of the rows already in `cache`,
// with token j at rotary position position_base + j.
PrefillResult prefill_extend(const Model& model, std::span<const int32_t> ids,
                             KvTensor&& cache, uint32_t position_base = 0,
                             AttentionDump* capture = nullptr);

PrefillResult full_prefill(const Model& model, std::span<const int32_t> ids,
                           AttentionDump* capture = nullptr);

// Appends one token at `position` (must equal cache.n_tokens + base the cache
// was computed at; callers track the base, standalone caches use 0) and
// returns logits for the new position.
Logits decode_step(const Model& model, KvTensor& cache, int32_t next_token, uint32_t position,
                   uint32_t position_base = 0);

// Mean of the final-layer hidden states of `ids` prefilled standalone;
// used as the retrieval embedding.
std::vector<float> mean_pooled_hidden(const Model& model, std::span<const int32_t> ids);

int32_t argmax_token(std::span<const float> logits);

// Internals shared with the linker's selective pass.
namespace detail {
void apply_rope(float* row, uint32_t n_heads, uint32_t head_dim, uint32_t position,
                float rope_base);
// Rotate a stored key row from position `from` to position `to`.
void rerotate_key(float* row, uint32_t n_heads, uint32_t head_dim, uint32_t from, uint32_t to,
                  float rope_base);
float gelu(float x);
void embed_tokens(const Model& model, std::span<const int32_t> ids, float* out);
} // namespace detail

} // namespace mpic
