#include "mpic/model.h"

#include "mpic/errors.h"
#include "mpic/matmul.h"
#include "mpic/rng.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

namespace mpic {

namespace {

enum : uint64_t {
    kStreamWq = 1,
    kStreamWk = 2,
    kStreamWv = 3,
    kStreamWo = 4,
    kStreamW1 = 5,
    kStreamW2 = 6,
    kStreamEmbedding = 100,
    kStreamLmHead = 101,
};

std::vector<float> synth_matrix(uint64_t seed, uint64_t tag, uint32_t layer,
                                size_t rows, size_t cols, float scale) {
    std::vector<float> w(rows * cols);
    const uint64_t stream = (tag << 32) | layer;
    for (size_t i = 0; i < w.size(); ++i) {
        w[i] = counter_uniform(seed, stream, i) * scale;
    }
    return w;
}

// Queries are processed in row blocks so the score matrix stays small and the
// key gemm only covers the columns the block can causally see.
constexpr uint32_t kQueryBlock = 128;

} // namespace

namespace detail {

void apply_rope(float* row, uint32_t n_heads, uint32_t head_dim, uint32_t position,
                float rope_base) {
    for (uint32_t h = 0; h < n_heads; ++h) {
        float* hr = row + h * head_dim;
        for (uint32_t i = 0; i + 1 < head_dim; i += 2) {
            const double theta =
                position * std::pow(static_cast<double>(rope_base),
                                    -static_cast<double>(i) / head_dim);
            const float c = static_cast<float>(std::cos(theta));
            const float s = static_cast<float>(std::sin(theta));
            const float x0 = hr[i];
            const float x1 = hr[i + 1];
            hr[i] = x0 * c - x1 * s;
            hr[i + 1] = x0 * s + x1 * c;
        }
    }
}

void rerotate_key(float* row, uint32_t n_heads, uint32_t head_dim, uint32_t from, uint32_t to,
                  float rope_base) {
    if (from == to) {
        return;
    }
    for (uint32_t h = 0; h < n_heads; ++h) {
        float* hr = row + h * head_dim;
        for (uint32_t i = 0; i + 1 < head_dim; i += 2) {
            const double freq = std::pow(static_cast<double>(rope_base),
                                         -static_cast<double>(i) / head_dim);
            const double theta = (static_cast<double>(to) - static_cast<double>(from)) * freq;
            const float c = static_cast<float>(std::cos(theta));
            const float s = static_cast<float>(std::sin(theta));
            const float x0 = hr[i];
            const float x1 = hr[i + 1];
            hr[i] = x0 * c - x1 * s;
            hr[i + 1] = x0 * s + x1 * c;
        }
    }
}

float gelu(float x) {
    return 0.5f * x * (1.0f + std::tanh(0.7978845608028654f * (x + 0.044715f * x * x * x)));
}

void embed_tokens(const Model& model, std::span<const int32_t> ids, float* out) {
    const uint32_t hidden = model.config.hidden_dim;
    for (size_t i = 0; i < ids.size(); ++i) {
        const int32_t id = ids[i];
        if (id < 0 || static_cast<uint32_t>(id) >= model.config.vocab_size) {
            throw validation_error("token id " + std::to_string(id) + " out of vocabulary");
        }
        std::memcpy(out + i * hidden, model.embedding.data() + static_cast<size_t>(id) * hidden,
                    hidden * sizeof(float));
    }
}

} // namespace detail

Model build_model(const ModelConfig& config) {
    config.validate();
    const uint32_t hidden = config.hidden_dim;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hidden));

    Model m;
    m.config = config;
    m.embedding = synth_matrix(config.seed, kStreamEmbedding, 0, config.vocab_size, hidden, 1.0f);
    m.lm_head = synth_matrix(config.seed, kStreamLmHead, 0, config.vocab_size, hidden, scale);
    m.layers.resize(config.n_layers);
    for (uint32_t l = 0; l < config.n_layers; ++l) {
        LayerWeights& lw = m.layers[l];
        lw.wq = synth_matrix(config.seed, kStreamWq, l, hidden, hidden, scale);
        lw.wk = synth_matrix(config.seed, kStreamWk, l, hidden, hidden, scale);
        lw.wv = synth_matrix(config.seed, kStreamWv, l, hidden, hidden, scale);
        lw.wo = synth_matrix(config.seed, kStreamWo, l, hidden, hidden, scale);
        lw.w1 = synth_matrix(config.seed, kStreamW1, l, 4u * hidden, hidden, scale);
        lw.w2 = synth_matrix(config.seed, kStreamW2, l, hidden, 4u * hidden, scale);
    }
    return m;
}

uint64_t Model::weight_checksum() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto feed = [&](const std::vector<float>& w) {
        auto bytes = std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(w.data()),
                                              w.size() * sizeof(float));
        for (uint8_t b : bytes) {
            h ^= b;
            h *= 0x100000001b3ull;
        }
    };
    feed(embedding);
    feed(lm_head);
    for (const auto& l : layers) {
        feed(l.wq);
        feed(l.wk);
        feed(l.wv);
        feed(l.wo);
        feed(l.w1);
        feed(l.w2);
    }
    return h;
}

TokenIds image_token_ids(const Hash256& content_hash, const ModelConfig& config, uint32_t count) {
    const uint64_t h0 = fnv1a64(std::span<const uint8_t>(content_hash.data(), content_hash.size()));
    const uint64_t key = h0 ^ config.fingerprint();
    TokenIds ids(count);
    for (uint32_t i = 0; i < count; ++i) {
        ids[i] = static_cast<int32_t>(counter_hash(key, 0x696d67, i) % config.vocab_size);
    }
    return ids;
}

TokenIds image_token_ids(const Hash256& content_hash, const ModelConfig& config) {
    return image_token_ids(content_hash, config, config.image_token_count);
}

TokenIds encode_image(std::span<const uint8_t> image_bytes, const ModelConfig& config) {
    if (image_bytes.empty()) {
        throw validation_error("image bytes must be non-empty");
    }
    return image_token_ids(sha256(image_bytes), config);
}

std::vector<float> attention_row(std::span<const float> q,
                                 std::span<const std::vector<float>> keys,
                                 uint32_t head_dim) {
    if (q.size() != head_dim) {
        throw validation_error("query length does not match head_dim");
    }
    std::vector<float> scores(keys.size());
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(head_dim));
    float max_logit = -std::numeric_limits<float>::infinity();
    for (size_t j = 0; j < keys.size(); ++j) {
        if (keys[j].size() != head_dim) {
            throw validation_error("key length does not match head_dim");
        }
        float dot = 0.0f;
        for (uint32_t i = 0; i < head_dim; ++i) {
            dot += q[i] * keys[j][i];
        }
        scores[j] = dot * inv_sqrt_d;
        max_logit = std::max(max_logit, scores[j]);
    }
    float sum = 0.0f;
    for (float& s : scores) {
        s = std::exp(s - max_logit);
        sum += s;
    }
    for (float& s : scores) {
        s /= sum;
    }
    return scores;
}

namespace {

struct ExtendOutputs {
    Logits logits;
    std::vector<float>* final_hidden = nullptr; // rows for the computed tokens
    AttentionDump* capture = nullptr;
};

// Computes rows [start, start + m) of the sequence on top of `cache`, where
// start = cache.n_tokens before the call and token i sits at rotary position
// position_base + start + i.
void extend_rows(const Model& model, std::span<const int32_t> new_ids, KvTensor& cache,
                 uint32_t position_base, ExtendOutputs& out) {
    const ModelConfig& cfg = model.config;
    const uint32_t hidden = cfg.hidden_dim;
    const uint32_t heads = cfg.n_heads;
    const uint32_t dim = cfg.head_dim;
    const uint32_t m = static_cast<uint32_t>(new_ids.size());
    const uint32_t start = cache.n_tokens;
    const uint32_t n = start + m;
    const size_t row = cache.row_size();

    if (m == 0) {
        throw validation_error("no tokens to prefill");
    }

    cache.resize_tokens(n);

    std::vector<float> x(static_cast<size_t>(m) * hidden);
    detail::embed_tokens(model, new_ids, x.data());

    std::vector<float> q(x.size()), wk_buf(x.size()), attn(x.size()), proj(x.size());
    std::vector<float> ffn(static_cast<size_t>(m) * 4 * hidden);
    std::vector<float> scores(static_cast<size_t>(std::min(m, kQueryBlock)) * n);

    if (out.capture) {
        out.capture->n_layers = cfg.n_layers;
        out.capture->n_heads = heads;
        out.capture->n_tokens = n;
        out.capture->model_fingerprint = cfg.fingerprint();
        out.capture->scores.assign(static_cast<size_t>(cfg.n_layers) * heads * n * n, 0.0f);
    }

    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(dim));

    for (uint32_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = model.layers[l];

        gemm_nt(m, hidden, hidden, x.data(), hidden, lw.wq.data(), hidden, q.data(), hidden);
        gemm_nt(m, hidden, hidden, x.data(), hidden, lw.wk.data(), hidden, wk_buf.data(), hidden);
        float* kv_k = cache.k_layer(l);
        float* kv_v = cache.v_layer(l);
        for (uint32_t i = 0; i < m; ++i) {
            const uint32_t pos = position_base + start + i;
            detail::apply_rope(q.data() + static_cast<size_t>(i) * hidden, heads, dim, pos,
                               cfg.rope_base);
            detail::apply_rope(wk_buf.data() + static_cast<size_t>(i) * hidden, heads, dim, pos,
                               cfg.rope_base);
            std::memcpy(kv_k + (start + i) * row, wk_buf.data() + static_cast<size_t>(i) * hidden,
                        row * sizeof(float));
        }
        gemm_nt(m, hidden, hidden, x.data(), hidden, lw.wv.data(), hidden, wk_buf.data(), hidden);
        for (uint32_t i = 0; i < m; ++i) {
            std::memcpy(kv_v + (start + i) * row, wk_buf.data() + static_cast<size_t>(i) * hidden,
                        row * sizeof(float));
        }

        for (uint32_t b0 = 0; b0 < m; b0 += kQueryBlock) {
            const uint32_t bm = std::min(kQueryBlock, m - b0);
            const uint32_t cols = start + b0 + bm; // widest causal span in this block
            for (uint32_t h = 0; h < heads; ++h) {
                gemm_nt(bm, cols, dim,
                        q.data() + static_cast<size_t>(b0) * hidden + h * dim, hidden,
                        kv_k + h * dim, static_cast<int>(row),
                        scores.data(), cols);
                for (uint32_t r = 0; r < bm; ++r) {
                    float* s = scores.data() + static_cast<size_t>(r) * cols;
                    const uint32_t count = start + b0 + r + 1;
                    float max_logit = -std::numeric_limits<float>::infinity();
                    for (uint32_t j = 0; j < count; ++j) {
                        s[j] *= inv_sqrt_d;
                        max_logit = std::max(max_logit, s[j]);
                    }
                    float sum = 0.0f;
                    for (uint32_t j = 0; j < count; ++j) {
                        s[j] = std::exp(s[j] - max_logit);
                        sum += s[j];
                    }
                    for (uint32_t j = 0; j < count; ++j) {
                        s[j] /= sum;
                    }
                    for (uint32_t j = count; j < cols; ++j) {
                        s[j] = 0.0f;
                    }
                    if (out.capture) {
                        std::memcpy(out.capture->row(l, h, start + b0 + r), s,
                                    count * sizeof(float));
                    }
                }
                gemm_nn(bm, dim, cols,
                        scores.data(), cols,
                        kv_v + h * dim, static_cast<int>(row),
                        attn.data() + static_cast<size_t>(b0) * hidden + h * dim, hidden);
            }
        }

        gemm_nt(m, hidden, hidden, attn.data(), hidden, lw.wo.data(), hidden, proj.data(), hidden);
        for (size_t i = 0; i < x.size(); ++i) {
            x[i] += proj[i];
        }

        gemm_nt(m, 4 * hidden, hidden, x.data(), hidden, lw.w1.data(), hidden, ffn.data(),
                4 * hidden);
        for (float& f : ffn) {
            f = detail::gelu(f);
        }
        gemm_nt(m, hidden, 4 * hidden, ffn.data(), 4 * hidden, lw.w2.data(), 4 * hidden,
                proj.data(), hidden);
        for (size_t i = 0; i < x.size(); ++i) {
            x[i] += proj[i];
        }
    }

    out.logits.assign(cfg.vocab_size, 0.0f);
    gemm_nt(1, cfg.vocab_size, hidden, x.data() + static_cast<size_t>(m - 1) * hidden, hidden,
            model.lm_head.data(), hidden, out.logits.data(), cfg.vocab_size);

    if (out.final_hidden) {
        *out.final_hidden = std::move(x);
    }
}

} // namespace

PrefillResult prefill_extend(const Model& model, std::span<const int32_t> new_ids,
                             KvTensor&& cache, uint32_t position_base, AttentionDump* capture) {
    if (cache.n_tokens == 0) {
        cache = KvTensor(model.config.n_layers, 0, model.config.n_heads, model.config.head_dim);
    } else if (cache.n_layers != model.config.n_layers || cache.n_heads != model.config.n_heads ||
               cache.head_dim != model.config.head_dim) {
        throw validation_error("cache shape does not match model");
    }
    PrefillResult res;
    res.kv = std::move(cache);
    ExtendOutputs out;
    out.capture = capture;
    extend_rows(model, new_ids, res.kv, position_base, out);
    res.logits = std::move(out.logits);
    return res;
}

PrefillResult full_prefill(const Model& model, std::span<const int32_t> ids,
                           AttentionDump* capture) {
    return prefill_extend(model, ids, KvTensor(), 0, capture);
}

Logits decode_step(const Model& model, KvTensor& cache, int32_t next_token, uint32_t position,
                   uint32_t position_base) {
    if (position != position_base + cache.n_tokens) {
        throw state_error("decode position " + std::to_string(position) +
                          " does not match cache length " +
                          std::to_string(position_base + cache.n_tokens));
    }
    const int32_t ids[1] = {next_token};
    PrefillResult r = prefill_extend(model, ids, std::move(cache), position_base);
    cache = std::move(r.kv);
    return std::move(r.logits);
}

std::vector<float> mean_pooled_hidden(const Model& model, std::span<const int32_t> ids) {
    if (ids.empty()) {
        return std::vector<float>(model.config.hidden_dim, 0.0f);
    }
    KvTensor cache(model.config.n_layers, 0, model.config.n_heads, model.config.head_dim);
    std::vector<float> hidden_rows;
    ExtendOutputs out;
    out.final_hidden = &hidden_rows;
    extend_rows(model, ids, cache, 0, out);
    const uint32_t hidden = model.config.hidden_dim;
    std::vector<float> pooled(hidden, 0.0f);
    for (size_t i = 0; i < ids.size(); ++i) {
        for (uint32_t d = 0; d < hidden; ++d) {
            pooled[d] += hidden_rows[i * hidden + d];
        }
    }
    for (float& p : pooled) {
        p /= static_cast<float>(ids.size());
    }
    return pooled;
}

int32_t argmax_token(std::span<const float> logits) {
    int32_t best = 0;
    float best_v = logits.empty() ? 0.0f : logits[0];
    for (size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > best_v) {
            best_v = logits[i];
            best = static_cast<int32_t>(i);
        }
    }
    return best;
}

} // namespace mpic
