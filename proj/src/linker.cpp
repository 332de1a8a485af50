#include "mpic/linker.h"

#include "mpic/errors.h"
#include "mpic/matmul.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>

namespace mpic {

namespace {

constexpr uint32_t kQueryBlock = 128;

double ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
}

const KvCacheEntry* find_entry(std::span<const KvCacheEntry> fetched, const CacheKey& key) {
    for (const auto& e : fetched) {
        if (e.key == key) {
            return &e;
        }
    }
    return nullptr;
}

// Recomputes Q/K/V for the rows in `positions` (ascending global indices of
// `flat_ids`), scatters K/V into the linked cache, and runs causal attention
// of those rows over the full prefix. Returns logits of the last given row.
Logits selective_core(const Model& model, const TokenIds& flat_ids,
                      std::span<const uint32_t> positions, LinkedCache& linked) {
    const ModelConfig& cfg = model.config;
    const uint32_t hidden = cfg.hidden_dim;
    const uint32_t heads = cfg.n_heads;
    const uint32_t dim = cfg.head_dim;
    const uint32_t m = static_cast<uint32_t>(positions.size());
    const size_t row = linked.kv.row_size();

    TokenIds sel_ids(m);
    for (uint32_t i = 0; i < m; ++i) {
        sel_ids[i] = flat_ids[positions[i]];
    }

    std::vector<float> x(static_cast<size_t>(m) * hidden);
    detail::embed_tokens(model, sel_ids, x.data());

    std::vector<float> q(x.size()), kv_buf(x.size()), attn(x.size()), proj(x.size());
    std::vector<float> ffn(static_cast<size_t>(m) * 4 * hidden);
    const uint32_t max_cols = positions[m - 1] + 1;
    std::vector<float> scores(static_cast<size_t>(std::min(m, kQueryBlock)) * max_cols);

    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(dim));

    for (uint32_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = model.layers[l];
        float* kv_k = linked.kv.k_layer(l);
        float* kv_v = linked.kv.v_layer(l);

        gemm_nt(m, hidden, hidden, x.data(), hidden, lw.wq.data(), hidden, q.data(), hidden);
        gemm_nt(m, hidden, hidden, x.data(), hidden, lw.wk.data(), hidden, kv_buf.data(), hidden);
        for (uint32_t i = 0; i < m; ++i) {
            detail::apply_rope(q.data() + static_cast<size_t>(i) * hidden, heads, dim,
                               positions[i], cfg.rope_base);
            detail::apply_rope(kv_buf.data() + static_cast<size_t>(i) * hidden, heads, dim,
                               positions[i], cfg.rope_base);
            std::memcpy(kv_k + positions[i] * row,
                        kv_buf.data() + static_cast<size_t>(i) * hidden, row * sizeof(float));
        }
        gemm_nt(m, hidden, hidden, x.data(), hidden, lw.wv.data(), hidden, kv_buf.data(), hidden);
        for (uint32_t i = 0; i < m; ++i) {
            std::memcpy(kv_v + positions[i] * row,
                        kv_buf.data() + static_cast<size_t>(i) * hidden, row * sizeof(float));
        }

        for (uint32_t b0 = 0; b0 < m; b0 += kQueryBlock) {
            const uint32_t bm = std::min(kQueryBlock, m - b0);
            const uint32_t cols = positions[b0 + bm - 1] + 1;
            for (uint32_t h = 0; h < heads; ++h) {
                gemm_nt(bm, cols, dim,
                        q.data() + static_cast<size_t>(b0) * hidden + h * dim, hidden,
                        kv_k + h * dim, static_cast<int>(row),
                        scores.data(), cols);
                for (uint32_t r = 0; r < bm; ++r) {
                    float* s = scores.data() + static_cast<size_t>(r) * cols;
                    const uint32_t count = positions[b0 + r] + 1;
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

    Logits logits(cfg.vocab_size, 0.0f);
    gemm_nt(1, cfg.vocab_size, hidden, x.data() + static_cast<size_t>(m - 1) * hidden, hidden,
            model.lm_head.data(), hidden, logits.data(), cfg.vocab_size);
    return logits;
}

} // namespace

uint32_t SegmentedPrompt::total_tokens() const {
    uint32_t n = 0;
    for (const auto& s : segments) {
        n += s.length();
    }
    return n;
}

void SegmentedPrompt::validate() const {
    if (segments.empty()) {
        throw validation_error("prompt needs at least one segment");
    }
    for (const auto& s : segments) {
        if (s.length() == 0) {
            throw validation_error(s.kind == SegmentKind::Text
                                       ? "empty text segment"
                                       : "image segment token_count must be positive");
        }
    }
}

TokenIds SegmentedPrompt::flatten_ids(const ModelConfig& config) const {
    TokenIds ids;
    ids.reserve(total_tokens());
    for (const auto& s : segments) {
        if (s.kind == SegmentKind::Text) {
            ids.insert(ids.end(), s.tokens.begin(), s.tokens.end());
        } else {
            const TokenIds img = image_token_ids(s.key.content_hash, config, s.token_count);
            ids.insert(ids.end(), img.begin(), img.end());
        }
    }
    return ids;
}

std::vector<uint32_t> SegmentedPrompt::text_indices() const {
    std::vector<uint32_t> out;
    uint32_t at = 0;
    for (const auto& s : segments) {
        if (s.kind == SegmentKind::Text) {
            for (uint32_t i = 0; i < s.length(); ++i) {
                out.push_back(at + i);
            }
        }
        at += s.length();
    }
    return out;
}

std::vector<std::pair<uint32_t, uint32_t>> SegmentedPrompt::bounds() const {
    std::vector<std::pair<uint32_t, uint32_t>> out;
    uint32_t at = 0;
    for (const auto& s : segments) {
        out.emplace_back(at, at + s.length());
        at += s.length();
    }
    return out;
}

bool SelectionMask::contains(uint32_t index) const {
    return std::binary_search(selected.begin(), selected.end(), index);
}

void SelectionMask::ensure(uint32_t index) {
    auto it = std::lower_bound(selected.begin(), selected.end(), index);
    if (it == selected.end() || *it != index) {
        selected.insert(it, index);
    }
}

SelectionMask select_tokens(const SegmentedPrompt& prompt, const SelectionPolicy& policy) {
    prompt.validate();
    SelectionMask mask;
    const auto bounds = prompt.bounds();

    if (std::holds_alternative<AllPolicy>(policy)) {
        mask.tag = PolicyTag::All;
        mask.selected.resize(prompt.total_tokens());
        for (uint32_t i = 0; i < mask.selected.size(); ++i) {
            mask.selected[i] = i;
        }
        return mask;
    }
    if (std::holds_alternative<PrefixOnlyPolicy>(policy)) {
        mask.tag = PolicyTag::PrefixOnly;
        return mask;
    }

    const bool text_only = std::holds_alternative<TextOnlyPolicy>(policy);
    const MpicKPolicy* mpic = std::get_if<MpicKPolicy>(&policy);
    mask.tag = text_only ? PolicyTag::TextOnly : PolicyTag::MpicK;
    if (mpic) {
        mask.k = mpic->k;
    }

    uint32_t global_budget = mpic && mpic->global ? mpic->k : 0;
    for (size_t si = 0; si < prompt.segments.size(); ++si) {
        const auto& seg = prompt.segments[si];
        const auto [start, end] = bounds[si];
        if (seg.kind == SegmentKind::Text) {
            for (uint32_t i = start; i < end; ++i) {
                mask.selected.push_back(i);
            }
        } else if (mpic) {
            const uint32_t len = end - start;
            uint32_t take;
            if (mpic->global) {
                take = std::min(global_budget, len);
                global_budget -= take;
            } else {
                take = std::min(mpic->k, len);
            }
            for (uint32_t i = 0; i < take; ++i) {
                mask.selected.push_back(start + i);
            }
        }
    }
    std::sort(mask.selected.begin(), mask.selected.end());
    return mask;
}

LinkedCache assemble_linked_cache(const SegmentedPrompt& prompt,
                                  std::span<const KvCacheEntry> fetched, const Model& model,
                                  const LinkOptions& options) {
    prompt.validate();
    const ModelConfig& cfg = model.config;
    const uint64_t fpr = cfg.fingerprint();
    const uint32_t n = prompt.total_tokens();

    LinkedCache linked;
    linked.kv = KvTensor(cfg.n_layers, n, cfg.n_heads, cfg.head_dim);
    linked.slots.assign(n, Slot{});

    const auto bounds = prompt.bounds();
    const size_t row = linked.kv.row_size();
    for (size_t si = 0; si < prompt.segments.size(); ++si) {
        const auto& seg = prompt.segments[si];
        if (seg.kind != SegmentKind::Image) {
            continue;
        }
        const KvCacheEntry* entry = find_entry(fetched, seg.key);
        if (!entry) {
            throw link_error("no fetched entry for image " + seg.key.hex());
        }
        if (entry->token_count != seg.token_count) {
            throw link_error("token_count mismatch for " + seg.key.hex() + ": entry has " +
                             std::to_string(entry->token_count) + ", segment needs " +
                             std::to_string(seg.token_count));
        }
        if (entry->key.model_fingerprint != fpr) {
            throw link_error("model fingerprint mismatch for " + seg.key.hex());
        }
        if (entry->kv.n_layers != cfg.n_layers || entry->kv.n_heads != cfg.n_heads ||
            entry->kv.head_dim != cfg.head_dim) {
            throw link_error("entry tensor shape does not match model");
        }
        const uint32_t start = bounds[si].first;
        const uint32_t entry_index = static_cast<uint32_t>(entry - fetched.data());
        for (uint32_t l = 0; l < cfg.n_layers; ++l) {
            for (uint32_t j = 0; j < seg.token_count; ++j) {
                float* kdst = linked.kv.k_row(l, start + j);
                std::memcpy(kdst, entry->kv.k_row(l, j), row * sizeof(float));
                if (options.reposition == Reposition::Rerotate) {
                    detail::rerotate_key(kdst, cfg.n_heads, cfg.head_dim,
                                         entry->position_base + j, start + j, cfg.rope_base);
                }
                std::memcpy(linked.kv.v_row(l, start + j), entry->kv.v_row(l, j),
                            row * sizeof(float));
            }
        }
        for (uint32_t j = 0; j < seg.token_count; ++j) {
            linked.slots[start + j] = Slot{SlotKind::Reused, entry_index, j};
        }
    }
    return linked;
}

SelectiveResult selective_prefill(const Model& model, const SegmentedPrompt& prompt,
                                  const SelectionMask& mask, LinkedCache& linked) {
    const auto t0 = std::chrono::steady_clock::now();
    const uint32_t n = prompt.total_tokens();
    if (linked.n_tokens() != n) {
        throw contract_error("linked cache length does not match prompt");
    }
    if (mask.selected.empty()) {
        throw contract_error("selection mask is empty");
    }
    if (!std::is_sorted(mask.selected.begin(), mask.selected.end()) ||
        std::adjacent_find(mask.selected.begin(), mask.selected.end()) != mask.selected.end()) {
        throw contract_error("selection mask must be sorted and unique");
    }
    if (mask.selected.back() >= n) {
        throw contract_error("selection mask index out of range");
    }
    if (mask.selected.back() != n - 1) {
        throw contract_error("final prompt token must be selected");
    }
    for (uint32_t i = 0; i < n; ++i) {
        if (linked.slots[i].kind == SlotKind::Dummy && !mask.contains(i)) {
            throw contract_error("dummy slot " + std::to_string(i) + " not selected");
        }
    }

    const TokenIds flat = prompt.flatten_ids(model.config);
    SelectiveResult res;
    res.logits = selective_core(model, flat, mask.selected, linked);
    for (uint32_t idx : mask.selected) {
        linked.slots[idx] = Slot{SlotKind::Recomputed, 0, 0};
    }
    res.stats.tokens_recomputed = static_cast<uint32_t>(mask.selected.size());
    res.stats.engine_passes = 1;
    res.stats.n_tokens = n;
    res.stats.wall_ms = ms_since(t0);
    return res;
}

ReuseResult full_reuse_prefill(const Model& model, const SegmentedPrompt& prompt,
                               std::span<const KvCacheEntry> fetched,
                               const LinkOptions& options) {
    const auto t0 = std::chrono::steady_clock::now();
    LinkedCache linked = assemble_linked_cache(prompt, fetched, model, options);
    const TokenIds flat = prompt.flatten_ids(model.config);
    const uint32_t n = linked.n_tokens();

    // pass 1: recompute the text rows over the linked cache
    const std::vector<uint32_t> text = prompt.text_indices();
    if (!text.empty()) {
        selective_core(model, flat, text, linked);
        for (uint32_t idx : text) {
            linked.slots[idx] = Slot{SlotKind::Recomputed, 0, 0};
        }
    }

    // pass 2: rerun the final prompt token over the completed cache
    const uint32_t last[1] = {n - 1};
    ReuseResult res;
    res.logits = selective_core(model, flat, last, linked);
    linked.slots[n - 1] = Slot{SlotKind::Recomputed, 0, 0};
    res.kv = std::move(linked.kv);
    res.stats.tokens_recomputed = static_cast<uint32_t>(text.size()) + 1;
    res.stats.engine_passes = 2;
    res.stats.n_tokens = n;
    res.stats.wall_ms = ms_since(t0);
    return res;
}

CacheKey make_text_key(std::span<const int32_t> ids, uint64_t model_fingerprint,
                       const std::string& ns) {
    std::vector<uint8_t> bytes;
    bytes.reserve(ids.size() * 4);
    for (int32_t id : ids) {
        const uint32_t u = static_cast<uint32_t>(id);
        bytes.push_back(static_cast<uint8_t>(u));
        bytes.push_back(static_cast<uint8_t>(u >> 8));
        bytes.push_back(static_cast<uint8_t>(u >> 16));
        bytes.push_back(static_cast<uint8_t>(u >> 24));
    }
    CacheKey key;
    key.content_hash = sha256(bytes);
    key.model_fingerprint = model_fingerprint;
    key.ns = ns;
    return key;
}

ReuseResult prefix_prefill(const Model& model, const SegmentedPrompt& prompt,
                           const KvCacheEntry& prefix_entry) {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelConfig& cfg = model.config;
    if (prefix_entry.key.model_fingerprint != cfg.fingerprint()) {
        throw link_error("prefix entry was computed by a different model");
    }
    const TokenIds flat = prompt.flatten_ids(cfg);
    const uint32_t n = static_cast<uint32_t>(flat.size());
    const uint32_t m = prefix_entry.token_count;

    const bool usable =
        m >= 1 && m < n && prefix_entry.position_base == 0 &&
        prefix_entry.kv.n_layers == cfg.n_layers && prefix_entry.kv.n_heads == cfg.n_heads &&
        prefix_entry.kv.head_dim == cfg.head_dim &&
        make_text_key(std::span<const int32_t>(flat.data(), m), 0, "").content_hash ==
            prefix_entry.key.content_hash;

    ReuseResult res;
    if (!usable) {
        // prefix mismatch: recompute everything
        PrefillResult full = full_prefill(model, flat);
        res.kv = std::move(full.kv);
        res.logits = std::move(full.logits);
        res.stats.tokens_recomputed = n;
        res.stats.fallback = true;
    } else {
        KvTensor cache = prefix_entry.kv;
        PrefillResult r = prefill_extend(
            model, std::span<const int32_t>(flat.data() + m, n - m), std::move(cache), 0);
        res.kv = std::move(r.kv);
        res.logits = std::move(r.logits);
        res.stats.tokens_recomputed = n - m;
    }
    res.stats.engine_passes = 1;
    res.stats.n_tokens = n;
    res.stats.wall_ms = ms_since(t0);
    return res;
}

SelectionMask cacheblend_select(const Model& model, const SegmentedPrompt& prompt,
                                std::span<const KvCacheEntry> fetched, double r_percent) {
    if (r_percent < 0.0 || r_percent > 100.0) {
        throw validation_error("r must be in [0, 100]");
    }
    prompt.validate();
    const ModelConfig& cfg = model.config;
    const uint32_t n = prompt.total_tokens();
    const TokenIds flat = prompt.flatten_ids(cfg);
    const auto bounds = prompt.bounds();

    // cached (image) token indices and the stored K rows they map to
    std::vector<uint32_t> cached;
    std::vector<const float*> stored_rows;
    for (size_t si = 0; si < prompt.segments.size(); ++si) {
        const auto& seg = prompt.segments[si];
        if (seg.kind != SegmentKind::Image) {
            continue;
        }
        const KvCacheEntry* entry = find_entry(fetched, seg.key);
        if (!entry) {
            throw link_error("no fetched entry for image " + seg.key.hex());
        }
        if (entry->token_count != seg.token_count) {
            throw link_error("token_count mismatch for " + seg.key.hex());
        }
        for (uint32_t j = 0; j < seg.token_count; ++j) {
            cached.push_back(bounds[si].first + j);
            stored_rows.push_back(entry->kv.k_row(0, j));
        }
    }

    SelectionMask mask;
    mask.tag = PolicyTag::CacheBlendR;
    mask.r = r_percent;
    mask.selected = prompt.text_indices();

    if (!cached.empty()) {
        const uint32_t hidden = cfg.hidden_dim;
        const size_t row = static_cast<size_t>(cfg.n_heads) * cfg.head_dim;
        const uint32_t c = static_cast<uint32_t>(cached.size());

        // layer-1 K recomputation at the true global positions
        TokenIds ids(c);
        for (uint32_t i = 0; i < c; ++i) {
            ids[i] = flat[cached[i]];
        }
        std::vector<float> x(static_cast<size_t>(c) * hidden);
        detail::embed_tokens(model, ids, x.data());
        std::vector<float> k(x.size());
        gemm_nt(c, hidden, hidden, x.data(), hidden, model.layers[0].wk.data(), hidden, k.data(),
                hidden);

        std::vector<std::pair<double, uint32_t>> ranked(c);
        for (uint32_t i = 0; i < c; ++i) {
            float* kr = k.data() + static_cast<size_t>(i) * hidden;
            detail::apply_rope(kr, cfg.n_heads, cfg.head_dim, cached[i], cfg.rope_base);
            double dev = 0.0;
            for (size_t d = 0; d < row; ++d) {
                dev += std::abs(static_cast<double>(kr[d]) - stored_rows[i][d]);
            }
            ranked[i] = {dev, cached[i]};
        }
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) {
                return a.first > b.first; // largest deviation first
            }
            return a.second < b.second; // ties: lowest token index
        });

        const uint32_t budget = std::min<uint32_t>(
            c, static_cast<uint32_t>(std::ceil(r_percent * n / 100.0)));
        for (uint32_t i = 0; i < budget; ++i) {
            mask.selected.push_back(ranked[i].second);
        }
    }

    std::sort(mask.selected.begin(), mask.selected.end());
    return mask;
}

void append_cached_segment(KvTensor& cache, const KvCacheEntry& entry, const Model& model,
                           const LinkOptions& options) {
    const ModelConfig& cfg = model.config;
    if (entry.kv.n_layers != cfg.n_layers || entry.kv.n_heads != cfg.n_heads ||
        entry.kv.head_dim != cfg.head_dim) {
        throw link_error("entry tensor shape does not match model");
    }
    if (entry.key.model_fingerprint != cfg.fingerprint()) {
        throw link_error("model fingerprint mismatch for appended segment");
    }
    const uint32_t start = cache.n_tokens;
    const size_t row = cache.row_size();
    cache.resize_tokens(start + entry.token_count);
    for (uint32_t l = 0; l < cfg.n_layers; ++l) {
        for (uint32_t j = 0; j < entry.token_count; ++j) {
            float* kdst = cache.k_row(l, start + j);
            std::memcpy(kdst, entry.kv.k_row(l, j), row * sizeof(float));
            if (options.reposition == Reposition::Rerotate) {
                detail::rerotate_key(kdst, cfg.n_heads, cfg.head_dim, entry.position_base + j,
                                     start + j, cfg.rope_base);
            }
            std::memcpy(cache.v_row(l, start + j), entry.kv.v_row(l, j), row * sizeof(float));
        }
    }
}

} // namespace mpic
