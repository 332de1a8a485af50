#pragma once

#include "mpic/cache.h"
#include "mpic/model.h"

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace mpic {

enum class SegmentKind : uint8_t { Text, Image };

struct Segment {
    SegmentKind kind = SegmentKind::Text;
    TokenIds tokens;         // text segments
    CacheKey key;            // image segments
    uint32_t token_count = 0; // image segments

    uint32_t length() const {
        return kind == SegmentKind::Text ? static_cast<uint32_t>(tokens.size()) : token_count;
    }
    static Segment text(TokenIds ids) {
        Segment s;
        s.kind = SegmentKind::Text;
        s.tokens = std::move(ids);
        return s;
    }
    static Segment image(CacheKey key, uint32_t token_count) {
        Segment s;
        s.kind = SegmentKind::Image;
        s.key = std::move(key);
        s.token_count = token_count;
        return s;
    }
};

struct SegmentedPrompt {
    std::vector<Segment> segments;
    std::string user;

    uint32_t total_tokens() const;
    void validate() const; // throws validation_error

    // Any image segment's ids are recovered from its content hash, so a key is
    // enough to re-embed selected image tokens.
    TokenIds flatten_ids(const ModelConfig& config) const;

    std::vector<uint32_t> text_indices() const;
    // [start, end) per segment
    std::vector<std::pair<uint32_t, uint32_t>> bounds() const;
};

enum class PolicyTag : uint8_t { MpicK, CacheBlendR, TextOnly, All, PrefixOnly };

struct MpicKPolicy {
    uint32_t k = 32;
    // false: k counts tokens at the start of each image segment;
    // true: k is a single budget over the concatenation of all image tokens.
    bool global = false;
};
struct TextOnlyPolicy {};
struct AllPolicy {};
struct PrefixOnlyPolicy {};
using SelectionPolicy = std::variant<MpicKPolicy, TextOnlyPolicy, AllPolicy, PrefixOnlyPolicy>;

struct SelectionMask {
    std::vector<uint32_t> selected; // sorted, unique, global token indices
    PolicyTag tag = PolicyTag::TextOnly;
    uint32_t k = 0;
    double r = 0.0;

    bool contains(uint32_t index) const;
    void ensure(uint32_t index); // insert if absent, keeping the order
};

SelectionMask select_tokens(const SegmentedPrompt& prompt, const SelectionPolicy& policy);

enum class Reposition : uint8_t {
    AsStored, // reused keys keep the rotary encoding of their precompute position
    Rerotate, // delta-rotate reused keys to their new global positions at link time
};

struct LinkOptions {
    Reposition reposition = Reposition::AsStored;
};

enum class SlotKind : uint8_t { Dummy, Reused, Recomputed };

struct Slot {
    SlotKind kind = SlotKind::Dummy;
    uint32_t entry_index = 0; // index into the fetched list, for Reused
    uint32_t local_index = 0; // row within that entry
};

// The assembled full-prompt cache: reused image slices at their stored
// rotations plus zero-filled dummy slots for every text token.
struct LinkedCache {
    KvTensor kv;
    std::vector<Slot> slots;

    uint32_t n_tokens() const { return kv.n_tokens; }
};

LinkedCache assemble_linked_cache(const SegmentedPrompt& prompt,
                                  std::span<const KvCacheEntry> fetched, const Model& model,
                                  const LinkOptions& options = {});

struct PrefillStats {
    uint32_t tokens_recomputed = 0;
    uint32_t engine_passes = 1;
    uint32_t n_tokens = 0;
    double wall_ms = 0.0;
    bool fallback = false;
};

struct SelectiveResult {
    Logits logits;
    PrefillStats stats;
};

// Single-step selective attention over the linked cache: Q/K/V are recomputed
// for the selected tokens only (at their true global positions), scattered
// into K_link/V_link, and each selected row attends causally over the full
// prefix. The finished cache is left in `linked`.
SelectiveResult selective_prefill(const Model& model, const SegmentedPrompt& prompt,
                                  const SelectionMask& mask, LinkedCache& linked);

struct ReuseResult {
    KvTensor kv;
    Logits logits;
    PrefillStats stats;
};

// Two-pass baseline: pass 1 computes the text rows over the linked cache,
// pass 2 reruns the final prompt token over the completed cache to produce
// the first output logits.
ReuseResult full_reuse_prefill(const Model& model, const SegmentedPrompt& prompt,
                               std::span<const KvCacheEntry> fetched,
                               const LinkOptions& options = {});

// Lossless prefix reuse: `prefix_entry` must hold the cache of an exact
// token-level prefix (position_base 0). On token mismatch the whole prompt is
// recomputed (stats.fallback set).
ReuseResult prefix_prefill(const Model& model, const SegmentedPrompt& prompt,
                           const KvCacheEntry& prefix_entry);

// Key for a cached token-level prefix: content hash of the little-endian id bytes.
CacheKey make_text_key(std::span<const int32_t> ids, uint64_t model_fingerprint,
                       const std::string& ns);

// CacheBlend baseline policy: recompute layer-1 K for all cached tokens at
// their true positions, rank by L1 deviation from the stored rows, and select
// the top ceil(r% * n) cached tokens plus all text tokens.
SelectionMask cacheblend_select(const Model& model, const SegmentedPrompt& prompt,
                                std::span<const KvCacheEntry> fetched, double r_percent);

// Appends a cached segment (e.g. a retrieved dynamic-library entry) to the end
// of a request cache; rows keep their stored rotation under AsStored.
void append_cached_segment(KvTensor& cache, const KvCacheEntry& entry, const Model& model,
                           const LinkOptions& options = {});

} // namespace mpic
