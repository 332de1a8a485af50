#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mpic/errors.h"
#include "mpic/linker.h"
#include "reference_model.h"
#include "test_util.h"

#include <algorithm>
#include <chrono>
#include <cstring>

using namespace mpic;
using testutil::make_image_entry;
using testutil::max_abs_diff;
using testutil::random_hash;
using testutil::random_ids;
using testutil::tiny_config;

namespace {

SegmentedPrompt three_segment_prompt(const Model& model, std::vector<KvCacheEntry>& entries,
                                     std::mt19937_64& rng) {
    // [Text x3][Image x5][Text x2]
    SegmentedPrompt p;
    p.user = "alice";
    p.segments.push_back(Segment::text(random_ids(rng, 3, model.config.vocab_size)));
    KvCacheEntry e = make_image_entry(model, random_hash(rng), "alice", 5, 0);
    p.segments.push_back(Segment::image(e.key, 5));
    entries.push_back(std::move(e));
    p.segments.push_back(Segment::text(random_ids(rng, 2, model.config.vocab_size)));
    return p;
}

} // namespace

TEST_CASE("select_tokens policies") {
    const Model model = build_model(tiny_config());
    std::mt19937_64 rng(1);
    std::vector<KvCacheEntry> entries;
    const SegmentedPrompt p = three_segment_prompt(model, entries, rng);

    SUBCASE("MpicK picks text plus the first k of each image") {
        const SelectionMask m = select_tokens(p, MpicKPolicy{2});
        CHECK(m.selected == std::vector<uint32_t>{0, 1, 2, 3, 4, 8, 9});
        CHECK(m.tag == PolicyTag::MpicK);
        CHECK(m.k == 2);
    }
    SUBCASE("k larger than the image clamps to the whole image") {
        const SelectionMask m = select_tokens(p, MpicKPolicy{99});
        CHECK(m.selected.size() == p.total_tokens());
    }
    SUBCASE("k=0 degenerates to TextOnly") {
        const SelectionMask m0 = select_tokens(p, MpicKPolicy{0});
        const SelectionMask mt = select_tokens(p, TextOnlyPolicy{});
        CHECK(m0.selected == mt.selected);
        CHECK(m0.selected == std::vector<uint32_t>{0, 1, 2, 8, 9});
    }
    SUBCASE("All selects every index") {
        const SelectionMask m = select_tokens(p, AllPolicy{});
        CHECK(m.selected.size() == p.total_tokens());
        CHECK(m.selected.front() == 0);
        CHECK(m.selected.back() == p.total_tokens() - 1);
    }
    SUBCASE("PrefixOnly is a pipeline marker") {
        const SelectionMask m = select_tokens(p, PrefixOnlyPolicy{});
        CHECK(m.selected.empty());
        CHECK(m.tag == PolicyTag::PrefixOnly);
    }
    SUBCASE("global k fills image tokens in order") {
        SegmentedPrompt q;
        q.user = "alice";
        KvCacheEntry a = make_image_entry(model, random_hash(rng), "alice", 5, 0);
        KvCacheEntry b = make_image_entry(model, random_hash(rng), "alice", 5, 0);
        q.segments.push_back(Segment::image(a.key, 5));
        q.segments.push_back(Segment::image(b.key, 5));
        q.segments.push_back(Segment::text(random_ids(rng, 1, model.config.vocab_size)));
        const SelectionMask m = select_tokens(q, MpicKPolicy{.k = 7, .global = true});
        CHECK(m.selected == std::vector<uint32_t>{0, 1, 2, 3, 4, 5, 6, 10});
    }
    SUBCASE("mask nesting") {
        for (uint32_t k1 = 0; k1 < 6; ++k1) {
            const SelectionMask a = select_tokens(p, MpicKPolicy{k1});
            const SelectionMask b = select_tokens(p, MpicKPolicy{k1 + 1});
            CHECK(std::includes(b.selected.begin(), b.selected.end(), a.selected.begin(),
                                a.selected.end()));
        }
    }
}

TEST_CASE("assemble_linked_cache") {
    const Model model = build_model(tiny_config());
    std::mt19937_64 rng(2);

    SUBCASE("all-text prompt is all dummy zeros") {
        SegmentedPrompt p;
        p.segments.push_back(Segment::text(random_ids(rng, 6, model.config.vocab_size)));
        const LinkedCache lc = assemble_linked_cache(p, {}, model);
        CHECK(lc.n_tokens() == 6);
        for (const Slot& s : lc.slots) {
            CHECK(s.kind == SlotKind::Dummy);
        }
        for (float x : lc.kv.k) {
            CHECK(x == 0.0f);
        }
        for (float x : lc.kv.v) {
            CHECK(x == 0.0f);
        }
    }

    SUBCASE("image rows are copied verbatim into global slots") {
        SegmentedPrompt p;
        p.segments.push_back(Segment::text(random_ids(rng, 2, model.config.vocab_size)));
        KvCacheEntry e = make_image_entry(model, random_hash(rng), "", 4, 0);
        p.segments.push_back(Segment::image(e.key, 4));
        p.segments.push_back(Segment::text(random_ids(rng, 1, model.config.vocab_size)));
        std::vector<KvCacheEntry> entries{e};

        const LinkedCache lc = assemble_linked_cache(p, entries, model);
        for (uint32_t l = 0; l < model.config.n_layers; ++l) {
            for (uint32_t j = 0; j < 4; ++j) {
                CHECK(std::memcmp(lc.kv.k_row(l, 2 + j), e.kv.k_row(l, j),
                                  lc.kv.row_size() * sizeof(float)) == 0);
                CHECK(std::memcmp(lc.kv.v_row(l, 2 + j), e.kv.v_row(l, j),
                                  lc.kv.row_size() * sizeof(float)) == 0);
            }
        }
        CHECK(lc.slots[2].kind == SlotKind::Reused);
        CHECK(lc.slots[2].local_index == 0);
        CHECK(lc.slots[0].kind == SlotKind::Dummy);
        CHECK(lc.slots[6].kind == SlotKind::Dummy);
    }

    SUBCASE("mismatches are link errors") {
        SegmentedPrompt p;
        KvCacheEntry e = make_image_entry(model, random_hash(rng), "", 4, 0);
        p.segments.push_back(Segment::image(e.key, 4));
        p.segments.push_back(Segment::text(random_ids(rng, 1, model.config.vocab_size)));

        std::vector<KvCacheEntry> none;
        CHECK_THROWS_AS(assemble_linked_cache(p, none, model), link_error);

        std::vector<KvCacheEntry> wrong_count{e};
        wrong_count[0].token_count = 3;
        wrong_count[0].kv.resize_tokens(3);
        CHECK_THROWS_AS(assemble_linked_cache(p, wrong_count, model), link_error);

        std::vector<KvCacheEntry> wrong_model{e};
        wrong_model[0].key.model_fingerprint ^= 1;
        SegmentedPrompt p2 = p;
        p2.segments[0].key.model_fingerprint ^= 1;
        CHECK_THROWS_AS(assemble_linked_cache(p2, wrong_model, model), link_error);
    }

    SUBCASE("rerotate matches a standalone prefill at the target base") {
        // RoPE is relative: a standalone prefill at base g equals the base-0
        // prefill with every key row rotated by g.
        const Hash256 h = random_hash(rng);
        KvCacheEntry e0 = make_image_entry(model, h, "", 6, 0);
        const KvCacheEntry eg = make_image_entry(model, h, "", 6, 3);

        SegmentedPrompt p;
        p.segments.push_back(Segment::text(random_ids(rng, 3, model.config.vocab_size)));
        p.segments.push_back(Segment::image(e0.key, 6));
        p.segments.push_back(Segment::text(random_ids(rng, 1, model.config.vocab_size)));
        std::vector<KvCacheEntry> entries{e0};

        const LinkedCache lc =
            assemble_linked_cache(p, entries, model, {.reposition = Reposition::Rerotate});
        for (uint32_t l = 0; l < model.config.n_layers; ++l) {
            for (uint32_t j = 0; j < 6; ++j) {
                CHECK(max_abs_diff(
                          std::span<const float>(lc.kv.k_row(l, 3 + j), lc.kv.row_size()),
                          std::span<const float>(eg.kv.k_row(l, j), eg.kv.row_size())) < 1e-5);
            }
        }
    }
}

TEST_CASE("selective_prefill with mask=All matches full_prefill") {
    const Model model = build_model(tiny_config());
    std::mt19937_64 rng(3);

    for (int trial = 0; trial < 10; ++trial) {
        auto [prompt, entries] = testutil::random_mixed_prompt(rng, model, "u");
        const TokenIds flat = prompt.flatten_ids(model.config);
        const PrefillResult oracle = full_prefill(model, flat);

        LinkedCache lc = assemble_linked_cache(prompt, entries, model);
        const SelectionMask mask = select_tokens(prompt, AllPolicy{});
        const SelectiveResult res = selective_prefill(model, prompt, mask, lc);

        CHECK(max_abs_diff(res.logits, oracle.logits) < 1e-5);
        CHECK(max_abs_diff(lc.kv.k, oracle.kv.k) < 1e-5);
        CHECK(max_abs_diff(lc.kv.v, oracle.kv.v) < 1e-5);
        CHECK(res.stats.tokens_recomputed == flat.size());
        CHECK(res.stats.engine_passes == 1);
        for (const Slot& s : lc.slots) {
            CHECK(s.kind != SlotKind::Dummy);
        }
    }
}

TEST_CASE("selective_prefill matches the straight-line reference with mask=All") {
    const Model model = build_model(tiny_config(17));
    std::mt19937_64 rng(4);
    auto [prompt, entries] = testutil::random_mixed_prompt(rng, model, "u", 24);
    const TokenIds flat = prompt.flatten_ids(model.config);

    LinkedCache lc = assemble_linked_cache(prompt, entries, model);
    const SelectionMask mask = select_tokens(prompt, AllPolicy{});
    const SelectiveResult res = selective_prefill(model, prompt, mask, lc);

    const auto ref = refmodel::ref_prefill(model, flat);
    double md = 0.0;
    for (size_t i = 0; i < res.logits.size(); ++i) {
        md = std::max(md, std::abs(res.logits[i] - ref.last_logits[i]));
    }
    CHECK(md < 1e-5);
}

TEST_CASE("selective_prefill TextOnly degenerate cases") {
    const Model model = build_model(tiny_config());
    std::mt19937_64 rng(5);

    SUBCASE("all-text prompt equals full_prefill") {
        SegmentedPrompt p;
        p.segments.push_back(Segment::text(random_ids(rng, 12, model.config.vocab_size)));
        const PrefillResult oracle = full_prefill(model, p.flatten_ids(model.config));

        LinkedCache lc = assemble_linked_cache(p, {}, model);
        const SelectionMask mask = select_tokens(p, TextOnlyPolicy{});
        const SelectiveResult res = selective_prefill(model, p, mask, lc);
        CHECK(max_abs_diff(res.logits, oracle.logits) < 1e-5);
        CHECK(max_abs_diff(lc.kv.k, oracle.kv.k) < 1e-5);
    }

    SUBCASE("TextOnly equals two-step full reuse, text leading") {
        auto [prompt, entries] = testutil::random_mixed_prompt(rng, model, "u");
        LinkedCache lc = assemble_linked_cache(prompt, entries, model);
        const SelectionMask mask = select_tokens(prompt, TextOnlyPolicy{});
        const SelectiveResult one_step = selective_prefill(model, prompt, mask, lc);
        const ReuseResult two_step = full_reuse_prefill(model, prompt, entries);

        CHECK(max_abs_diff(one_step.logits, two_step.logits) < 1e-5);
        CHECK(max_abs_diff(lc.kv.k, two_step.kv.k) < 1e-5);
        CHECK(max_abs_diff(lc.kv.v, two_step.kv.v) < 1e-5);
        CHECK(one_step.stats.engine_passes == 1);
        CHECK(two_step.stats.engine_passes == 2);
    }

    SUBCASE("TextOnly equals two-step full reuse, image leading") {
        SegmentedPrompt p;
        p.user = "u";
        KvCacheEntry e = make_image_entry(model, random_hash(rng), "u", 7, 0);
        p.segments.push_back(Segment::image(e.key, 7));
        p.segments.push_back(Segment::text(random_ids(rng, 5, model.config.vocab_size)));
        std::vector<KvCacheEntry> entries{e};

        LinkedCache lc = assemble_linked_cache(p, entries, model);
        const SelectionMask mask = select_tokens(p, TextOnlyPolicy{});
        const SelectiveResult one_step = selective_prefill(model, p, mask, lc);
        const ReuseResult two_step = full_reuse_prefill(model, p, entries);
        CHECK(max_abs_diff(one_step.logits, two_step.logits) < 1e-5);
    }
}

TEST_CASE("selective_prefill contract errors") {
    const Model model = build_model(tiny_config());
    std::mt19937_64 rng(6);
    auto [prompt, entries] = testutil::random_mixed_prompt(rng, model, "u");
    const uint32_t n = prompt.total_tokens();

    SUBCASE("final token must be selected") {
        LinkedCache lc = assemble_linked_cache(prompt, entries, model);
        SelectionMask mask = select_tokens(prompt, AllPolicy{});
        mask.selected.pop_back();
        CHECK_THROWS_AS(selective_prefill(model, prompt, mask, lc), contract_error);
    }
    SUBCASE("every dummy slot must be selected") {
        LinkedCache lc = assemble_linked_cache(prompt, entries, model);
        SelectionMask mask = select_tokens(prompt, TextOnlyPolicy{});
        // drop the first text index (a dummy slot), keep the final token
        REQUIRE(mask.selected.size() >= 2);
        mask.selected.erase(mask.selected.begin());
        CHECK_THROWS_AS(selective_prefill(model, prompt, mask, lc), contract_error);
    }
    SUBCASE("empty and out-of-range masks rejected") {
        LinkedCache lc = assemble_linked_cache(prompt, entries, model);
        SelectionMask empty;
        CHECK_THROWS_AS(selective_prefill(model, prompt, empty, lc), contract_error);
        SelectionMask oob;
        oob.selected = {n};
        CHECK_THROWS_AS(selective_prefill(model, prompt, oob, lc), contract_error);
    }
}

TEST_CASE("full_reuse_prefill") {
    const Model model = build_model(tiny_config());
    std::mt19937_64 rng(7);

    SUBCASE("all-text prompt equals full_prefill") {
        SegmentedPrompt p;
        p.segments.push_back(Segment::text(random_ids(rng, 9, model.config.vocab_size)));
        const ReuseResult r = full_reuse_prefill(model, p, {});
        const PrefillResult oracle = full_prefill(model, p.flatten_ids(model.config));
        CHECK(max_abs_diff(r.logits, oracle.logits) < 1e-5);
        CHECK(r.stats.engine_passes == 2);
    }

    SUBCASE("position-consistent entry reproduces full_prefill; stale entry diverges") {
        // [Text x4][Image x6] with the image entry sliced from the full-prompt
        // cache (positions and context both consistent).
        SegmentedPrompt p;
        p.user = "u";
        const TokenIds text = random_ids(rng, 4, model.config.vocab_size);
        const Hash256 h = random_hash(rng);
        CacheKey key{h, model.config.fingerprint(), "u"};
        p.segments.push_back(Segment::text(text));
        p.segments.push_back(Segment::image(key, 6));
        p.segments.push_back(Segment::text(random_ids(rng, 1, model.config.vocab_size)));

        const TokenIds flat = p.flatten_ids(model.config);
        const PrefillResult oracle = full_prefill(model, flat);

        KvCacheEntry consistent;
        consistent.key = key;
        consistent.kv = KvTensor(model.config.n_layers, 6, model.config.n_heads,
                                 model.config.head_dim);
        for (uint32_t l = 0; l < model.config.n_layers; ++l) {
            for (uint32_t j = 0; j < 6; ++j) {
                std::memcpy(consistent.kv.k_row(l, j), oracle.kv.k_row(l, 4 + j),
                            oracle.kv.row_size() * sizeof(float));
                std::memcpy(consistent.kv.v_row(l, j), oracle.kv.v_row(l, 4 + j),
                            oracle.kv.row_size() * sizeof(float));
            }
        }
        consistent.token_count = 6;
        consistent.position_base = 4;
        std::vector<KvCacheEntry> good{consistent};
        const ReuseResult rg = full_reuse_prefill(model, p, good);
        CHECK(max_abs_diff(rg.logits, oracle.logits) < 1e-5);

        // standalone base-0 precompute carries stale positions and no
        // cross-attention to the text: documented divergence
        std::vector<KvCacheEntry> stale{make_image_entry(model, h, "u", 6, 0)};
        const ReuseResult rs = full_reuse_prefill(model, p, stale);
        CHECK(max_abs_diff(rs.logits, oracle.logits) > 1e-6);
    }

    SUBCASE("Mpic(0) single step equals two-step full reuse") {
        auto [prompt, entries] = testutil::random_mixed_prompt(rng, model, "u");
        LinkedCache lc = assemble_linked_cache(prompt, entries, model);
        const SelectionMask mask = select_tokens(prompt, MpicKPolicy{0});
        const SelectiveResult one = selective_prefill(model, prompt, mask, lc);
        const ReuseResult two = full_reuse_prefill(model, prompt, entries);
        CHECK(max_abs_diff(one.logits, two.logits) < 1e-5);
        CHECK(one.stats.engine_passes == 1);
        CHECK(two.stats.engine_passes == 2);
    }
}

TEST_CASE("prefix_prefill") {
    const Model model = build_model(tiny_config());
    std::mt19937_64 rng(8);

    SegmentedPrompt p;
    p.segments.push_back(Segment::text(random_ids(rng, 20, model.config.vocab_size)));
    const TokenIds flat = p.flatten_ids(model.config);
    const PrefillResult oracle = full_prefill(model, flat);

    auto make_prefix_entry = [&](uint32_t m) {
        const std::span<const int32_t> pre(flat.data(), m);
        PrefillResult r = full_prefill(model, pre);
        KvCacheEntry e;
        e.key = make_text_key(pre, model.config.fingerprint(), "");
        e.key.model_fingerprint = model.config.fingerprint();
        e.kv = std::move(r.kv);
        e.token_count = m;
        e.position_base = 0;
        return e;
    };

    SUBCASE("exact prefix is lossless") {
        const KvCacheEntry e = make_prefix_entry(8);
        const ReuseResult r = prefix_prefill(model, p, e);
        CHECK(max_abs_diff(r.logits, oracle.logits) < 1e-6);
        CHECK(!r.stats.fallback);
        CHECK(r.stats.tokens_recomputed == 12);
        // shared prefix rows are bit-identical
        for (uint32_t l = 0; l < model.config.n_layers; ++l) {
            CHECK(std::memcmp(r.kv.k_row(l, 0), oracle.kv.k_row(l, 0),
                              8 * r.kv.row_size() * sizeof(float)) == 0);
        }
    }

    SUBCASE("diverging prefix falls back to full recompute") {
        KvCacheEntry e = make_prefix_entry(8);
        // claim a different token sequence: flip token 0
        TokenIds other = flat;
        other[0] = (other[0] + 1) % static_cast<int32_t>(model.config.vocab_size);
        e.key = make_text_key(std::span<const int32_t>(other.data(), 8),
                              model.config.fingerprint(), "");
        e.key.model_fingerprint = model.config.fingerprint();
        const ReuseResult r = prefix_prefill(model, p, e);
        CHECK(r.stats.fallback);
        CHECK(r.stats.tokens_recomputed == 20);
        CHECK(max_abs_diff(r.logits, oracle.logits) < 1e-6);
    }

    SUBCASE("prefix of n-1 tokens computes exactly one token") {
        const KvCacheEntry e = make_prefix_entry(19);
        const ReuseResult r = prefix_prefill(model, p, e);
        CHECK(r.stats.tokens_recomputed == 1);
        CHECK(max_abs_diff(r.logits, oracle.logits) < 1e-6);
    }

    SUBCASE("foreign fingerprint is a link error") {
        KvCacheEntry e = make_prefix_entry(8);
        e.key.model_fingerprint ^= 0xdead;
        CHECK_THROWS_AS(prefix_prefill(model, p, e), link_error);
    }
}

TEST_CASE("cacheblend_select") {
    const Model model = build_model(tiny_config());
    std::mt19937_64 rng(9);
    auto [prompt, entries] = testutil::random_mixed_prompt(rng, model, "u");
    const uint32_t n = prompt.total_tokens();

    SUBCASE("r=100 selects everything and matches full prefill") {
        const SelectionMask m = cacheblend_select(model, prompt, entries, 100.0);
        const SelectionMask all = select_tokens(prompt, AllPolicy{});
        CHECK(m.selected == all.selected);

        LinkedCache lc = assemble_linked_cache(prompt, entries, model);
        const SelectiveResult res = selective_prefill(model, prompt, m, lc);
        const PrefillResult oracle = full_prefill(model, prompt.flatten_ids(model.config));
        CHECK(max_abs_diff(res.logits, oracle.logits) < 1e-5);
    }

    SUBCASE("r=0 equals the Mpic(0) mask") {
        const SelectionMask m = cacheblend_select(model, prompt, entries, 0.0);
        const SelectionMask m0 = select_tokens(prompt, MpicKPolicy{0});
        CHECK(m.selected == m0.selected);
    }

    SUBCASE("invalid r rejected") {
        CHECK_THROWS_AS(cacheblend_select(model, prompt, entries, -1.0), validation_error);
        CHECK_THROWS_AS(cacheblend_select(model, prompt, entries, 101.0), validation_error);
    }

    SUBCASE("position-consistent caches give zero deviation, ties by lowest index") {
        // precompute each image in place (at its true global offset)
        SegmentedPrompt p;
        p.user = "u";
        std::vector<KvCacheEntry> in_place;
        const TokenIds text = random_ids(rng, 3, model.config.vocab_size);
        p.segments.push_back(Segment::text(text));
        const Hash256 h = random_hash(rng);
        KvCacheEntry e = make_image_entry(model, h, "u", 6, /*base=*/3);
        p.segments.push_back(Segment::image(e.key, 6));
        in_place.push_back(std::move(e));
        p.segments.push_back(Segment::text(random_ids(rng, 2, model.config.vocab_size)));

        const uint32_t total = p.total_tokens();
        const double r = 40.0;
        const SelectionMask m = cacheblend_select(model, p, in_place, r);
        const uint32_t budget = std::min<uint32_t>(
            6, static_cast<uint32_t>(std::ceil(r * total / 100.0)));
        // ties broken by lowest index: the first `budget` image tokens
        std::vector<uint32_t> expect = {0, 1, 2, total - 2, total - 1};
        for (uint32_t j = 0; j < budget; ++j) {
            expect.push_back(3 + j);
        }
        std::sort(expect.begin(), expect.end());
        CHECK(m.selected == expect);
    }

    (void)n;
}

TEST_CASE("monotone work: recompute count and wall time grow with the mask") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.head_dim = 32;
    cfg.hidden_dim = 128;
    cfg.vocab_size = 512;
    cfg.image_token_count = 64;
    cfg.seed = 3;
    const Model model = build_model(cfg);
    std::mt19937_64 rng(10);

    SegmentedPrompt p;
    p.user = "u";
    std::vector<KvCacheEntry> entries;
    p.segments.push_back(Segment::text(random_ids(rng, 32, cfg.vocab_size)));
    for (int i = 0; i < 4; ++i) {
        KvCacheEntry e = make_image_entry(model, random_hash(rng), "u", 64, 0);
        p.segments.push_back(Segment::image(e.key, 64));
        entries.push_back(std::move(e));
    }
    p.segments.push_back(Segment::text(random_ids(rng, 32, cfg.vocab_size)));

    auto median_wall = [&](const SelectionMask& mask) {
        std::vector<double> times;
        for (int rep = 0; rep < 11; ++rep) {
            LinkedCache lc = assemble_linked_cache(p, entries, model);
            const SelectiveResult r = selective_prefill(model, p, mask, lc);
            CHECK(r.stats.tokens_recomputed == mask.selected.size());
            times.push_back(r.stats.wall_ms);
        }
        std::sort(times.begin(), times.end());
        return times[times.size() / 2];
    };

    const SelectionMask m0 = select_tokens(p, MpicKPolicy{0});
    const SelectionMask m16 = select_tokens(p, MpicKPolicy{16});
    const SelectionMask mall = select_tokens(p, AllPolicy{});
    REQUIRE(m0.selected.size() < m16.selected.size());
    REQUIRE(m16.selected.size() < mall.selected.size());

    const double t0 = median_wall(m0);
    const double t16 = median_wall(m16);
    const double tall = median_wall(mall);
    CHECK(t0 <= t16);
    CHECK(t16 <= tall);
}

TEST_CASE("append_cached_segment keeps the decode chain consistent") {
    const Model model = build_model(tiny_config());
    std::mt19937_64 rng(11);

    const TokenIds prompt = random_ids(rng, 10, model.config.vocab_size);
    PrefillResult r = full_prefill(model, prompt);
    KvTensor cache = std::move(r.kv);

    const KvCacheEntry e = make_image_entry(model, random_hash(rng), "dynamic", 8, 0);
    append_cached_segment(cache, e, model);
    CHECK(cache.n_tokens == 18);
    // appended rows are verbatim copies
    for (uint32_t l = 0; l < model.config.n_layers; ++l) {
        CHECK(std::memcmp(cache.k_row(l, 10), e.kv.k_row(l, 0),
                          8 * cache.row_size() * sizeof(float)) == 0);
    }

    // decode continues at the new global position, deterministically
    KvTensor cache2 = cache;
    const Logits a = decode_step(model, cache, 5, 18);
    const Logits b = decode_step(model, cache2, 5, 18);
    CHECK(a == b);
    CHECK(cache.n_tokens == 19);

    // wrong-position decode still rejected
    CHECK_THROWS_AS(decode_step(model, cache, 5, 18), state_error);
}
