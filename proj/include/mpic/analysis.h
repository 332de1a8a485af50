#pragma once

#include "mpic/linker.h"
#include "mpic/model.h"

#include <filesystem>
#include <utility>
#include <vector>

namespace mpic {

// Runs a capturing prefill of the prompt and attaches segment metadata.
AttentionDump capture_dump(const Model& model, const SegmentedPrompt& prompt);

// Dump container: "MPIC" | u32 version | u64 model_fingerprint |
// u32 section_tag=2 | dims | segment table | f32 scores | u32 crc32.
void write_dump(const AttentionDump& dump, const std::filesystem::path& path);
AttentionDump read_dump(const std::filesystem::path& path);

struct CdfResult {
    std::vector<std::pair<float, double>> points; // (score, cumulative fraction)
    double fraction_above = 0.0;                  // strictly greater than the threshold
};

// Empirical CDF of the image-token attention scores received by the first
// output token, pooled across layers and heads.
CdfResult attention_cdf(const AttentionDump& dump, double threshold);

// Per-layer head-averaged prefix sums of the first-output-token scores over
// one segment's columns.
std::vector<std::vector<double>> cumulative_attention(const AttentionDump& dump,
                                                      uint32_t segment_index);

struct TokenImportanceRow {
    uint32_t token_index = 0;      // row within the stored entry
    double k_distance = 0.0;       // L1 distance summed over layers
    uint32_t layers_in_top50 = 0;  // layers where this token ranks in the top 50
    double mean_attention = 0.0;   // head/layer-averaged first-output score, if a dump is given
};

struct TokenImportanceTable {
    std::vector<TokenImportanceRow> rows;                 // sorted by k_distance desc, index asc
    std::vector<std::vector<double>> per_layer_distance;  // [layer][token]
};

TokenImportanceTable kv_distance_rank(const KvCacheEntry& stored, const KvTensor& recomputed,
                                      const AttentionDump* dump = nullptr,
                                      uint32_t segment_start = 0);

struct PercentileStats {
    double mean = 0.0;
    double stddev = 0.0;
};

// Percentile rank (mean-rank tie convention) of the first image token's score
// within the first-output-token row, aggregated across heads, per layer.
std::vector<PercentileStats> percentile_rank(const AttentionDump& dump);

struct Heatmap {
    uint32_t n = 0;
    std::vector<double> values; // row-major n*n, upper triangle exactly 0
    double at(uint32_t i, uint32_t j) const { return values[static_cast<size_t>(i) * n + j]; }
};

// Appendix-style pipeline on one layer: clamp negatives, min-max normalize
// per head over the causal cells, then average heads. Degenerate min==max
// normalizes to 0.
Heatmap heatmap_export(const AttentionDump& dump, uint32_t layer = 0);

} // namespace mpic
