#include "mpic/analysis.h"

#include "mpic/errors.h"
#include "mpic/hash.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mpic {

namespace {

constexpr char kMagic[4] = {'M', 'P', 'I', 'C'};
constexpr uint32_t kDumpVersion = 1;
constexpr uint32_t kAttentionSection = 2;

void put_u32(std::vector<uint8_t>& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        b.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
}
void put_u64(std::vector<uint8_t>& b, uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        b.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
}
uint32_t get_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
           static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}
uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | p[i];
    }
    return v;
}

// image columns of the first-output rows, from the segment table
std::vector<uint32_t> image_columns(const AttentionDump& dump) {
    std::vector<uint32_t> cols;
    for (size_t s = 0; s < dump.segment_starts.size(); ++s) {
        if (!dump.segment_is_image[s]) {
            continue;
        }
        const uint32_t start = dump.segment_starts[s];
        const uint32_t end = s + 1 < dump.segment_starts.size() ? dump.segment_starts[s + 1]
                                                                : dump.n_tokens;
        for (uint32_t c = start; c < end; ++c) {
            cols.push_back(c);
        }
    }
    return cols;
}

} // namespace

AttentionDump capture_dump(const Model& model, const SegmentedPrompt& prompt) {
    prompt.validate();
    AttentionDump dump;
    full_prefill(model, prompt.flatten_ids(model.config), &dump);
    const auto bounds = prompt.bounds();
    for (size_t s = 0; s < prompt.segments.size(); ++s) {
        dump.segment_starts.push_back(bounds[s].first);
        dump.segment_is_image.push_back(
            prompt.segments[s].kind == SegmentKind::Image ? 1 : 0);
    }
    return dump;
}

void write_dump(const AttentionDump& dump, const std::filesystem::path& path) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kDumpVersion);
    put_u64(out, dump.model_fingerprint);
    put_u32(out, kAttentionSection);
    put_u32(out, dump.n_layers);
    put_u32(out, dump.n_heads);
    put_u32(out, dump.n_tokens);
    put_u32(out, static_cast<uint32_t>(dump.segment_starts.size()));
    for (size_t s = 0; s < dump.segment_starts.size(); ++s) {
        put_u32(out, dump.segment_starts[s]);
        put_u32(out, dump.segment_is_image[s]);
    }
    const size_t base = out.size();
    out.resize(base + dump.scores.size() * sizeof(float));
    std::memcpy(out.data() + base, dump.scores.data(), dump.scores.size() * sizeof(float));
    put_u32(out, crc32_of(std::span<const uint8_t>(out.data(), out.size())));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f.write(reinterpret_cast<const char*>(out.data()),
                 static_cast<std::streamsize>(out.size()))) {
        throw io_error("failed to write dump " + path.string());
    }
}

AttentionDump read_dump(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw io_error("cannot open dump " + path.string());
    }
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    if (bytes.size() < 32) {
        throw format_error("dump truncated");
    }
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw format_error("bad magic");
    }
    const uint32_t stored_crc = get_u32(bytes.data() + bytes.size() - 4);
    if (stored_crc != crc32_of(std::span<const uint8_t>(bytes.data(), bytes.size() - 4))) {
        throw format_error("crc mismatch");
    }
    const uint8_t* p = bytes.data() + 4;
    const uint32_t version = get_u32(p);
    p += 4;
    if (version != kDumpVersion) {
        throw format_error("unsupported dump version");
    }
    AttentionDump dump;
    dump.model_fingerprint = get_u64(p);
    p += 8;
    const uint32_t section = get_u32(p);
    p += 4;
    if (section != kAttentionSection) {
        throw format_error("unexpected section tag");
    }
    dump.n_layers = get_u32(p);
    p += 4;
    dump.n_heads = get_u32(p);
    p += 4;
    dump.n_tokens = get_u32(p);
    p += 4;
    const uint32_t n_segs = get_u32(p);
    p += 4;
    const size_t score_count = static_cast<size_t>(dump.n_layers) * dump.n_heads *
                               dump.n_tokens * dump.n_tokens;
    const size_t expected = 4 + 4 + 8 + 4 + 16 + 8ull * n_segs + score_count * sizeof(float) + 4;
    if (bytes.size() != expected) {
        throw format_error("dump size mismatch");
    }
    for (uint32_t s = 0; s < n_segs; ++s) {
        dump.segment_starts.push_back(get_u32(p));
        p += 4;
        dump.segment_is_image.push_back(static_cast<uint8_t>(get_u32(p)));
        p += 4;
    }
    dump.scores.resize(score_count);
    std::memcpy(dump.scores.data(), p, score_count * sizeof(float));
    return dump;
}

CdfResult attention_cdf(const AttentionDump& dump, double threshold) {
    const std::vector<uint32_t> cols = image_columns(dump);
    std::vector<float> samples;
    samples.reserve(static_cast<size_t>(dump.n_layers) * dump.n_heads * cols.size());
    for (uint32_t l = 0; l < dump.n_layers; ++l) {
        for (uint32_t h = 0; h < dump.n_heads; ++h) {
            const float* row = dump.first_output_row(l, h);
            for (uint32_t c : cols) {
                samples.push_back(row[c]);
            }
        }
    }
    CdfResult res;
    if (samples.empty()) {
        return res;
    }
    std::sort(samples.begin(), samples.end());
    const double n = static_cast<double>(samples.size());
    res.points.reserve(samples.size());
    size_t above = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        res.points.emplace_back(samples[i], static_cast<double>(i + 1) / n);
        above += samples[i] > threshold ? 1 : 0;
    }
    res.fraction_above = static_cast<double>(above) / n;
    return res;
}

std::vector<std::vector<double>> cumulative_attention(const AttentionDump& dump,
                                                      uint32_t segment_index) {
    if (segment_index >= dump.segment_starts.size()) {
        throw validation_error("segment index out of range");
    }
    const uint32_t start = dump.segment_starts[segment_index];
    const uint32_t end = segment_index + 1 < dump.segment_starts.size()
                             ? dump.segment_starts[segment_index + 1]
                             : dump.n_tokens;

    std::vector<std::vector<double>> series(dump.n_layers);
    for (uint32_t l = 0; l < dump.n_layers; ++l) {
        series[l].reserve(end - start);
        double run = 0.0;
        for (uint32_t c = start; c < end; ++c) {
            double head_avg = 0.0;
            for (uint32_t h = 0; h < dump.n_heads; ++h) {
                head_avg += dump.first_output_row(l, h)[c];
            }
            head_avg /= dump.n_heads;
            run += head_avg;
            series[l].push_back(run);
        }
    }
    return series;
}

TokenImportanceTable kv_distance_rank(const KvCacheEntry& stored, const KvTensor& recomputed,
                                      const AttentionDump* dump, uint32_t segment_start) {
    const KvTensor& skv = stored.kv;
    if (!skv.same_shape(recomputed)) {
        throw validation_error("stored and recomputed tensors must have the same shape");
    }
    const uint32_t layers = skv.n_layers;
    const uint32_t tokens = skv.n_tokens;
    const size_t row = skv.row_size();

    TokenImportanceTable table;
    table.per_layer_distance.assign(layers, std::vector<double>(tokens, 0.0));
    for (uint32_t l = 0; l < layers; ++l) {
        for (uint32_t t = 0; t < tokens; ++t) {
            const float* a = skv.k_row(l, t);
            const float* b = recomputed.k_row(l, t);
            double d = 0.0;
            for (size_t i = 0; i < row; ++i) {
                d += std::abs(static_cast<double>(a[i]) - b[i]);
            }
            table.per_layer_distance[l][t] = d;
        }
    }

    std::vector<uint32_t> top50_count(tokens, 0);
    for (uint32_t l = 0; l < layers; ++l) {
        std::vector<uint32_t> order(tokens);
        for (uint32_t t = 0; t < tokens; ++t) {
            order[t] = t;
        }
        std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
            const double da = table.per_layer_distance[l][a];
            const double db = table.per_layer_distance[l][b];
            if (da != db) {
                return da > db;
            }
            return a < b;
        });
        const uint32_t top = std::min<uint32_t>(50, tokens);
        for (uint32_t i = 0; i < top; ++i) {
            ++top50_count[order[i]];
        }
    }

    table.rows.resize(tokens);
    for (uint32_t t = 0; t < tokens; ++t) {
        TokenImportanceRow& r = table.rows[t];
        r.token_index = t;
        for (uint32_t l = 0; l < layers; ++l) {
            r.k_distance += table.per_layer_distance[l][t];
        }
        r.layers_in_top50 = top50_count[t];
        if (dump) {
            double sum = 0.0;
            for (uint32_t l = 0; l < dump->n_layers; ++l) {
                for (uint32_t h = 0; h < dump->n_heads; ++h) {
                    sum += dump->first_output_row(l, h)[segment_start + t];
                }
            }
            r.mean_attention = sum / (static_cast<double>(dump->n_layers) * dump->n_heads);
        }
    }
    std::sort(table.rows.begin(), table.rows.end(),
              [](const TokenImportanceRow& a, const TokenImportanceRow& b) {
                  if (a.k_distance != b.k_distance) {
                      return a.k_distance > b.k_distance;
                  }
                  return a.token_index < b.token_index;
              });
    return table;
}

std::vector<PercentileStats> percentile_rank(const AttentionDump& dump) {
    // first image token = first column of the first image segment
    uint32_t target = dump.n_tokens;
    for (size_t s = 0; s < dump.segment_starts.size(); ++s) {
        if (dump.segment_is_image[s]) {
            target = dump.segment_starts[s];
            break;
        }
    }
    if (target >= dump.n_tokens) {
        throw validation_error("dump has no image segment");
    }
    const uint32_t n = dump.n_tokens;

    std::vector<PercentileStats> out(dump.n_layers);
    for (uint32_t l = 0; l < dump.n_layers; ++l) {
        std::vector<double> pcts(dump.n_heads);
        for (uint32_t h = 0; h < dump.n_heads; ++h) {
            const float* row = dump.first_output_row(l, h);
            const float v = row[target];
            uint32_t less = 0, equal = 0;
            for (uint32_t j = 0; j < n; ++j) {
                less += row[j] < v ? 1 : 0;
                equal += row[j] == v ? 1 : 0;
            }
            // mean rank for ties, 1-based
            const double rank = less + (equal + 1) / 2.0;
            pcts[h] = n > 1 ? 100.0 * (rank - 1.0) / (n - 1.0) : 100.0;
        }
        double mean = 0.0;
        for (double p : pcts) {
            mean += p;
        }
        mean /= pcts.size();
        double var = 0.0;
        for (double p : pcts) {
            var += (p - mean) * (p - mean);
        }
        out[l] = {mean, std::sqrt(var / pcts.size())};
    }
    return out;
}

Heatmap heatmap_export(const AttentionDump& dump, uint32_t layer) {
    if (layer >= dump.n_layers) {
        throw validation_error("layer out of range");
    }
    const uint32_t n = dump.n_tokens;
    Heatmap hm;
    hm.n = n;
    hm.values.assign(static_cast<size_t>(n) * n, 0.0);

    for (uint32_t h = 0; h < dump.n_heads; ++h) {
        // clamp negatives, then min-max over the causal cells of this head
        double mn = std::numeric_limits<double>::infinity();
        double mx = -std::numeric_limits<double>::infinity();
        for (uint32_t i = 0; i < n; ++i) {
            const float* row = dump.row(layer, h, i);
            for (uint32_t j = 0; j <= i; ++j) {
                const double v = std::max(0.0f, row[j]);
                mn = std::min(mn, v);
                mx = std::max(mx, v);
            }
        }
        const double span = mx - mn;
        for (uint32_t i = 0; i < n; ++i) {
            const float* row = dump.row(layer, h, i);
            for (uint32_t j = 0; j <= i; ++j) {
                const double v = std::max(0.0f, row[j]);
                const double norm = span > 0.0 ? (v - mn) / span : 0.0;
                hm.values[static_cast<size_t>(i) * n + j] += norm / dump.n_heads;
            }
        }
    }
    return hm;
}

} // namespace mpic
