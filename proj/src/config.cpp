#include "mpic/config.h"

#include "mpic/errors.h"
#include "mpic/hash.h"

#include <bit>
#include <cstring>
#include <vector>

namespace mpic {

void ModelConfig::validate() const {
    if (n_layers == 0 || n_heads == 0 || head_dim == 0 || hidden_dim == 0) {
        throw config_error("model dimensions must be positive");
    }
    if (hidden_dim != n_heads * head_dim) {
        throw config_error("hidden_dim must equal n_heads * head_dim");
    }
    if (vocab_size < 2) {
        throw config_error("vocab_size must be at least 2");
    }
    if (image_token_count == 0) {
        throw config_error("image_token_count must be positive");
    }
    if (!(rope_base > 0.0f)) {
        throw config_error("rope_base must be positive");
    }
}

uint64_t ModelConfig::fingerprint() const {
    std::vector<uint8_t> buf;
    buf.reserve(8 * 8);
    auto push_u64 = [&](uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
        }
    };
    push_u64(n_layers);
    push_u64(n_heads);
    push_u64(head_dim);
    push_u64(hidden_dim);
    push_u64(vocab_size);
    push_u64(image_token_count);
    push_u64(std::bit_cast<uint32_t>(rope_base));
    push_u64(seed);
    return fnv1a64(std::span<const uint8_t>(buf.data(), buf.size()));
}

} // namespace mpic
