#pragma once

#include <cstdint>

namespace mpic {

struct ModelConfig {
    uint32_t n_layers = 2;
    uint32_t n_heads = 2;
    uint32_t head_dim = 8;
    uint32_t hidden_dim = 16; // must equal n_heads * head_dim
    uint32_t vocab_size = 256;
    uint32_t image_token_count = 16; // tokens emitted per image by the pseudo-encoder
    float rope_base = 10000.0f;
    uint64_t seed = 0;

    void validate() const; // throws config_error

    // Derived from all fields above; equal fields give equal fingerprints.
    uint64_t fingerprint() const;

    // Reserved vocabulary id whose emission triggers retrieval.
    int32_t retrieval_sentinel() const { return static_cast<int32_t>(vocab_size) - 1; }
};

} // namespace mpic
