#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace mpic {

// Per-layer key/value tensors, layout [n_layers][n_tokens][n_heads][head_dim],
// f32. Keys are stored post-rotation.
struct KvTensor {
    uint32_t n_layers = 0;
    uint32_t n_tokens = 0;
    uint32_t n_heads = 0;
    uint32_t head_dim = 0;
    std::vector<float> k;
    std::vector<float> v;

    KvTensor() = default;
    KvTensor(uint32_t layers, uint32_t tokens, uint32_t heads, uint32_t dim)
        : n_layers(layers), n_tokens(tokens), n_heads(heads), head_dim(dim),
          k(static_cast<size_t>(layers) * tokens * heads * dim, 0.0f),
          v(static_cast<size_t>(layers) * tokens * heads * dim, 0.0f) {}

    size_t row_size() const { return static_cast<size_t>(n_heads) * head_dim; }
    size_t layer_size() const { return static_cast<size_t>(n_tokens) * row_size(); }

    float* k_row(uint32_t layer, uint32_t token) {
        return k.data() + layer * layer_size() + token * row_size();
    }
    const float* k_row(uint32_t layer, uint32_t token) const {
        return k.data() + layer * layer_size() + token * row_size();
    }
    float* v_row(uint32_t layer, uint32_t token) {
        return v.data() + layer * layer_size() + token * row_size();
    }
    const float* v_row(uint32_t layer, uint32_t token) const {
        return v.data() + layer * layer_size() + token * row_size();
    }

    float* k_layer(uint32_t layer) { return k.data() + layer * layer_size(); }
    const float* k_layer(uint32_t layer) const { return k.data() + layer * layer_size(); }
    float* v_layer(uint32_t layer) { return v.data() + layer * layer_size(); }
    const float* v_layer(uint32_t layer) const { return v.data() + layer * layer_size(); }

    bool same_shape(const KvTensor& o) const {
        return n_layers == o.n_layers && n_tokens == o.n_tokens &&
               n_heads == o.n_heads && head_dim == o.head_dim;
    }

    // Grow the token dimension to `new_tokens`, preserving existing rows.
    void resize_tokens(uint32_t new_tokens);

    bool all_finite() const;
};

} // namespace mpic
