#pragma once

#include <cstdint>

namespace mpic {

// Counter-based generator: every value is a pure function of (seed, stream, i),
// so weight synthesis is reproducible across runs and platforms and any element
// can be generated independently of the others.
inline uint64_t mix64(uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

inline uint64_t counter_hash(uint64_t seed, uint64_t stream, uint64_t i) {
    uint64_t h = mix64(seed + 0x9e3779b97f4a7c15ull);
    h = mix64(h ^ (stream + 0x9e3779b97f4a7c15ull));
    h = mix64(h ^ (i + 0x9e3779b97f4a7c15ull));
    return h;
}

// Uniform in [-1, 1), from the top 24 bits (exact in f32).
inline float counter_uniform(uint64_t seed, uint64_t stream, uint64_t i) {
    const uint32_t bits = static_cast<uint32_t>(counter_hash(seed, stream, i) >> 40);
    return static_cast<float>(bits) * (2.0f / 16777216.0f) - 1.0f;
}

} // namespace mpic
