#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace mpic {

using Hash256 = std::array<uint8_t, 32>;

Hash256 sha256(std::span<const uint8_t> bytes);

std::string hash_to_hex(const Hash256& h);
Hash256 hash_from_hex(std::string_view hex); // throws validation_error on malformed input

constexpr uint64_t fnv1a64(std::span<const uint8_t> bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s) {
    return fnv1a64(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(s.data()), s.size()));
}

uint32_t crc32_of(std::span<const uint8_t> bytes);

} // namespace mpic
