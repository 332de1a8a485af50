#include "mpic/hash.h"

#include "mpic/errors.h"

#include <openssl/evp.h>
#include <zlib.h>

namespace mpic {

Hash256 sha256(std::span<const uint8_t> bytes) {
    Hash256 out{};
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx, out.data(), &len) != 1 || len != out.size()) {
        EVP_MD_CTX_free(ctx);
        throw io_error("sha256 digest failed");
    }
    EVP_MD_CTX_free(ctx);
    return out;
}

std::string hash_to_hex(const Hash256& h) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (uint8_t b : h) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 0xf]);
    }
    return s;
}

static int hex_nibble(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

Hash256 hash_from_hex(std::string_view hex) {
    if (hex.size() != 64) {
        throw validation_error("content hash must be 64 hex characters");
    }
    Hash256 h{};
    for (size_t i = 0; i < 32; ++i) {
        const int hi = hex_nibble(hex[2 * i]);
        const int lo = hex_nibble(hex[2 * i + 1]);
        if (hi < 0 || lo < 0) {
            throw validation_error("content hash contains non-hex characters");
        }
        h[i] = static_cast<uint8_t>((hi << 4) | lo);
    }
    return h;
}

uint32_t crc32_of(std::span<const uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
    return static_cast<uint32_t>(crc);
}

} // namespace mpic
