#include "mpic/cache.h"

#include "mpic/errors.h"

#include <cstring>
#include <fstream>
#include <mutex>
#include <random>

namespace mpic {

namespace {

constexpr char kMagic[4] = {'M', 'P', 'I', 'C'};
constexpr uint32_t kFormatVersion = 1;
constexpr size_t kHeaderSize = 4 + 4 + 8 + 8 + 32 + 4 * 5 + 1 + 7;

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

std::string bytes_to_hex(std::string_view s) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(s.size() * 2);
    for (unsigned char c : s) {
        out.push_back(digits[c >> 4]);
        out.push_back(digits[c & 0xf]);
    }
    return out;
}

std::string hex_to_bytes(std::string_view hex) {
    auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        return -1;
    };
    if (hex.size() % 2 != 0) {
        return {};
    }
    std::string out;
    out.reserve(hex.size() / 2);
    for (size_t i = 0; i < hex.size(); i += 2) {
        const int hi = nib(hex[i]);
        const int lo = nib(hex[i + 1]);
        if (hi < 0 || lo < 0) {
            return {};
        }
        out.push_back(static_cast<char>((hi << 4) | lo));
    }
    return out;
}

std::string hex16(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

} // namespace

const char* tier_name(Tier t) {
    switch (t) {
        case Tier::Device: return "device";
        case Tier::Host: return "host";
        case Tier::Disk: return "disk";
    }
    return "?";
}

std::vector<uint8_t> serialize_entry(const KvCacheEntry& entry) {
    const KvTensor& kv = entry.kv;
    std::vector<uint8_t> out;
    out.reserve(kHeaderSize + (kv.k.size() + kv.v.size()) * sizeof(float) + 4);

    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kFormatVersion);
    put_u64(out, entry.key.model_fingerprint);
    put_u64(out, fnv1a64(entry.key.ns));
    out.insert(out.end(), entry.key.content_hash.begin(), entry.key.content_hash.end());
    put_u32(out, entry.position_base);
    put_u32(out, kv.n_layers);
    put_u32(out, kv.n_tokens);
    put_u32(out, kv.n_heads);
    put_u32(out, kv.head_dim);
    out.push_back(0); // dtype f32
    out.insert(out.end(), 7, 0);

    const size_t payload = (kv.k.size() + kv.v.size()) * sizeof(float);
    const size_t base = out.size();
    out.resize(base + payload);
    std::memcpy(out.data() + base, kv.k.data(), kv.k.size() * sizeof(float));
    std::memcpy(out.data() + base + kv.k.size() * sizeof(float), kv.v.data(),
                kv.v.size() * sizeof(float));

    put_u32(out, crc32_of(std::span<const uint8_t>(out.data(), out.size())));
    return out;
}

KvCacheEntry deserialize_entry(std::span<const uint8_t> bytes, const std::string& ns) {
    if (bytes.size() < kHeaderSize + 4) {
        throw format_error("entry file truncated");
    }
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw format_error("bad magic");
    }
    const uint8_t* p = bytes.data() + 4;
    const uint32_t version = get_u32(p);
    p += 4;
    if (version != kFormatVersion) {
        throw format_error("unsupported version " + std::to_string(version));
    }
    KvCacheEntry e;
    e.key.model_fingerprint = get_u64(p);
    p += 8;
    const uint64_t ns_hash = get_u64(p);
    p += 8;
    std::memcpy(e.key.content_hash.data(), p, 32);
    p += 32;
    e.position_base = get_u32(p);
    p += 4;
    const uint32_t layers = get_u32(p);
    p += 4;
    const uint32_t tokens = get_u32(p);
    p += 4;
    const uint32_t heads = get_u32(p);
    p += 4;
    const uint32_t dim = get_u32(p);
    p += 4;
    const uint8_t dtype = *p;
    p += 1 + 7;

    if (dtype != 0) {
        throw format_error("unsupported dtype");
    }
    if (layers == 0 || tokens == 0 || heads == 0 || dim == 0) {
        throw format_error("degenerate tensor shape");
    }
    const size_t count = static_cast<size_t>(layers) * tokens * heads * dim;
    const size_t expected = kHeaderSize + 2 * count * sizeof(float) + 4;
    if (bytes.size() != expected) {
        throw format_error("entry size mismatch: expected " + std::to_string(expected) +
                           ", got " + std::to_string(bytes.size()));
    }
    const uint32_t stored_crc = get_u32(bytes.data() + bytes.size() - 4);
    const uint32_t actual_crc =
        crc32_of(std::span<const uint8_t>(bytes.data(), bytes.size() - 4));
    if (stored_crc != actual_crc) {
        throw format_error("crc mismatch");
    }
    if (ns_hash != fnv1a64(ns)) {
        throw format_error("namespace hash mismatch");
    }

    e.key.ns = ns;
    e.kv = KvTensor(layers, tokens, heads, dim);
    std::memcpy(e.kv.k.data(), p, count * sizeof(float));
    std::memcpy(e.kv.v.data(), p + count * sizeof(float), count * sizeof(float));
    e.token_count = tokens;
    e.tier = Tier::Host;
    return e;
}

CacheStore::CacheStore(StoreConfig config) : config_(std::move(config)) {
    if (config_.dir.empty()) {
        std::random_device rd;
        config_.dir = std::filesystem::temp_directory_path() /
                      ("mpic-store-" + std::to_string(rd()) + std::to_string(rd()));
    }
}

std::filesystem::path CacheStore::path_for(const CacheKey& key) const {
    return config_.dir / bytes_to_hex(key.ns) / hex16(key.model_fingerprint) /
           (key.hex() + kEntryFileSuffix);
}

void CacheStore::put(KvCacheEntry entry) {
    if (entry.token_count != entry.kv.n_tokens) {
        throw validation_error("entry token_count does not match tensor");
    }
    if (entry.created_at == TimePoint{}) {
        entry.created_at = Clock::now();
    }
    std::unique_lock lock(mutex_);
    Record rec;
    rec.tier = entry.tier;
    rec.token_count = entry.token_count;
    rec.position_base = entry.position_base;
    rec.created_at = entry.created_at;
    rec.ttl = entry.ttl;
    rec.last_fetch = ++fetch_counter_;
    rec.embedding = entry.embedding;
    const CacheKey key = entry.key;
    if (entry.tier == Tier::Disk) {
        rec.resident = std::make_shared<const KvCacheEntry>(std::move(entry));
        write_to_disk_locked(key, rec);
        rec.resident.reset();
    } else {
        rec.resident = std::make_shared<const KvCacheEntry>(std::move(entry));
    }
    index_.insert_or_assign(key, std::move(rec));
    enforce_budgets_locked();
}

LookupReport CacheStore::lookup_many(std::span<const CacheKey> keys) const {
    const TimePoint now = Clock::now();
    LookupReport report;
    std::shared_lock lock(mutex_);
    for (const CacheKey& key : keys) {
        auto it = index_.find(key);
        if (it == index_.end() || it->second.created_at + it->second.ttl <= now) {
            report.misses.push_back(key);
        } else {
            report.hits.emplace_back(key, it->second.tier);
        }
    }
    return report;
}

bool CacheStore::contains(const CacheKey& key) const {
    std::shared_lock lock(mutex_);
    auto it = index_.find(key);
    return it != index_.end() && it->second.created_at + it->second.ttl > Clock::now();
}

std::optional<Tier> CacheStore::tier_of(const CacheKey& key) const {
    std::shared_lock lock(mutex_);
    auto it = index_.find(key);
    if (it == index_.end()) {
        return std::nullopt;
    }
    return it->second.tier;
}

KvCacheEntry CacheStore::fetch(const CacheKey& key) {
    std::unique_lock lock(mutex_);
    auto it = index_.find(key);
    if (it == index_.end() || it->second.created_at + it->second.ttl <= Clock::now()) {
        throw not_found_error("cache entry not found: " + key.hex());
    }
    Record& rec = it->second;

    KvCacheEntry entry;
    if (rec.resident) {
        entry = *rec.resident;
    } else {
        std::ifstream in(path_for(key), std::ios::binary);
        if (!in) {
            throw integrity_error("entry file missing: " + key.hex());
        }
        std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
        try {
            entry = deserialize_entry(bytes, key.ns);
        } catch (const format_error& e) {
            throw integrity_error(std::string("entry file corrupt: ") + e.what());
        }
        if (entry.key.content_hash != key.content_hash) {
            throw integrity_error("content hash mismatch on load");
        }
    }
    if (entry.key.model_fingerprint != key.model_fingerprint ||
        (config_.model_fingerprint != 0 &&
         entry.key.model_fingerprint != config_.model_fingerprint)) {
        throw integrity_error("model fingerprint mismatch on load");
    }

    entry.created_at = rec.created_at;
    entry.ttl = rec.ttl;
    entry.embedding = rec.embedding;
    entry.tier = Tier::Device;

    rec.resident = std::make_shared<const KvCacheEntry>(entry);
    rec.tier = Tier::Device;
    rec.last_fetch = ++fetch_counter_;
    enforce_budgets_locked();
    return entry;
}

size_t CacheStore::evict_and_expire(TimePoint now) {
    std::unique_lock lock(mutex_);
    size_t removed = 0;
    for (auto it = index_.begin(); it != index_.end();) {
        if (it->second.created_at + it->second.ttl <= now) {
            std::error_code ec;
            std::filesystem::remove(path_for(it->first), ec);
            it = index_.erase(it);
            ++removed;
        } else {
            ++it;
        }
    }
    enforce_budgets_locked();
    return removed;
}

bool CacheStore::remove(const CacheKey& key) {
    std::unique_lock lock(mutex_);
    auto it = index_.find(key);
    if (it == index_.end()) {
        return false;
    }
    std::error_code ec;
    std::filesystem::remove(path_for(key), ec);
    index_.erase(it);
    return true;
}

size_t CacheStore::rescan() {
    std::unique_lock lock(mutex_);
    if (!std::filesystem::is_directory(config_.dir)) {
        return 0;
    }
    size_t added = 0;
    for (const auto& ns_dir : std::filesystem::directory_iterator(config_.dir)) {
        if (!ns_dir.is_directory()) {
            continue;
        }
        const std::string ns = hex_to_bytes(ns_dir.path().filename().string());
        for (const auto& fp_dir : std::filesystem::directory_iterator(ns_dir)) {
            if (!fp_dir.is_directory()) {
                continue;
            }
            for (const auto& f : std::filesystem::directory_iterator(fp_dir)) {
                if (f.path().extension() != kEntryFileSuffix) {
                    continue;
                }
                std::ifstream in(f.path(), std::ios::binary);
                if (!in) {
                    continue;
                }
                std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                           std::istreambuf_iterator<char>());
                KvCacheEntry e;
                try {
                    e = deserialize_entry(bytes, ns);
                } catch (const format_error&) {
                    continue;
                }
                if (index_.contains(e.key)) {
                    continue;
                }
                Record rec;
                rec.tier = Tier::Disk;
                rec.token_count = e.token_count;
                rec.position_base = e.position_base;
                rec.created_at = Clock::now();
                rec.ttl = config_.default_ttl;
                rec.last_fetch = ++fetch_counter_;
                index_.emplace(e.key, std::move(rec));
                ++added;
            }
        }
    }
    return added;
}

std::vector<CacheStore::EntryInfo> CacheStore::list(const std::string& ns) const {
    const TimePoint now = Clock::now();
    std::vector<EntryInfo> out;
    std::shared_lock lock(mutex_);
    for (const auto& [key, rec] : index_) {
        if (key.ns == ns && rec.created_at + rec.ttl > now) {
            out.push_back({key, rec.tier, rec.token_count, rec.created_at, rec.ttl});
        }
    }
    return out;
}

void CacheStore::demote_to(const CacheKey& key, Tier tier) {
    std::unique_lock lock(mutex_);
    auto it = index_.find(key);
    if (it == index_.end()) {
        throw not_found_error("cannot demote missing entry");
    }
    Record& rec = it->second;
    if (tier == Tier::Disk) {
        if (rec.resident) {
            write_to_disk_locked(key, rec);
            rec.resident.reset();
        }
    } else if (!rec.resident) {
        throw state_error("cannot promote disk entry via demote_to");
    }
    rec.tier = tier;
}

void CacheStore::write_to_disk_locked(const CacheKey& key, const Record& rec) {
    const auto path = path_for(key);
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    const std::vector<uint8_t> bytes = serialize_entry(*rec.resident);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out.write(reinterpret_cast<const char*>(bytes.data()),
                   static_cast<std::streamsize>(bytes.size()))) {
        throw io_error("failed to write " + path.string());
    }
}

void CacheStore::demote_one_locked(Tier from) {
    auto victim = index_.end();
    for (auto it = index_.begin(); it != index_.end(); ++it) {
        if (it->second.tier == from &&
            (victim == index_.end() || it->second.last_fetch < victim->second.last_fetch)) {
            victim = it;
        }
    }
    if (victim == index_.end()) {
        return;
    }
    Record& rec = victim->second;
    if (from == Tier::Device) {
        rec.tier = Tier::Host;
    } else if (from == Tier::Host) {
        write_to_disk_locked(victim->first, rec);
        rec.resident.reset();
        rec.tier = Tier::Disk;
    }
}

void CacheStore::enforce_budgets_locked() {
    auto count_tier = [&](Tier t) {
        size_t n = 0;
        for (const auto& [k, r] : index_) {
            n += (r.tier == t) ? 1 : 0;
        }
        return n;
    };
    while (count_tier(Tier::Device) > config_.device_budget) {
        demote_one_locked(Tier::Device);
    }
    while (count_tier(Tier::Host) > config_.host_budget) {
        demote_one_locked(Tier::Host);
    }
}

} // namespace mpic
