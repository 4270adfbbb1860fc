#pragma once

#include <cmath>
#include <cstdint>

namespace dskd {

// Deterministic PRNG with explicit distributions. std::* distributions are
// implementation-defined, so everything that must reproduce bit-identically
// across toolchains goes through this.
class Rng {
public:
    explicit Rng(uint64_t seed) { state_ = splitmix64_scramble(seed); }

    // Derive an independent stream, e.g. per component or per sample.
    Rng fork(uint64_t stream_id) const {
        Rng r(0);
        r.state_ = splitmix64_scramble(state_ ^ (0x9E3779B97F4A7C15ULL * (stream_id + 1)));
        return r;
    }

    uint64_t next_u64() {
        // xorshift64* on a splitmix-seeded state
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545F4914F6CDD1DULL;
    }

    uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

    // uniform in [0, 1)
    float uniform() { return static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f); }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint32_t uniform_int(uint32_t n) {
        return static_cast<uint32_t>((static_cast<uint64_t>(next_u32()) * n) >> 32);
    }

    // Box-Muller; one value per call keeps the stream position predictable.
    float normal() {
        float u1 = uniform();
        float u2 = uniform();
        if (u1 < 1e-12f) u1 = 1e-12f;
        return std::sqrt(-2.0f * std::log(u1)) * std::cos(6.28318530717958647692f * u2);
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

private:
    static uint64_t splitmix64_scramble(uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        x = x ^ (x >> 31);
        return x ? x : 0x5851F42D4C957F2DULL;
    }

    uint64_t state_;
};

// FNV-1a over raw bytes; used to fingerprint weight blobs.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xCBF29CE484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace dskd
