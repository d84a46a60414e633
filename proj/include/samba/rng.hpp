#pragma once

#include <cmath>
#include <cstdint>

namespace samba {

// splitmix64: the documented seed-derivation function. Per-sample and
// per-layer seeds are derived as splitmix64(master ^ index) so streams are
// independent and bit-stable across platforms.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Small deterministic generator (xoshiro256** seeded via splitmix64).
// Used everywhere instead of std::mt19937 so that sequences do not depend
// on the standard library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) {
            x = splitmix64(x);
            w = x;
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 24 bits of mantissa.
    float next_float() {
        return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
    }

    // Uniform in [lo, hi).
    float uniform(float lo, float hi) { return lo + (hi - lo) * next_float(); }

    // Standard normal via Box-Muller (regenerates on the zero corner case).
    float normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        float u1 = next_float();
        while (u1 <= 1e-12f) u1 = next_float();
        const float u2 = next_float();
        const float r = std::sqrt(-2.0f * std::log(u1));
        const float theta = 6.283185307179586f * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Integer in [0, n).
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4] = {};
    float spare_ = 0.0f;
    bool have_spare_ = false;
};

}  // namespace samba
