#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace btlab {

// Deterministic, platform-independent RNG (xoshiro256** seeded via
// splitmix64). Every randomized component derives its own stream with
// child(); streams keyed on the same tags are identical across runs and
// independent of evaluation order, which is what makes generation, training
// and search reproducible byte-for-byte.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {
        uint64_t x = seed;
        for (auto& s : state_) {
            s = splitmix64(x);
        }
        // xoshiro must not start from the all-zero state
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) {
            state_[0] = 0x9E3779B97F4A7C15ULL;
        }
    }

    // Derives an independent stream keyed by (this stream's seed, tag).
    Rng child(uint64_t tag) const {
        uint64_t x = seed_ ^ (0xA0761D6478BD642FULL * (tag + 1));
        x = splitmix64(x);
        x = splitmix64(x);
        return Rng(x);
    }

    Rng child_str(std::string_view tag) const { return child(fnv1a(tag)); }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n), unbiased via rejection.
    uint64_t uniform_u64(uint64_t n) {
        if (n <= 1) {
            return 0;
        }
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) {
                return r % n;
            }
        }
    }

    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(uniform_u64(static_cast<uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller (fresh pair each call, spare cached).
    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // avoid log(0)
        const double u2 = uniform();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        const double two_pi = 6.283185307179586;
        spare_ = mag * std::sin(two_pi * u2);
        has_spare_ = true;
        return mag * std::cos(two_pi * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = uniform_u64(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    uint64_t seed() const { return seed_; }

    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9E3779B97F4A7C15ULL;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    static uint64_t fnv1a(std::string_view s) {
        uint64_t h = 0xCBF29CE484222325ULL;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001B3ULL;
        }
        return h;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t seed_;
    uint64_t state_[4];
    bool has_spare_{false};
    double spare_{0.0};
};

}  // namespace btlab
