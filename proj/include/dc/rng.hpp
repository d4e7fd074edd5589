#pragma once

// Deterministic random streams used everywhere in the project.
//
// Algorithm (fixed, do not change without bumping the .dcgm format version):
//   - seeding: SplitMix64 (Steele et al.), four consecutive outputs fill the
//     xoshiro state
//   - generator: xoshiro256** 1.0 (Blackman & Vigna)
//   - uniform double in [0,1): top 53 bits, (x >> 11) * 2^-53
//   - gaussian: Box-Muller on two uniforms, u1 forced away from zero
//
// Independent streams are derived with derive_stream(base, id) so that results
// do not depend on the order in which parallel work consumes randomness.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace dc {

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : s_) word = splitmix64(sm);
        has_spare_ = false;
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

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n), n > 0, by rejection (unbiased)
    uint64_t uniform_int(uint64_t n) {
        const uint64_t limit = ~uint64_t{0} - (~uint64_t{0} % n);
        uint64_t x;
        do { x = next_u64(); } while (x >= limit);
        return x % n;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    // Fisher-Yates
    template <typename V>
    void shuffle(V& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices from [0, n), in draw order; k > n returns a full permutation
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> pool(static_cast<size_t>(n));
        std::iota(pool.begin(), pool.end(), 0);
        if (k > n) k = n;
        std::vector<int> out(static_cast<size_t>(k));
        for (int i = 0; i < k; ++i) {
            const size_t j = i + static_cast<size_t>(uniform_int(static_cast<uint64_t>(n - i)));
            std::swap(pool[static_cast<size_t>(i)], pool[j]);
            out[static_cast<size_t>(i)] = pool[static_cast<size_t>(i)];
        }
        return out;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4]{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stable stream id for (base seed, role): results are independent of the
// order in which streams are consumed.
inline uint64_t derive_stream(uint64_t base, uint64_t id) {
    uint64_t sm = base ^ (0x9e3779b97f4a7c15ull + id * 0xd1342543de82ef95ull);
    return splitmix64(sm);
}

inline uint64_t derive_stream(uint64_t base, uint64_t a, uint64_t b) {
    return derive_stream(derive_stream(base, a), b);
}

inline uint64_t derive_stream(uint64_t base, uint64_t a, uint64_t b, uint64_t c) {
    return derive_stream(derive_stream(derive_stream(base, a), b), c);
}

} // namespace dc
