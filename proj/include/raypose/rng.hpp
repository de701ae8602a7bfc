#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace raypose {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// xoshiro256++ seeded via splitmix64. Self-contained so that streams are
// bit-identical across standard libraries and platforms.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t sm = seed;
        for (auto& word : s_) word = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (no cached spare; one draw per call pair).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Uniform integer in [0, n). Unbiased (Lemire rejection).
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        std::uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (lo < threshold) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    // k distinct indices from [0, n), in draw order (partial Fisher-Yates).
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        if (k > n) k = n;
        std::vector<std::size_t> out(k);
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(uniform_int(n - i));
            std::swap(pool[i], pool[j]);
            out[i] = pool[i];
        }
        return out;
    }

    // Independent child stream identified by a tag. Stable regardless of how
    // many draws the parent has made before/after.
    static Rng derive(std::uint64_t base_seed, std::uint64_t tag0, std::uint64_t tag1 = 0,
                      std::uint64_t tag2 = 0) {
        std::uint64_t sm = base_seed;
        splitmix64(sm);
        sm ^= 0x9e3779b97f4a7c15ULL * (tag0 + 1);
        splitmix64(sm);
        sm ^= 0xa0761d6478bd642fULL * (tag1 + 1);
        splitmix64(sm);
        sm ^= 0xe7037ed1a0b428dbULL * (tag2 + 1);
        return Rng(splitmix64(sm));
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t s_[4];
};

}  // namespace raypose
