#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "vd/tensor.hpp"

namespace vd {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t hash_str(const std::string& s) {
    // FNV-1a, for seeding parameters by name.
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Seedable counter-free PRNG (xoshiro256**). Gaussian draws use Box-Muller
// without caching so the draw sequence is a pure function of the seed.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    // Independent stream for (seed, lane...), used for per-element batch RNG.
    static Rng derive(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
        uint64_t sm = seed;
        uint64_t h = splitmix64(sm) ^ (a * 0x9e3779b97f4a7c15ULL);
        h ^= splitmix64(sm) ^ (b * 0xc2b2ae3d27d4eb4fULL);
        h ^= splitmix64(sm) ^ (c * 0x165667b19e3779f9ULL);
        return Rng(h);
    }

    uint64_t next_u64() {
        auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
        uint64_t result = rotl(s_[1] * 5, 7) * 9;
        uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int64_t below(int64_t n) {
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    double normal() {
        // Box-Muller; one draw per pair, second member discarded.
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    Tensor<T> normal_tensor(Shape shape, double stddev = 1.0) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data) v = static_cast<T>(normal() * stddev);
        return t;
    }

    template <typename T>
    Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data) v = static_cast<T>(uniform(lo, hi));
        return t;
    }

private:
    uint64_t s_[4];
};

}  // namespace vd
