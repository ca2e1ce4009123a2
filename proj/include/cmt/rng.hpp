#pragma once

#include <cstdint>
#include <cmath>

namespace cmt {

// Deterministic, platform-independent RNG (splitmix64 core). std::mt19937
// with std:: distributions is not bit-stable across standard libraries,
// and the checkpoints/logs must reproduce byte-for-byte.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

    double normal() {
        // Box-Muller; one value per call keeps the stream simple.
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Derive an independent stream (e.g. per scene id).
    Rng fork(std::uint64_t salt) {
        std::uint64_t s = state_ ^ (0x632be59bd9b4e019ull * (salt + 1));
        Rng r(s);
        r.next_u64();
        return r;
    }

private:
    std::uint64_t state_;
};

template <class It>
void shuffle(It begin, It end, Rng& rng) {
    auto n = static_cast<std::uint64_t>(end - begin);
    for (std::uint64_t i = n; i > 1; --i) {
        auto j = rng.uniform_int(i);
        std::swap(begin[i - 1], begin[j]);
    }
}

}  // namespace cmt
