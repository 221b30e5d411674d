#pragma once

// Seeded, serializable random stream. The standard <random> engines are
// avoided in compute paths because their distributions are not pinned by the
// standard; every run artifact here must be reproducible bit-exactly from a
// config, so the generator and the distribution transforms are fixed in this
// file.

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tiekd {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// xoshiro256** with explicit state, Box-Muller gaussians with a cached spare.
class Rng {
  public:
    Rng() : Rng(0x853c49e6748fea9bull) {}

    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& s : state_) s = splitmix64(sm);
        has_spare_ = false;
        spare_ = 0.0;
    }

    // Deterministic substream derivation, e.g. per data shard or suite cell.
    static Rng derive(uint64_t seed, uint64_t stream) {
        uint64_t sm = seed ^ (0x9e3779b97f4a7c15ull * (stream + 1));
        return Rng(splitmix64(sm));
    }

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

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, bound) by rejection; bound > 0.
    uint64_t uniform_int(uint64_t bound) {
        if (bound == 0) throw std::invalid_argument("Rng::uniform_int: bound must be positive");
        const uint64_t threshold = -bound % bound;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // Box-Muller on (0,1] to keep log() finite.
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<uint64_t>(last - first);
        for (uint64_t i = n; i > 1; --i) {
            uint64_t j = uniform_int(i);
            std::swap(first[i - 1], first[j]);
        }
    }

    std::array<uint64_t, 4> state() const { return state_; }
    bool has_spare() const { return has_spare_; }
    double spare() const { return spare_; }

    void restore(const std::array<uint64_t, 4>& s, bool has_spare, double spare) {
        state_ = s;
        has_spare_ = has_spare;
        spare_ = spare;
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stable position hash -> [0,1), used for seeded fixed-subset selection that
// must not depend on batch composition or epoch order.
inline double hash01(uint64_t seed, uint64_t a, uint64_t b) {
    uint64_t x = seed ^ (a * 0x9e3779b97f4a7c15ull) ^ (b * 0xc2b2ae3d27d4eb4full);
    x = splitmix64(x);
    return static_cast<double>(x >> 11) * 0x1.0p-53;
}

}  // namespace tiekd
