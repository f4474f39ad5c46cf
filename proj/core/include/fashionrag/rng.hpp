#pragma once

#include <cmath>
#include <cstdint>

namespace fashionrag {

// Deterministic generator with a fixed, platform-independent bit stream
// (xoshiro256++ seeded via splitmix64). std::mt19937 + std distributions
// are implementation-defined, which would break bit-stable fixtures.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& s : state_) {
            // splitmix64
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            s = z ^ (z >> 31);
        }
        has_spare_ = false;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 significant bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection-free for powers of two.
    uint64_t uniform_index(uint64_t n) {
        if ((n & (n - 1)) == 0) return next_u64() & (n - 1);
        // rejection sampling keeps the distribution exact
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // Standard normal via Box-Muller (explicit formula, cached spare).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Full generator state, checkpointable.
    struct State {
        uint64_t s[4];
        double spare;
        uint8_t has_spare;
    };

    State save_state() const {
        return State{{state_[0], state_[1], state_[2], state_[3]}, spare_,
                     static_cast<uint8_t>(has_spare_ ? 1 : 0)};
    }

    void restore_state(const State& st) {
        for (int i = 0; i < 4; ++i) state_[i] = st.s[i];
        spare_ = st.spare;
        has_spare_ = st.has_spare != 0;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4] = {};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace fashionrag
