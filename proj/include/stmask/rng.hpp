#pragma once

#include <cstdint>
#include <cmath>
#include <initializer_list>

namespace stmask::rng {

// splitmix64 finalizer; full-period 64-bit mixer.
inline std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Folds an ordered tuple of components into one stream key.
// Used to derive independent streams from (seed, purpose, epoch, user, ...).
inline std::uint64_t derive(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x8A5CD789635D2DFFULL;
    for (std::uint64_t p : parts) h = mix(h ^ p);
    return h;
}

// Purpose tags keep derived streams disjoint across uses of the same seed.
enum class Tag : std::uint64_t {
    data_gen      = 0x01,
    param_init    = 0x02,
    mask_gumbel   = 0x03,
    diff_forward  = 0x04,
    diff_reverse  = 0x05,
    timestep_pick = 0x06,
    task_pick     = 0x07,
    augment       = 0x08,
    probe         = 0x09,
    baseline_mask = 0x0A,
    batch_shuffle = 0x0B,
    embed_proj    = 0x0C,
};

inline std::uint64_t derive(std::uint64_t seed, Tag tag,
                            std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0) {
    return derive({seed, static_cast<std::uint64_t>(tag), a, b, c});
}

// Counter-based stream: state advances by splitmix64 steps from a derived key.
// Same key => same sequence, independent of any other stream.
class Stream {
public:
    explicit Stream(std::uint64_t key) : state_(key) {}

    std::uint64_t next_u64() { return mix(state_++); }

    // Open interval (0,1); never returns 0 or 1, safe under log().
    double uniform() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1p-53;
    }

    // Box-Muller; second deviate cached.
    double normal() {
        if (have_spare_) { have_spare_ = false; return spare_; }
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double gumbel() { return -std::log(-std::log(uniform())); }

    // Uniform integer in [0, n); n > 0.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace stmask::rng
