#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace mfc {

// Counter-based RNG: Philox4x32-10 (Salmon et al., SC'11).
// Stateless per draw: output is a pure function of (key, counter), so streams
// keyed by (seed, path, particle, purpose) give reproducible parallel Monte
// Carlo independent of worker count and evaluation order.
namespace philox {

inline constexpr std::uint32_t kMult0 = 0xD2511F53u;
inline constexpr std::uint32_t kMult1 = 0xCD9E8D57u;
inline constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
inline constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

inline Counter round(const Counter& c, const Key& k) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMult0) * c[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMult1) * c[2];
    return Counter{
        static_cast<std::uint32_t>(p1 >> 32) ^ c[1] ^ k[0],
        static_cast<std::uint32_t>(p1),
        static_cast<std::uint32_t>(p0 >> 32) ^ c[3] ^ k[1],
        static_cast<std::uint32_t>(p0),
    };
}

inline Counter block(Counter c, Key k) {
    c = round(c, k);
    for (int r = 1; r < 10; ++r) {
        k[0] += kWeyl0;
        k[1] += kWeyl1;
        c = round(c, k);
    }
    return c;
}

}  // namespace philox

// splitmix64 finalizer, used to spread stream identifiers into Philox keys.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// One logical stream of random numbers. Draw index is the Philox counter, so
// jumping to an arbitrary position is O(1) and two streams never overlap.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t path, std::uint64_t particle,
              std::uint64_t purpose = 0) {
        std::uint64_t h = mix64(seed);
        h = mix64(h ^ mix64(path));
        h = mix64(h ^ mix64(particle + 0x100000000ull));
        h = mix64(h ^ mix64(purpose + 0x200000000ull));
        key_ = {static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
        hi_ = static_cast<std::uint32_t>(mix64(h) >> 32);
    }

    std::uint64_t next_u64() {
        const std::uint64_t n = counter_++;
        philox::Counter c{static_cast<std::uint32_t>(n),
                          static_cast<std::uint32_t>(n >> 32), hi_, 0u};
        const auto out = philox::block(c, key_);
        return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
    }

    // Uniform on [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform on (0, 1]; safe argument for log().
    double uniform_pos() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    double exponential(double rate) {
        return -std::log(uniform_pos()) / rate;
    }

    // Index in [0, n).
    std::uint64_t below(std::uint64_t n) {
        return next_u64() % n;  // n is tiny here (d*d at most); modulo bias negligible
    }

    std::uint64_t position() const { return counter_; }

private:
    philox::Key key_{};
    std::uint32_t hi_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace mfc
