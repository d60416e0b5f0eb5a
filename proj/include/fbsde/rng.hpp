#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace fbsde {

// Counter-based RNG: Philox4x32-10. Every (seed, stream) pair yields an
// independent substream whose output depends only on the block counter, so
// trajectory m can always draw from stream m no matter how work is scheduled.

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Decorrelates named substreams (centre paths, vanilla ensemble, ...) that
// hang off the same user-facing seed.
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    return splitmix64(seed ^ splitmix64(tag));
}

namespace stream_tag {
inline constexpr std::uint64_t centres = 0x6365ull;     // basis centre trajectories
inline constexpr std::uint64_t vanilla = 0x7661ull;     // uncontrolled comparison ensemble
inline constexpr std::uint64_t importance = 0x6973ull;  // post-fit sampling run
}  // namespace stream_tag

inline std::array<std::uint32_t, 4> philox4x32(std::uint64_t key, std::uint64_t stream,
                                               std::uint64_t counter) {
    constexpr std::uint32_t kMul0 = 0xD2511F53u, kMul1 = 0xCD9E8D57u;
    constexpr std::uint32_t kWeyl0 = 0x9E3779B9u, kWeyl1 = 0xBB67AE85u;

    std::uint32_t c0 = static_cast<std::uint32_t>(counter);
    std::uint32_t c1 = static_cast<std::uint32_t>(counter >> 32);
    std::uint32_t c2 = static_cast<std::uint32_t>(stream);
    std::uint32_t c3 = static_cast<std::uint32_t>(stream >> 32);
    std::uint32_t k0 = static_cast<std::uint32_t>(key);
    std::uint32_t k1 = static_cast<std::uint32_t>(key >> 32);

    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c0;
        const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c2;
        const std::uint32_t n0 = static_cast<std::uint32_t>(p1 >> 32) ^ c1 ^ k0;
        const std::uint32_t n1 = static_cast<std::uint32_t>(p1);
        const std::uint32_t n2 = static_cast<std::uint32_t>(p0 >> 32) ^ c3 ^ k1;
        const std::uint32_t n3 = static_cast<std::uint32_t>(p0);
        c0 = n0;
        c1 = n1;
        c2 = n2;
        c3 = n3;
        k0 += kWeyl0;
        k1 += kWeyl1;
    }
    return {c0, c1, c2, c3};
}

/// Stream of standard Gaussians drawn from one Philox substream.
class NormalStream {
public:
    NormalStream(std::uint64_t seed, std::uint64_t stream)
        : key_(seed), stream_(stream) {}

    double next() {
        if (avail_ == 0) refill();
        return buf_[2 - avail_--];
    }

    void fill(std::span<double> out) {
        for (double& v : out) v = next();
    }

private:
    void refill() {
        const auto b = philox4x32(key_, stream_, block_++);
        const std::uint64_t w0 = (static_cast<std::uint64_t>(b[1]) << 32) | b[0];
        const std::uint64_t w1 = (static_cast<std::uint64_t>(b[3]) << 32) | b[2];
        // 53-bit uniforms in (0, 1]; Box-Muller pair.
        const double u0 = static_cast<double>((w0 >> 11) + 1) * 0x1.0p-53;
        const double u1 = static_cast<double>((w1 >> 11) + 1) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u0));
        const double a = 2.0 * std::numbers::pi * u1;
        buf_[0] = r * std::cos(a);
        buf_[1] = r * std::sin(a);
        avail_ = 2;
    }

    std::uint64_t key_;
    std::uint64_t stream_;
    std::uint64_t block_ = 0;
    double buf_[2] = {0.0, 0.0};
    int avail_ = 0;
};

}  // namespace fbsde
