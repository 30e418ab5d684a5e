#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace cjade {

// Error raised when tensor/layer shapes do not line up.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class ValueError : public std::runtime_error {
public:
    explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG helpers. All randomness in the project flows through
// these so that results are reproducible across platforms and thread counts.
// ---------------------------------------------------------------------------

// splitmix64: used to derive independent seeds from (master, index) pairs.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL));
}

// Small counter-based generator. Fully specified here, so streams are
// bit-identical everywhere regardless of libstdc++ version.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {}

    std::uint64_t next_u64() {
        state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
        std::uint64_t x = state_;
        x ^= x >> 33;
        x *= 0xff51afd7ed558ccdULL;
        x ^= x >> 33;
        x *= 0xc4ceb9fe1a85ec53ULL;
        x ^= x >> 33;
        return x;
    }

    // uniform in [0,1)
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    float uniform(float lo, float hi) {
        return lo + static_cast<float>(next_double()) * (hi - lo);
    }

    // standard normal via Box-Muller
    float normal() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        return static_cast<float>(r * std::cos(6.283185307179586 * u2));
    }

    // integer in [0, n)
    std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    bool bernoulli(double p) { return next_double() < p; }

private:
    std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Deterministic parallel-for. Work is partitioned into contiguous index
// blocks; each worker owns its block, so outputs never race and results are
// identical for any thread count. Thread count comes from CJADE_THREADS or
// hardware_concurrency.
// ---------------------------------------------------------------------------

int worker_count();
void set_worker_count(int n);

// fn(begin, end) is invoked on disjoint [begin, end) ranges covering [0, n).
void parallel_for_blocks(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

std::uint32_t crc32_ieee(const void* data, std::size_t len, std::uint32_t seed = 0);

std::uint64_t fnv1a64(const void* data, std::size_t len);

} // namespace cjade
