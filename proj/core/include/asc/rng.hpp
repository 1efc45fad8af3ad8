#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace asc {

// Stable 64-bit FNV-1a; used for seed derivation and file digests.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept;
std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept;

// Per-component seed: stable hash of (root seed, component name).
std::uint64_t derive_seed(std::uint64_t root, std::string_view component) noexcept;
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) noexcept;

// Distribution helpers are written out by hand so streams are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n);
    double normal();
    // Index drawn from a discrete distribution given by probs (need not be normalized).
    std::size_t categorical(std::span<const double> probs);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace asc
