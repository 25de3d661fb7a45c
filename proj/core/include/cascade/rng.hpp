#pragma once

#include <cstdint>

namespace cascade {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Counter-based draw: a pure function of its key, so any element of a
/// random stream can be regenerated without replaying the ones before it.
constexpr std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t stream, std::uint64_t epoch,
                                     std::uint64_t index) {
    std::uint64_t h = mix64(seed);
    h = mix64(h ^ stream);
    h = mix64(h ^ epoch);
    return mix64(h ^ index);
}

/// Uniform in [0, 1) from the top 53 bits.
constexpr double unit_double(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

enum RandomStream : std::uint64_t {
    kStreamPermutation = 1,
    kStreamFlip = 2,
    kStreamCrop = 3,
    kStreamSyntheticPrototype = 4,
    kStreamSyntheticSample = 5,
    kStreamInit = 6,
};

}  // namespace cascade
