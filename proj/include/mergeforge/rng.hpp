#pragma once

#include <cstdint>
#include <string_view>

namespace mergeforge {

// Counter-based deterministic randomness: the value at (seed, names, index)
// is a pure function of its inputs, so per-element draws are reproducible
// under any thread schedule.

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xCBF29CE484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

// Stream key for one (expert, tensor) pair under a given seed.
inline uint64_t stream_key(uint64_t seed, std::string_view expert_name, std::string_view tensor_name) {
    uint64_t h = fnv1a64(tensor_name, fnv1a64(expert_name));
    return splitmix64(seed ^ splitmix64(h));
}

// Uniform draw in [0, 1) for element `index` of a keyed stream.
inline double uniform_at(uint64_t key, uint64_t index) {
    const uint64_t bits = splitmix64(key + 0x9E3779B97F4A7C15ull * index);
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

}  // namespace mergeforge
