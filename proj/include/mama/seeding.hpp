#pragma once

// Seed derivation. A child seed is produced by folding each component into
// the parent with SplitMix64:
//
//   s = splitmix64(parent ^ 0x9e3779b97f4a7c15)
//   for c in components: s = splitmix64(s ^ splitmix64(c))
//
// String components (defense names) are first reduced with 64-bit FNV-1a.

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace mama {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline constexpr std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> components) noexcept {
    std::uint64_t s = splitmix64(parent ^ 0x9e3779b97f4a7c15ULL);
    for (auto c : components) s = splitmix64(s ^ splitmix64(c));
    return s;
}

/// Restart r of a trajectory seeded with `seed`; restart 0 reuses the seed.
inline constexpr std::uint64_t restart_seed(std::uint64_t seed, std::uint64_t restart) noexcept {
    return restart == 0 ? seed : derive_seed(seed, {0x7265737461727421ULL, restart});
}

}  // namespace mama
