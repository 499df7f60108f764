#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace vitc {

inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr uint64_t kFnvPrime = 0x100000001b3ULL;

// 64-bit FNV-1a, chainable through `seed`.
inline uint64_t fnv1a64(std::string_view bytes, uint64_t seed = kFnvOffset) {
    uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

inline uint64_t fnv1a64(const void* data, size_t size, uint64_t seed = kFnvOffset) {
    return fnv1a64(std::string_view(static_cast<const char*>(data), size), seed);
}

// 16 lowercase hex digits.
std::string hex64(uint64_t value);

}  // namespace vitc
