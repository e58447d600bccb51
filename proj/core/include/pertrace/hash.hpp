#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace pertrace {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;

/// FNV-1a 64; pass a previous digest as `state` to continue hashing.
constexpr std::uint64_t fnv1a64(std::string_view data, std::uint64_t state = kFnvOffset) {
    for (unsigned char c : data) {
        state ^= c;
        state *= 0x100000001b3ull;
    }
    return state;
}

std::string hex64(std::uint64_t v);

} // namespace pertrace
