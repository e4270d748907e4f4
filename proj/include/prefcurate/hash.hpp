#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace prefcurate {

// Stable 64-bit FNV-1a. Used wherever a hash must survive process restarts
// (pair ids, n-gram keys, config digests, feature hashing).
constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for a named sub-stream of a run seed.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  return splitmix64(base ^ fnv1a64(tag));
}

std::string hex64(std::uint64_t v);

}  // namespace prefcurate
