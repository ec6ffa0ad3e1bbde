#pragma once

#include <cstdint>
#include <string_view>

namespace retro {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Seed of one task instance: independent of scheduling and worker count.
inline std::uint64_t instance_seed(std::uint64_t global_seed, std::string_view instance_id) {
  return splitmix64(global_seed ^ fnv1a64(instance_id));
}

}  // namespace retro
