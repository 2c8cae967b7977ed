// SPDX-License-Identifier: Apache-2.0

#include "bamforge/hash.hpp"

#include <fmt/core.h>

namespace bamforge {

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t hash) {
  for (std::byte b : bytes) {
    hash ^= static_cast<std::uint64_t>(b);
    hash *= 0x100000001b3ull;
  }
  return hash;
}

std::uint64_t fnv1a64(std::string_view text, std::uint64_t hash) {
  return fnv1a64(std::as_bytes(std::span(text.data(), text.size())), hash);
}

std::string hex64(std::uint64_t value) { return fmt::format("{:016x}", value); }

}  // namespace bamforge
