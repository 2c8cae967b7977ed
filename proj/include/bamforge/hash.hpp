// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace bamforge {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;

/// 64-bit FNV-1a; pass a previous result as `hash` to continue a stream.
std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t hash = kFnvOffset);
std::uint64_t fnv1a64(std::string_view text, std::uint64_t hash = kFnvOffset);

/// 16 lowercase hex digits.
std::string hex64(std::uint64_t value);

}  // namespace bamforge
