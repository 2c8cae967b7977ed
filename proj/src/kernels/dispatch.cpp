// SPDX-License-Identifier: Apache-2.0

#include <cassert>
#include <cstdlib>
#include <string_view>

#include "bamforge/kernels.hpp"

namespace bamforge::kernels {

#if defined(BAMFORGE_HAVE_AVX2)
const KernelTable* avx2_table();
#endif

const KernelTable* avx2() {
#if defined(BAMFORGE_HAVE_AVX2)
  static const bool supported = __builtin_cpu_supports("avx2") &&
                                __builtin_cpu_supports("fma") &&
                                __builtin_cpu_supports("f16c");
  return supported ? avx2_table() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active() {
  static const KernelTable& table = [] () -> const KernelTable& {
    const char* forced = std::getenv("BAMFORGE_KERNELS");
    if (forced != nullptr && std::string_view(forced) == "scalar") return scalar();
    if (const KernelTable* wide = avx2()) return *wide;
    return scalar();
  }();
  return table;
}

DotNorms dot_norms(std::span<const float> a, std::span<const float> b) {
  assert(a.size() == b.size());
  return active().dot_norms(a.data(), b.data(), a.size());
}

void combine(std::span<const float> a, std::span<const float> b, double ca,
             double cb, std::span<float> out) {
  assert(a.size() == b.size() && a.size() == out.size());
  active().combine(a.data(), b.data(), ca, cb, out.data(), a.size());
}

void f16_to_f32(std::span<const std::uint16_t> in, std::span<float> out) {
  assert(in.size() == out.size());
  active().f16_to_f32(in.data(), out.data(), in.size());
}

void f32_to_f16(std::span<const float> in, std::span<std::uint16_t> out) {
  assert(in.size() == out.size());
  active().f32_to_f16(in.data(), out.data(), in.size());
}

}  // namespace bamforge::kernels
