// SPDX-License-Identifier: Apache-2.0
//
// Data-parallel inner loops used by the merge operators and the f16 codec.
// Every routine has a scalar reference implementation; wider variants are
// selected at runtime from the host CPU features and must agree with the
// reference (bit-exact for combine and the f16 codec, within rounding for
// the reductions).

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace bamforge::kernels {

struct DotNorms {
  double dot = 0.0;  // sum a[i] * b[i]
  double aa = 0.0;   // sum a[i]^2
  double bb = 0.0;   // sum b[i]^2
};

struct KernelTable {
  std::string_view name;
  DotNorms (*dot_norms)(const float* a, const float* b, std::size_t n);
  // out[i] = float(ca * double(a[i]) + cb * double(b[i])), no contraction.
  void (*combine)(const float* a, const float* b, double ca, double cb,
                  float* out, std::size_t n);
  void (*f16_to_f32)(const std::uint16_t* in, float* out, std::size_t n);
  // Round to nearest even.
  void (*f32_to_f16)(const float* in, std::uint16_t* out, std::size_t n);
};

const KernelTable& scalar();

/// AVX2+FMA+F16C table, or nullptr when not compiled in or unsupported by the CPU.
const KernelTable* avx2();

/// Best table for this host. BAMFORGE_KERNELS=scalar forces the reference path.
const KernelTable& active();

// Convenience wrappers over active().
DotNorms dot_norms(std::span<const float> a, std::span<const float> b);
void combine(std::span<const float> a, std::span<const float> b, double ca,
             double cb, std::span<float> out);
void f16_to_f32(std::span<const std::uint16_t> in, std::span<float> out);
void f32_to_f16(std::span<const float> in, std::span<std::uint16_t> out);

}  // namespace bamforge::kernels
