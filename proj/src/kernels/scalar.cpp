// SPDX-License-Identifier: Apache-2.0

#include "bamforge/kernels.hpp"
#include "half.hpp"

namespace bamforge::kernels {
namespace {

DotNorms dot_norms_scalar(const float* a, const float* b, std::size_t n) {
  DotNorms r;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a[i];
    const double y = b[i];
    r.dot += x * y;
    r.aa += x * x;
    r.bb += y * y;
  }
  return r;
}

void combine_scalar(const float* a, const float* b, double ca, double cb,
                    float* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double lhs = ca * static_cast<double>(a[i]);
    const double rhs = cb * static_cast<double>(b[i]);
    out[i] = static_cast<float>(lhs + rhs);
  }
}

void f16_to_f32_scalar(const std::uint16_t* in, float* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = detail::half_to_float(in[i]);
}

void f32_to_f16_scalar(const float* in, std::uint16_t* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = detail::float_to_half(in[i]);
}

}  // namespace

const KernelTable& scalar() {
  static const KernelTable table{"scalar", dot_norms_scalar, combine_scalar,
                                 f16_to_f32_scalar, f32_to_f16_scalar};
  return table;
}

}  // namespace bamforge::kernels
