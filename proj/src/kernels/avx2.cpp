// SPDX-License-Identifier: Apache-2.0
//
// Compiled with -mavx2 -mfma -mf16c; only reached after a runtime CPU check.

#include <immintrin.h>

#include "bamforge/kernels.hpp"
#include "half.hpp"

namespace bamforge::kernels {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

DotNorms dot_norms_avx2(const float* a, const float* b, std::size_t n) {
  __m256d dot0 = _mm256_setzero_pd(), dot1 = _mm256_setzero_pd();
  __m256d aa0 = _mm256_setzero_pd(), aa1 = _mm256_setzero_pd();
  __m256d bb0 = _mm256_setzero_pd(), bb1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 va = _mm256_loadu_ps(a + i);
    const __m256 vb = _mm256_loadu_ps(b + i);
    const __m256d a0 = _mm256_cvtps_pd(_mm256_castps256_ps128(va));
    const __m256d a1 = _mm256_cvtps_pd(_mm256_extractf128_ps(va, 1));
    const __m256d b0 = _mm256_cvtps_pd(_mm256_castps256_ps128(vb));
    const __m256d b1 = _mm256_cvtps_pd(_mm256_extractf128_ps(vb, 1));
    dot0 = _mm256_fmadd_pd(a0, b0, dot0);
    dot1 = _mm256_fmadd_pd(a1, b1, dot1);
    aa0 = _mm256_fmadd_pd(a0, a0, aa0);
    aa1 = _mm256_fmadd_pd(a1, a1, aa1);
    bb0 = _mm256_fmadd_pd(b0, b0, bb0);
    bb1 = _mm256_fmadd_pd(b1, b1, bb1);
  }
  DotNorms r{hsum(_mm256_add_pd(dot0, dot1)), hsum(_mm256_add_pd(aa0, aa1)),
             hsum(_mm256_add_pd(bb0, bb1))};
  for (; i < n; ++i) {
    const double x = a[i];
    const double y = b[i];
    r.dot += x * y;
    r.aa += x * x;
    r.bb += y * y;
  }
  return r;
}

void combine_avx2(const float* a, const float* b, double ca, double cb,
                  float* out, std::size_t n) {
  const __m256d vca = _mm256_set1_pd(ca);
  const __m256d vcb = _mm256_set1_pd(cb);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d x = _mm256_cvtps_pd(_mm_loadu_ps(a + i));
    const __m256d y = _mm256_cvtps_pd(_mm_loadu_ps(b + i));
    const __m256d r = _mm256_add_pd(_mm256_mul_pd(vca, x), _mm256_mul_pd(vcb, y));
    _mm_storeu_ps(out + i, _mm256_cvtpd_ps(r));
  }
  for (; i < n; ++i) {
    const double lhs = ca * static_cast<double>(a[i]);
    const double rhs = cb * static_cast<double>(b[i]);
    out[i] = static_cast<float>(lhs + rhs);
  }
}

void f16_to_f32_avx2(const std::uint16_t* in, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m128i h = _mm_loadu_si128(reinterpret_cast<const __m128i*>(in + i));
    _mm256_storeu_ps(out + i, _mm256_cvtph_ps(h));
  }
  for (; i < n; ++i) out[i] = detail::half_to_float(in[i]);
}

void f32_to_f16_avx2(const float* in, std::uint16_t* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m128i h = _mm256_cvtps_ph(_mm256_loadu_ps(in + i),
                                      _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    _mm_storeu_si128(reinterpret_cast<__m128i*>(out + i), h);
  }
  for (; i < n; ++i) out[i] = detail::float_to_half(in[i]);
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{"avx2", dot_norms_avx2, combine_avx2,
                                 f16_to_f32_avx2, f32_to_f16_avx2};
  return &table;
}

}  // namespace bamforge::kernels
