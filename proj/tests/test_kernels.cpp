// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cmath>
#include <limits>
#include <random>

#include "bamforge/kernels.hpp"
#include "doctest.h"
#include "testing.hpp"

using namespace bamforge;
namespace k = bamforge::kernels;

namespace {

std::uint32_t bits(float f) { return std::bit_cast<std::uint32_t>(f); }

std::uint16_t to_half(const k::KernelTable& table, float f) {
  std::uint16_t h;
  table.f32_to_f16(&f, &h, 1);
  return h;
}

float from_half(const k::KernelTable& table, std::uint16_t h) {
  float f;
  table.f16_to_f32(&h, &f, 1);
  return f;
}

}  // namespace

TEST_CASE("scalar half conversion matches IEEE binary16 reference points") {
  const auto& s = k::scalar();
  CHECK(to_half(s, 1.0f) == 0x3c00);
  CHECK(to_half(s, -2.0f) == 0xc000);
  CHECK(to_half(s, 65504.0f) == 0x7bff);
  CHECK(to_half(s, 65520.0f) == 0x7c00);  // halfway to the next binade rounds to inf
  CHECK(to_half(s, 65519.0f) == 0x7bff);
  CHECK(to_half(s, std::ldexp(1.0f, -24)) == 0x0001);
  CHECK(to_half(s, std::ldexp(1.0f, -25)) == 0x0000);  // tie to even
  CHECK(to_half(s, std::ldexp(1.5f, -25)) == 0x0001);
  CHECK(to_half(s, std::ldexp(1.0f, -14)) == 0x0400);  // smallest normal
  CHECK(to_half(s, 1.0f + std::ldexp(1.0f, -11)) == 0x3c00);  // tie to even
  CHECK(to_half(s, 1.0f + 3 * std::ldexp(1.0f, -11)) == 0x3c02);
  CHECK(to_half(s, std::numeric_limits<float>::infinity()) == 0x7c00);
  CHECK((to_half(s, std::numeric_limits<float>::quiet_NaN()) & 0x7c00) == 0x7c00);
  CHECK(from_half(s, 0x3555) == doctest::Approx(0.333251953125));
  CHECK(from_half(s, 0x0001) == std::ldexp(1.0f, -24));
  CHECK(bits(from_half(s, 0x8000)) == 0x80000000u);
}

TEST_CASE("scalar half conversion round-trips every finite half") {
  const auto& s = k::scalar();
  for (std::uint32_t h = 0; h < 0x10000; ++h) {
    if ((h & 0x7c00) == 0x7c00) continue;
    const auto half = static_cast<std::uint16_t>(h);
    REQUIRE(to_half(s, from_half(s, half)) == half);
  }
}

TEST_CASE("avx2 kernels agree with the scalar reference") {
  const k::KernelTable* wide = k::avx2();
  if (wide == nullptr) {
    MESSAGE("AVX2 kernels unavailable on this host; equivalence not exercised");
    return;
  }
  const auto& ref = k::scalar();
  std::mt19937_64 rng(42);

  SUBCASE("f16 -> f32 exhaustively, bit for bit") {
    std::vector<std::uint16_t> all(0x10000);
    for (std::uint32_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::uint16_t>(i);
    std::vector<float> a(all.size()), b(all.size());
    ref.f16_to_f32(all.data(), a.data(), all.size());
    wide->f16_to_f32(all.data(), b.data(), all.size());
    for (std::size_t i = 0; i < all.size(); ++i) REQUIRE(bits(a[i]) == bits(b[i]));
  }

  SUBCASE("f32 -> f16 on random bit patterns and edge values") {
    std::vector<float> in(1 << 20);
    for (auto& f : in) f = std::bit_cast<float>(static_cast<std::uint32_t>(rng()));
    const float edges[] = {0.0f, -0.0f, 65504.0f, 65520.0f, std::ldexp(1.0f, -25),
                           std::ldexp(1.5f, -25), std::ldexp(1.0f, -14),
                           std::numeric_limits<float>::infinity(),
                           std::numeric_limits<float>::denorm_min()};
    std::copy(std::begin(edges), std::end(edges), in.begin());
    std::vector<std::uint16_t> a(in.size()), b(in.size());
    ref.f32_to_f16(in.data(), a.data(), in.size());
    wide->f32_to_f16(in.data(), b.data(), in.size());
    for (std::size_t i = 0; i < in.size(); ++i) REQUIRE(a[i] == b[i]);
  }

  SUBCASE("combine is bit-identical for every tail length") {
    for (std::size_t n : {0, 1, 3, 4, 5, 7, 8, 9, 31, 1000, 4099}) {
      const auto x = testing::random_vector(rng, n);
      const auto y = testing::random_vector(rng, n);
      std::uniform_real_distribution<double> coef(-2.0, 2.0);
      const double ca = coef(rng), cb = coef(rng);
      std::vector<float> r1(n), r2(n);
      ref.combine(x.data(), y.data(), ca, cb, r1.data(), n);
      wide->combine(x.data(), y.data(), ca, cb, r2.data(), n);
      for (std::size_t i = 0; i < n; ++i) REQUIRE(bits(r1[i]) == bits(r2[i]));
    }
  }

  SUBCASE("dot_norms agree within summation-order rounding") {
    for (std::size_t n : {1, 7, 8, 15, 64, 1001, 100000}) {
      const auto x = testing::random_vector(rng, n);
      const auto y = testing::random_vector(rng, n);
      const auto r1 = ref.dot_norms(x.data(), y.data(), n);
      const auto r2 = wide->dot_norms(x.data(), y.data(), n);
      const double scale = std::sqrt(r1.aa * r1.bb);
      CHECK(std::abs(r1.dot - r2.dot) <= 1e-12 * scale);
      CHECK(r2.aa == doctest::Approx(r1.aa).epsilon(1e-12));
      CHECK(r2.bb == doctest::Approx(r1.bb).epsilon(1e-12));
    }
  }
}

TEST_CASE("active table is one of the known tables") {
  const auto& active = k::active();
  CHECK((active.name == "scalar" || active.name == "avx2"));
}
