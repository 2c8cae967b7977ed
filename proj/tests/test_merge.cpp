// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>

#include "bamforge/merge.hpp"
#include "doctest.h"
#include "testing.hpp"

using namespace bamforge;

namespace {

TensorBlock vec(std::vector<float> v, std::string name = "w") {
  return TensorBlock::from_f32(std::move(name), {v.size()}, v);
}

double norm(const std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += double(x) * x;
  return std::sqrt(s);
}

std::vector<float> normalized(std::vector<float> v) {
  const double n = norm(v);
  for (auto& x : v) x = static_cast<float>(x / n);
  return v;
}

double angle(const std::vector<float>& a, const std::vector<float>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += double(a[i]) * b[i];
  return std::acos(std::clamp(d / (norm(a) * norm(b)), -1.0, 1.0));
}

MergeTree random_tree(std::mt19937_64& rng, int depth) {
  static const char* ids[] = {"A", "B", "C", "D", "E"};
  if (depth == 0 || rng() % 3 == 0) return MergeTree::leaf(ids[rng() % 5]);
  const MergeSpec spec{(rng() & 1) ? MergeMethod::Slerp : MergeMethod::Linear,
                       static_cast<double>(rng() % 9) / 8.0};
  return MergeTree::node(spec, random_tree(rng, depth - 1), random_tree(rng, depth - 1));
}

}  // namespace

TEST_CASE("lerp examples") {
  CHECK(lerp_tensors(vec({2, 2}), vec({4, 6}), 0.5).to_f32() == std::vector<float>{3, 4});
  CHECK(lerp_tensors(vec({2, 2}), vec({4, 6}), 0.0).to_f32() == std::vector<float>{2, 2});
  CHECK(lerp_tensors(vec({0, 0}), vec({8, 8}), 0.25).to_f32() == std::vector<float>{2, 2});
}

TEST_CASE("slerp examples") {
  SUBCASE("orthogonal unit vectors meet at the diagonal") {
    const auto r = slerp_tensors(vec({1, 0}), vec({0, 1}), 0.5).to_f32();
    CHECK(r[0] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-6));
    CHECK(r[1] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-6));
  }
  SUBCASE("endpoints are exact") {
    const auto a = vec({0.3f, -1.7f, 2.5f});
    const auto b = vec({1.1f, 0.4f, -0.9f});
    CHECK(slerp_tensors(a, b, 0.0) == a);
    CHECK(slerp_tensors(a, b, 1.0) == b);
  }
  SUBCASE("parallel and anti-parallel inputs fall back to lerp") {
    for (double t : {0.0, 0.3, 0.5, 1.0}) {
      CHECK(slerp_tensors(vec({1, 2}), vec({2, 4}), t) == lerp_tensors(vec({1, 2}), vec({2, 4}), t));
      CHECK(slerp_tensors(vec({1, 2}), vec({-2, -4}), t) ==
            lerp_tensors(vec({1, 2}), vec({-2, -4}), t));
    }
  }
  SUBCASE("name, shape and degenerate inputs are rejected") {
    CHECK_THROWS_AS(slerp_tensors(vec({1, 2}), vec({1, 2}, "v"), 0.5), MergeError);
    CHECK_THROWS_AS(slerp_tensors(vec({1, 2}), vec({1, 2, 3}), 0.5), MergeError);
    CHECK_THROWS_AS(slerp_tensors(vec({0, 0}), vec({1, 2}), 0.5), MergeError);
    CHECK_THROWS_AS(slerp_tensors(vec({1, 0}), vec({0, 1}), 1.5), MergeError);
    CHECK_THROWS_AS(lerp_tensors(vec({1, 2}), vec({1, 2, 3}), 0.5), MergeError);
  }
  SUBCASE("output keeps name, shape and the first operand's dtype") {
    const float a[] = {1, 2, 3, 4};
    const float b[] = {4, 3, 2, 1};
    const auto ta = TensorBlock::from_f32("m", {2, 2}, a, DType::F16);
    const auto tb = TensorBlock::from_f32("m", {2, 2}, b);
    const auto r = slerp_tensors(ta, tb, 0.4);
    CHECK(r.name == "m");
    CHECK(r.shape == std::vector<std::uint64_t>{2, 2});
    CHECK(r.dtype == DType::F16);
  }
}

TEST_CASE("slerp agrees with the closed-form oracle") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 1 + rng() % 300;
    const auto a = testing::random_vector(rng, n);
    const auto b = testing::random_vector(rng, n);
    const double t = static_cast<double>(rng() % 1001) / 1000.0;
    const auto got = slerp_tensors(vec(a), vec(b), t).to_f32();
    const auto want = testing::slerp_oracle(a, b, t);
    for (std::size_t j = 0; j < n; ++j) {
      REQUIRE(std::abs(got[j] - static_cast<double>(want[j])) <=
              1e-6 * std::max(1.0L, std::fabs(want[j])));
    }
  }
}

TEST_CASE("property: symmetry, unit sphere, constant angular speed") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + rng() % 64;
    const auto a = normalized(testing::random_vector(rng, n));
    const auto b = normalized(testing::random_vector(rng, n));
    const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto ab = slerp_tensors(vec(a), vec(b), t).to_f32();
    const auto ba = slerp_tensors(vec(b), vec(a), 1.0 - t).to_f32();
    for (std::size_t j = 0; j < n; ++j) REQUIRE(ab[j] == doctest::Approx(ba[j]).epsilon(1e-6).scale(1.0));
    REQUIRE(norm(ab) == doctest::Approx(1.0).epsilon(1e-6));
    REQUIRE(angle(a, ab) == doctest::Approx(t * angle(a, b)).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("merge_checkpoints") {
  std::mt19937_64 rng(5);

  SUBCASE("linear midpoint gives elementwise means") {
    Checkpoint a, b;
    a.tensors.push_back(vec({1, 3}));
    b.tensors.push_back(vec({5, 7}));
    const auto m = merge_checkpoints(a, b, {MergeMethod::Linear, 0.5});
    CHECK(m.tensors.at(0).to_f32() == std::vector<float>{3, 5});
    CHECK(m.metadata.at(std::string(kMetaTree)) == "linear(0.50, a, b)");
    CHECK(m.metadata.at(std::string(kMetaApproximate)) == "false");
  }
  SUBCASE("tensor sets must match") {
    Checkpoint a, b;
    a.tensors.push_back(vec({1, 3}));
    a.tensors.push_back(vec({1}, "extra"));
    b.tensors.push_back(vec({5, 7}));
    try {
      merge_checkpoints(a, b, {});
      FAIL("expected mismatch");
    } catch (const MergeError& e) {
      CHECK(std::string(e.what()).find("extra") != std::string::npos);
    }
    Checkpoint c;
    c.tensors.push_back(vec({5, 7, 9}));
    CHECK_THROWS_AS(merge_checkpoints(b, c, {}), MergeError);
  }
  SUBCASE("slerp equals the per-tensor operator, in the first input's order") {
    Checkpoint a = testing::random_f32_checkpoint(rng, {{4, 5}, {7}, {}});
    Checkpoint b = testing::random_f32_checkpoint(rng, {{4, 5}, {7}, {}});
    std::swap(b.tensors[0], b.tensors[2]);
    a.metadata[std::string(kMetaId)] = "G3";
    b.metadata[std::string(kMetaTree)] = "slerp(0.50, G4, IT)";
    const auto m = merge_checkpoints(a, b, {MergeMethod::Slerp, 0.37});
    REQUIRE(m.tensors.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(m.tensors[i] == slerp_tensors(a.tensors[i], *b.find(a.tensors[i].name), 0.37));
    }
    CHECK(m.metadata.at(std::string(kMetaTree)) == "slerp(0.37, G3, slerp(0.50, G4, IT))");
    CHECK(m.metadata.at(std::string(kMetaApproximate)) == "true");
  }
}

TEST_CASE("merge trees print and parse") {
  const auto tree = MergeTree::parse("slerp(0.50, G3, slerp(0.5, G4, gemma-2-27b-it))");
  CHECK(tree.to_string() == "slerp(0.50, G3, slerp(0.50, G4, gemma-2-27b-it))");
  CHECK(MergeTree::parse(tree.to_string()).to_string() == tree.to_string());
  CHECK(format_ratio(0.37) == "0.37");
  CHECK(format_ratio(1.0) == "1.00");
  CHECK(format_ratio(1.0 / 3.0) == "0.3333333333333333");
  CHECK(MergeTree::parse(" X ").is_leaf());
  CHECK_THROWS_AS(MergeTree::parse(""), MergeError);
  CHECK_THROWS_AS(MergeTree::parse("slerp(0.5, A)"), MergeError);
  CHECK_THROWS_AS(MergeTree::parse("ties(0.5, A, B)"), MergeError);
  CHECK_THROWS_AS(MergeTree::parse("linear(1.5, A, B)"), MergeError);
  CHECK_THROWS_AS(MergeTree::parse("linear(0.5, A, B) C"), MergeError);
  CHECK_THROWS_AS(MergeTree::leaf("a,b"), MergeError);

  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto t = random_tree(rng, 4);
    REQUIRE(MergeTree::parse(t.to_string()).to_string() == t.to_string());
  }
}

TEST_CASE("effective weights") {
  auto w = effective_weights(MergeTree::parse("slerp(0.5, G3, slerp(0.5, G4, IT))"));
  CHECK(w.at("G3") == 0.5);
  CHECK(w.at("G4") == 0.25);
  CHECK(w.at("IT") == 0.25);

  CHECK(effective_weights(MergeTree::leaf("X")) == std::map<std::string, double>{{"X", 1.0}});

  w = effective_weights(MergeTree::parse("linear(0.5, linear(0.5, A, B), linear(0.5, C, D))"));
  for (const char* id : {"A", "B", "C", "D"}) CHECK(w.at(id) == 0.25);

  w = effective_weights(MergeTree::parse("linear(0.25, A, linear(0.5, A, B))"));
  CHECK(w.at("A") == 0.875);
  CHECK(w.at("B") == 0.125);
}

TEST_CASE("property: effective weights are a distribution") {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 500; ++i) {
    const auto w = effective_weights(random_tree(rng, 5));
    double sum = 0;
    for (const auto& [id, x] : w) {
      REQUIRE(x >= 0.0);
      REQUIRE(x <= 1.0);
      sum += x;
    }
    REQUIRE(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("property: nested linear merges of constants realize the effective weights") {
  std::mt19937_64 rng(23);
  const std::map<std::string, float> constant{{"A", 1}, {"B", 2}, {"C", -3}, {"D", 5}, {"E", 8}};
  auto make = [&](const std::string& id) {
    Checkpoint c;
    const float v[] = {constant.at(id), constant.at(id), constant.at(id)};
    c.tensors.push_back(TensorBlock::from_f32("w", {3}, v));
    c.metadata[std::string(kMetaId)] = id;
    return c;
  };
  std::function<Checkpoint(const MergeTree&)> realize = [&](const MergeTree& t) {
    if (t.is_leaf()) return make(t.id());
    return merge_checkpoints(realize(t.left()), realize(t.right()),
                             {MergeMethod::Linear, t.spec().ratio});
  };
  std::function<MergeTree(const MergeTree&)> linearize = [&](const MergeTree& t) {
    if (t.is_leaf()) return t;
    return MergeTree::node({MergeMethod::Linear, t.spec().ratio}, linearize(t.left()),
                           linearize(t.right()));
  };
  for (int i = 0; i < 200; ++i) {
    const MergeTree tree = linearize(random_tree(rng, 4));
    double expected = 0;
    for (const auto& [id, w] : effective_weights(tree)) expected += w * constant.at(id);
    const auto merged = realize(tree).tensors.at(0).to_f32();
    for (float x : merged) REQUIRE(std::abs(x - expected) <= 1e-12);
  }
}
