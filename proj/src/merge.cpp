// SPDX-License-Identifier: Apache-2.0

#include "bamforge/merge.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>

#include <fmt/core.h>

#include "bamforge/kernels.hpp"

namespace bamforge {

const char* method_name(MergeMethod method) {
  return method == MergeMethod::Slerp ? "slerp" : "linear";
}

MergeMethod parse_method(std::string_view name) {
  if (name == "slerp") return MergeMethod::Slerp;
  if (name == "linear") return MergeMethod::Linear;
  throw MergeError(fmt::format("unknown merge method '{}'", name));
}

void MergeSpec::check() const {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw MergeError(fmt::format("merge ratio {} outside [0, 1]", ratio));
  }
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw MergeError(fmt::format("colinearity epsilon {} must be positive", epsilon));
  }
}

// ---------------------------------------------------------------------------
// MergeTree

namespace {

bool is_delimiter(char c) {
  return c == '(' || c == ')' || c == ',' || std::isspace(static_cast<unsigned char>(c));
}

class TreeParser {
 public:
  explicit TreeParser(std::string_view text) : text_(text) {}

  MergeTree parse_all() {
    MergeTree tree = parse_node();
    skip_ws();
    if (pos_ != text_.size()) fail("trailing characters");
    return tree;
  }

 private:
  MergeTree parse_node() {
    skip_ws();
    const std::size_t start = pos_;
    while (pos_ < text_.size() && !is_delimiter(text_[pos_])) ++pos_;
    if (pos_ == start) fail("expected identifier");
    const std::string_view word = text_.substr(start, pos_ - start);
    skip_ws();
    if (pos_ >= text_.size() || text_[pos_] != '(') return MergeTree::leaf(std::string(word));

    MergeSpec spec;
    try {
      spec.method = parse_method(word);
    } catch (const MergeError&) {
      fail(fmt::format("unknown merge method '{}'", word));
    }
    ++pos_;
    skip_ws();
    const char* first = text_.data() + pos_;
    const char* last = text_.data() + text_.size();
    auto [ptr, ec] = std::from_chars(first, last, spec.ratio);
    if (ec != std::errc()) fail("expected ratio");
    pos_ += static_cast<std::size_t>(ptr - first);
    expect(',');
    MergeTree left = parse_node();
    expect(',');
    MergeTree right = parse_node();
    expect(')');
    try {
      return MergeTree::node(spec, std::move(left), std::move(right));
    } catch (const MergeError& e) {
      fail(e.what());
    }
  }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  void expect(char c) {
    skip_ws();
    if (pos_ >= text_.size() || text_[pos_] != c) fail(fmt::format("expected '{}'", c));
    ++pos_;
  }

  [[noreturn]] void fail(const std::string& why) const {
    throw MergeError(fmt::format("bad merge expression at offset {}: {}", pos_, why));
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

void accumulate_weights(const MergeTree& tree, double scale,
                        std::map<std::string, double>& out) {
  if (tree.is_leaf()) {
    out[tree.id()] += scale;
    return;
  }
  const double t = tree.spec().ratio;
  accumulate_weights(tree.left(), scale * (1.0 - t), out);
  accumulate_weights(tree.right(), scale * t, out);
}

}  // namespace

MergeTree MergeTree::leaf(std::string id) {
  if (id.empty() || std::any_of(id.begin(), id.end(), is_delimiter)) {
    throw MergeError(fmt::format("invalid checkpoint id '{}' in merge tree", id));
  }
  MergeTree t;
  t.id_ = std::move(id);
  return t;
}

MergeTree MergeTree::node(MergeSpec spec, MergeTree left, MergeTree right) {
  spec.check();
  MergeTree t;
  t.spec_ = spec;
  t.left_ = std::make_shared<const MergeTree>(std::move(left));
  t.right_ = std::make_shared<const MergeTree>(std::move(right));
  return t;
}

bool MergeTree::has_slerp() const {
  if (is_leaf()) return false;
  return spec_.method == MergeMethod::Slerp || left_->has_slerp() || right_->has_slerp();
}

std::string format_ratio(double ratio) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), ratio);
  std::string s(buf, end);
  if (s.find_first_of("eEn") != std::string::npos) return s;
  const auto dot = s.find('.');
  if (dot == std::string::npos) return s + ".00";
  if (s.size() - dot - 1 < 2) s.append(2 - (s.size() - dot - 1), '0');
  return s;
}

std::string MergeTree::to_string() const {
  if (is_leaf()) return id_;
  return fmt::format("{}({}, {}, {})", method_name(spec_.method), format_ratio(spec_.ratio),
                     left_->to_string(), right_->to_string());
}

MergeTree MergeTree::parse(std::string_view text) { return TreeParser(text).parse_all(); }

std::map<std::string, double> effective_weights(const MergeTree& tree) {
  std::map<std::string, double> out;
  accumulate_weights(tree, 1.0, out);
  return out;
}

// ---------------------------------------------------------------------------
// Tensor and checkpoint interpolation

namespace {

void check_pair(const TensorBlock& a, const TensorBlock& b) {
  if (a.name != b.name) {
    throw MergeError(fmt::format("tensor name mismatch: '{}' vs '{}'", a.name, b.name));
  }
  if (a.shape != b.shape) {
    throw MergeError(fmt::format("tensor '{}': shape mismatch", a.name));
  }
  if (a.element_count() == 0) {
    throw MergeError(fmt::format("tensor '{}': empty tensor", a.name));
  }
}

TensorBlock combine_blocks(const TensorBlock& a, std::span<const float> av,
                           std::span<const float> bv, double ca, double cb) {
  std::vector<float> out(av.size());
  kernels::combine(av, bv, ca, cb, out);
  return TensorBlock::from_f32(a.name, a.shape, out, a.dtype);
}

}  // namespace

TensorBlock slerp_tensors(const TensorBlock& a, const TensorBlock& b, double t,
                          double epsilon) {
  check_pair(a, b);
  MergeSpec{MergeMethod::Slerp, t, epsilon}.check();
  const auto av = a.to_f32();
  const auto bv = b.to_f32();
  const auto dn = kernels::dot_norms(av, bv);
  if (dn.aa == 0.0 || dn.bb == 0.0) {
    throw MergeError(fmt::format("tensor '{}': zero-norm input, SLERP angle undefined", a.name));
  }
  const double cosine = std::clamp(dn.dot / (std::sqrt(dn.aa) * std::sqrt(dn.bb)), -1.0, 1.0);
  if (1.0 - std::abs(cosine) < epsilon) {
    // Parallel or anti-parallel: the great circle is degenerate.
    return combine_blocks(a, av, bv, 1.0 - t, t);
  }
  const double omega = std::acos(cosine);
  const double sin_omega = std::sin(omega);
  return combine_blocks(a, av, bv, std::sin((1.0 - t) * omega) / sin_omega,
                        std::sin(t * omega) / sin_omega);
}

TensorBlock lerp_tensors(const TensorBlock& a, const TensorBlock& b, double t) {
  check_pair(a, b);
  MergeSpec{MergeMethod::Linear, t}.check();
  return combine_blocks(a, a.to_f32(), b.to_f32(), 1.0 - t, t);
}

MergeTree provenance(const Checkpoint& ckpt, std::string_view fallback) {
  if (auto it = ckpt.metadata.find(std::string(kMetaTree)); it != ckpt.metadata.end()) {
    return MergeTree::parse(it->second);
  }
  if (auto it = ckpt.metadata.find(std::string(kMetaId)); it != ckpt.metadata.end()) {
    return MergeTree::leaf(it->second);
  }
  return MergeTree::leaf(std::string(fallback));
}

Checkpoint merge_checkpoints(const Checkpoint& a, const Checkpoint& b,
                             const MergeSpec& spec) {
  spec.check();
  std::set<std::string> names_a, names_b;
  for (const auto& t : a.tensors) names_a.insert(t.name);
  for (const auto& t : b.tensors) names_b.insert(t.name);
  if (names_a != names_b) {
    std::vector<std::string> diff;
    std::set_symmetric_difference(names_a.begin(), names_a.end(), names_b.begin(),
                                  names_b.end(), std::back_inserter(diff));
    std::string listed;
    for (const auto& name : diff) {
      listed += listed.empty() ? "" : ", ";
      listed += name + (names_a.count(name) ? " (only in first)" : " (only in second)");
    }
    throw MergeError("tensor name sets differ: " + listed);
  }

  Checkpoint out;
  out.tensors.reserve(a.tensors.size());
  for (const auto& ta : a.tensors) {
    const TensorBlock& tb = *b.find(ta.name);
    if (ta.shape != tb.shape) {
      throw MergeError(fmt::format("tensor '{}': shape mismatch", ta.name));
    }
    out.tensors.push_back(spec.method == MergeMethod::Slerp
                              ? slerp_tensors(ta, tb, spec.ratio, spec.epsilon)
                              : lerp_tensors(ta, tb, spec.ratio));
  }

  const MergeTree tree = MergeTree::node(spec, provenance(a, "a"), provenance(b, "b"));
  out.metadata[std::string(kMetaTree)] = tree.to_string();
  out.metadata[std::string(kMetaApproximate)] = tree.has_slerp() ? "true" : "false";
  return out;
}

}  // namespace bamforge
