// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint interpolation (SLERP and linear), nested merge expressions and
// the effective weight each source checkpoint carries through a nest.

#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

#include "bamforge/ckpt.hpp"

namespace bamforge {

enum class MergeMethod { Slerp, Linear };

const char* method_name(MergeMethod method);
MergeMethod parse_method(std::string_view name);

struct MergeSpec {
  MergeMethod method = MergeMethod::Slerp;
  double ratio = 0.5;       // weight of the second operand
  double epsilon = 1e-7;    // colinearity threshold on 1 - |cos|

  void check() const;
};

class MergeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Metadata keys written by merge_checkpoints.
inline constexpr std::string_view kMetaId = "bamforge.id";
inline constexpr std::string_view kMetaTree = "bamforge.tree";
inline constexpr std::string_view kMetaApproximate = "bamforge.weights_approximate";

/// Immutable merge expression. Leaves name checkpoints; nodes interpolate
/// their children with `spec.ratio` weighting the right child.
class MergeTree {
 public:
  static MergeTree leaf(std::string id);
  static MergeTree node(MergeSpec spec, MergeTree left, MergeTree right);

  bool is_leaf() const { return left_ == nullptr; }
  const std::string& id() const { return id_; }
  const MergeSpec& spec() const { return spec_; }
  const MergeTree& left() const { return *left_; }
  const MergeTree& right() const { return *right_; }

  /// True if any node uses SLERP.
  bool has_slerp() const;

  /// `method(ratio, left, right)`; ratios print with at least two decimals
  /// and round-trip exactly.
  std::string to_string() const;
  static MergeTree parse(std::string_view text);

 private:
  MergeTree() = default;

  std::string id_;
  MergeSpec spec_;
  std::shared_ptr<const MergeTree> left_;
  std::shared_ptr<const MergeTree> right_;
};

std::string format_ratio(double ratio);

TensorBlock slerp_tensors(const TensorBlock& a, const TensorBlock& b, double t,
                          double epsilon = 1e-7);
TensorBlock lerp_tensors(const TensorBlock& a, const TensorBlock& b, double t);

/// Provenance of a checkpoint: its recorded tree, else a leaf named by its
/// id metadata, else `fallback`.
MergeTree provenance(const Checkpoint& ckpt, std::string_view fallback);

Checkpoint merge_checkpoints(const Checkpoint& a, const Checkpoint& b,
                             const MergeSpec& spec);

/// Linear-composition weights per leaf id. Exact for linear trees; for
/// trees containing SLERP nodes this is the usual linear approximation.
std::map<std::string, double> effective_weights(const MergeTree& tree);

}  // namespace bamforge
