// SPDX-License-Identifier: Apache-2.0
//
// Branch-and-merge pipelines: each iteration trains one branch per data part
// from the current base, optionally merges the instruct checkpoint into the
// last branch, then merges the branches into the next base.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bamforge/merge.hpp"
#include "bamforge/select.hpp"
#include "json.hpp"

namespace bamforge {

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double max_lr = 1e-5;
  std::uint64_t total_steps = 1000;
  std::uint32_t batch_size = 512;

  void check() const;
  /// max(100, ceil(0.01 * total_steps))
  std::uint64_t warmup_steps() const;
};

/// Linear warmup from 0 to max_lr over warmup_steps(), then cosine decay to
/// 0.1 * max_lr at total_steps. Requires total_steps > warmup_steps().
double lr_schedule(std::uint64_t step, const TrainConfig& cfg);

struct RatioSearch {
  double lo = 0.3;
  double hi = 0.7;
  double step = 0.05;
  SelectionWeights weights;
};

struct MergePolicy {
  MergeMethod method = MergeMethod::Slerp;
  double ratio = 0.5;
  std::optional<RatioSearch> search;  // replaces the fixed ratio when set
};

struct Iteration {
  std::vector<std::string> branches;
  bool inject_instruct = false;
  MergePolicy merge;
  double instruct_ratio = 0.5;  // weight of the instruct model in the injection merge
};

using Command = std::vector<std::string>;

struct PipelineSpec {
  std::string base;
  std::optional<std::string> instruct;
  std::map<std::string, std::string> checkpoints;  // source id -> path
  std::vector<std::string> parts;
  std::vector<Iteration> iterations;
  Command trainer;
  Command evaluator;
  TrainConfig train;
  std::string state_dir;

  void check() const;

  /// Relative checkpoint paths resolve against `base_dir`.
  static PipelineSpec from_json(const nlohmann::json& j,
                                const std::filesystem::path& base_dir = {});
};

PipelineSpec read_pipeline_spec(const std::filesystem::path& path);

enum class NodeKind { Train, Merge, Search };

const char* kind_name(NodeKind kind);

struct PlanNode {
  std::string id;
  NodeKind kind = NodeKind::Train;
  std::vector<std::string> inputs;  // node ids or source ids
  nlohmann::json params;            // train: data; merge: method, ratio; search: grid
};

struct PipelinePlan {
  std::vector<PlanNode> nodes;
  std::string final_node;
  std::map<std::string, std::string> sources;
  Command trainer;
  Command evaluator;
  TrainConfig train;
  std::string state_dir;

  const PlanNode* find(std::string_view id) const;

  /// Violated plan invariants; empty when the plan is executable in order.
  std::vector<std::string> validate() const;

  nlohmann::json to_json() const;
  static PipelinePlan from_json(const nlohmann::json& j);
};

PipelinePlan read_plan(const std::filesystem::path& path);
void write_plan(const PipelinePlan& plan, const std::filesystem::path& path);

PipelinePlan build_plan(const PipelineSpec& spec);

/// One branch trained on all target-language parts, one on all English
/// parts, merged with the English branch as the second operand.
PipelinePlan build_ift_language_plan(const std::vector<std::string>& english_parts,
                                     const std::vector<std::string>& target_parts,
                                     const std::string& base_id, MergePolicy merge = {});

struct ExecuteOptions {
  std::size_t max_parallel = 2;
  /// Stop (successfully) after this many nodes have run in this call.
  std::optional<std::size_t> stop_after;
};

struct ExecuteReport {
  std::filesystem::path final_checkpoint;
  bool complete = false;
  std::vector<std::string> executed;
  std::vector<std::string> skipped;  // already complete and verified
};

/// Runs incomplete nodes in dependency order. Each finished node leaves
/// `<id>.ckpt` and a `<id>.done` marker holding output and input digests;
/// a marker whose digests no longer match is ignored and the node re-runs.
ExecuteReport execute(const PipelinePlan& plan, const std::filesystem::path& state_dir,
                      const ExecuteOptions& options = {});

}  // namespace bamforge
