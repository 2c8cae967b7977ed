// SPDX-License-Identifier: Apache-2.0

#include "bamforge/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>
#include <set>
#include <thread>

#include <fmt/core.h>

#include "bamforge/ckpt.hpp"
#include "bamforge/hash.hpp"
#include "bamforge/process.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bamforge {

// ---------------------------------------------------------------------------
// Learning-rate schedule

void TrainConfig::check() const {
  if (!(max_lr > 0.0) || !std::isfinite(max_lr)) {
    throw PipelineError(fmt::format("max_lr must be positive (got {})", max_lr));
  }
  if (total_steps < 1) throw PipelineError("total_steps must be >= 1");
  if (batch_size < 1) throw PipelineError("batch_size must be >= 1");
}

std::uint64_t TrainConfig::warmup_steps() const {
  return std::max<std::uint64_t>(100, (total_steps + 99) / 100);
}

double lr_schedule(std::uint64_t step, const TrainConfig& cfg) {
  cfg.check();
  const std::uint64_t warmup = cfg.warmup_steps();
  if (cfg.total_steps <= warmup) {
    throw PipelineError(fmt::format("total_steps {} leaves no decay phase after {} warmup steps",
                                    cfg.total_steps, warmup));
  }
  if (step > cfg.total_steps) {
    throw PipelineError(fmt::format("step {} beyond total_steps {}", step, cfg.total_steps));
  }
  if (step < warmup) {
    return cfg.max_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double floor = 0.1 * cfg.max_lr;
  const double u = static_cast<double>(step - warmup) /
                   static_cast<double>(cfg.total_steps - warmup);
  return floor + (cfg.max_lr - floor) * (1.0 + std::cos(std::numbers::pi * u)) / 2.0;
}

// ---------------------------------------------------------------------------
// Spec parsing

namespace {

bool valid_part_id(std::string_view id) {
  return !id.empty() && std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
  });
}

Command parse_command(const json& j) {
  if (j.is_null()) return {};
  if (j.is_string()) return split_command(j.get<std::string>());
  return j.get<Command>();
}

json search_to_json(const RatioSearch& s) {
  return {{"lo", s.lo}, {"hi", s.hi}, {"step", s.step},
          {"weights", {s.weights.target, s.weights.retained}}};
}

RatioSearch search_from_json(const json& j) {
  RatioSearch s;
  s.lo = j.value("lo", s.lo);
  s.hi = j.value("hi", s.hi);
  s.step = j.value("step", s.step);
  if (j.contains("weights")) {
    const auto w = j["weights"].get<std::vector<double>>();
    if (w.size() != 2) throw PipelineError("search weights must be [w_target, w_retained]");
    s.weights = {w[0], w[1]};
  }
  return s;
}

void check_search(const RatioSearch& s) {
  try {
    grid(s.lo, s.hi, s.step);
    s.weights.check();
  } catch (const SelectError& e) {
    throw PipelineError(e.what());
  }
}

void check_ratio(double ratio, std::string_view what) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw PipelineError(fmt::format("{} ratio {} outside [0, 1]", what, ratio));
  }
}

json train_to_json(const TrainConfig& t) {
  return {{"max_lr", t.max_lr}, {"total_steps", t.total_steps}, {"batch_size", t.batch_size}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  if (j.is_null()) return t;
  t.max_lr = j.value("max_lr", t.max_lr);
  t.total_steps = j.value("total_steps", t.total_steps);
  t.batch_size = j.value("batch_size", t.batch_size);
  return t;
}

}  // namespace

void PipelineSpec::check() const {
  if (base.empty()) throw PipelineError("pipeline spec needs a base checkpoint id");
  if (parts.empty()) throw PipelineError("pipeline spec has no data parts");
  if (iterations.empty()) throw PipelineError("pipeline spec has no iterations");
  std::set<std::string> declared;
  for (const auto& p : parts) {
    if (!valid_part_id(p)) throw PipelineError(fmt::format("invalid data part id '{}'", p));
    if (!declared.insert(p).second) throw PipelineError(fmt::format("data part '{}' listed twice", p));
  }
  std::set<std::string> consumed;
  for (std::size_t i = 0; i < iterations.size(); ++i) {
    const auto& it = iterations[i];
    if (it.branches.size() < 2) {
      throw PipelineError(fmt::format("iteration {} needs at least two branches", i + 1));
    }
    for (const auto& b : it.branches) {
      if (!declared.count(b)) {
        throw PipelineError(fmt::format("iteration {} uses undeclared part '{}'", i + 1, b));
      }
      if (!consumed.insert(b).second) {
        throw PipelineError(fmt::format("data part '{}' consumed twice", b));
      }
    }
    if (it.inject_instruct && (!instruct || instruct->empty())) {
      throw PipelineError(
          fmt::format("iteration {} injects the instruct model but no instruct id is set", i + 1));
    }
    check_ratio(it.merge.ratio, "merge");
    check_ratio(it.instruct_ratio, "instruct");
    if (it.merge.search) check_search(*it.merge.search);
  }
  for (const auto& p : parts) {
    if (!consumed.count(p)) throw PipelineError(fmt::format("data part '{}' is never consumed", p));
  }
  train.check();
}

PipelineSpec PipelineSpec::from_json(const json& j, const fs::path& base_dir) {
  PipelineSpec spec;
  try {
    spec.base = j.at("base").get<std::string>();
    if (j.contains("instruct") && !j["instruct"].is_null()) {
      spec.instruct = j["instruct"].get<std::string>();
    }
    const json checkpoints = j.value("checkpoints", json::object());
    for (const auto& [id, path] : checkpoints.items()) {
      fs::path p = path.get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      spec.checkpoints[id] = p.lexically_normal().string();
    }
    spec.parts = j.at("parts").get<std::vector<std::string>>();
    for (const auto& ij : j.at("iterations")) {
      Iteration it;
      it.branches = ij.at("branches").get<std::vector<std::string>>();
      it.inject_instruct = ij.value("inject_instruct", false);
      it.instruct_ratio = ij.value("instruct_ratio", 0.5);
      if (ij.contains("merge")) {
        const auto& mj = ij["merge"];
        it.merge.method = parse_method(mj.value("method", std::string("slerp")));
        it.merge.ratio = mj.value("ratio", 0.5);
        if (mj.contains("search")) it.merge.search = search_from_json(mj["search"]);
      }
      spec.iterations.push_back(std::move(it));
    }
    spec.trainer = parse_command(j.value("trainer", json()));
    spec.evaluator = parse_command(j.value("evaluator", json()));
    spec.train = train_from_json(j.value("train", json()));
    if (j.contains("state_dir")) {
      fs::path p = j["state_dir"].get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      spec.state_dir = p.lexically_normal().string();
    }
  } catch (const json::exception& e) {
    throw PipelineError(fmt::format("malformed pipeline spec: {}", e.what()));
  } catch (const MergeError& e) {
    throw PipelineError(fmt::format("malformed pipeline spec: {}", e.what()));
  }
  spec.check();
  return spec;
}

PipelineSpec read_pipeline_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw PipelineError(fmt::format("cannot open pipeline spec '{}'", path.string()));
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw PipelineError(fmt::format("'{}' is not valid JSON", path.string()));
  return PipelineSpec::from_json(j, fs::absolute(path).parent_path());
}

// ---------------------------------------------------------------------------
// Plans

const char* kind_name(NodeKind kind) {
  switch (kind) {
    case NodeKind::Train: return "train";
    case NodeKind::Merge: return "merge";
    case NodeKind::Search: return "search";
  }
  return "?";
}

static NodeKind parse_kind(const std::string& name) {
  if (name == "train") return NodeKind::Train;
  if (name == "merge") return NodeKind::Merge;
  if (name == "search") return NodeKind::Search;
  throw PipelineError(fmt::format("unknown node kind '{}'", name));
}

const PlanNode* PipelinePlan::find(std::string_view id) const {
  auto it = std::find_if(nodes.begin(), nodes.end(), [&](const PlanNode& n) { return n.id == id; });
  return it == nodes.end() ? nullptr : &*it;
}

std::vector<std::string> PipelinePlan::validate() const {
  std::vector<std::string> problems;
  std::set<std::string> seen;
  std::set<std::string> data_parts;
  for (const auto& node : nodes) {
    if (!valid_part_id(node.id)) problems.push_back(fmt::format("invalid node id '{}'", node.id));
    if (sources.count(node.id)) {
      problems.push_back(fmt::format("node '{}' shadows a source checkpoint", node.id));
    }
    for (const auto& in : node.inputs) {
      if (!seen.count(in) && !sources.count(in)) {
        problems.push_back(fmt::format("node '{}': input '{}' is neither an earlier node nor a source",
                                       node.id, in));
      }
    }
    switch (node.kind) {
      case NodeKind::Train: {
        if (node.inputs.size() != 1) {
          problems.push_back(fmt::format("train node '{}' needs exactly one input", node.id));
        }
        const auto data = node.params.value("data", json());
        if (!data.is_string() || data.get<std::string>().empty()) {
          problems.push_back(fmt::format("train node '{}' has no data part", node.id));
        } else if (!data_parts.insert(data.get<std::string>()).second) {
          problems.push_back(fmt::format("data part '{}' trained twice", data.get<std::string>()));
        }
        break;
      }
      case NodeKind::Merge:
      case NodeKind::Search: {
        if (node.inputs.size() != 2) {
          problems.push_back(fmt::format("{} node '{}' needs exactly two inputs",
                                         kind_name(node.kind), node.id));
        }
        try {
          parse_method(node.params.value("method", std::string()));
          if (node.kind == NodeKind::Merge) {
            check_ratio(node.params.value("ratio", -1.0), "merge");
          } else {
            check_search(search_from_json(node.params));
          }
        } catch (const std::exception& e) {
          problems.push_back(fmt::format("node '{}': {}", node.id, e.what()));
        }
        break;
      }
    }
    if (!seen.insert(node.id).second) problems.push_back(fmt::format("duplicate node id '{}'", node.id));
  }

  if (!find(final_node)) {
    problems.push_back(fmt::format("final node '{}' is not in the plan", final_node));
    return problems;
  }
  // Every node must feed the final node.
  std::set<std::string> live{final_node};
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (!live.count(it->id)) continue;
    for (const auto& in : it->inputs) live.insert(in);
  }
  for (const auto& node : nodes) {
    if (!live.count(node.id)) {
      problems.push_back(fmt::format("node '{}' does not reach the final node", node.id));
    }
  }
  return problems;
}

json PipelinePlan::to_json() const {
  json j;
  j["version"] = 1;
  j["final"] = final_node;
  j["sources"] = sources;
  j["trainer"] = trainer;
  j["evaluator"] = evaluator;
  j["train"] = train_to_json(train);
  j["state_dir"] = state_dir;
  j["nodes"] = json::array();
  for (const auto& n : nodes) {
    j["nodes"].push_back({{"id", n.id}, {"kind", kind_name(n.kind)}, {"inputs", n.inputs},
                          {"params", n.params.is_null() ? json::object() : n.params}});
  }
  return j;
}

PipelinePlan PipelinePlan::from_json(const json& j) {
  PipelinePlan plan;
  try {
    if (j.value("version", 0) != 1) throw PipelineError("unsupported plan version");
    plan.final_node = j.at("final").get<std::string>();
    plan.sources = j.value("sources", json::object()).get<std::map<std::string, std::string>>();
    plan.trainer = parse_command(j.value("trainer", json()));
    plan.evaluator = parse_command(j.value("evaluator", json()));
    plan.train = train_from_json(j.value("train", json()));
    plan.state_dir = j.value("state_dir", std::string());
    for (const auto& nj : j.at("nodes")) {
      plan.nodes.push_back({nj.at("id").get<std::string>(),
                            parse_kind(nj.at("kind").get<std::string>()),
                            nj.at("inputs").get<std::vector<std::string>>(),
                            nj.value("params", json::object())});
    }
  } catch (const json::exception& e) {
    throw PipelineError(fmt::format("malformed plan: {}", e.what()));
  }
  return plan;
}

PipelinePlan read_plan(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw PipelineError(fmt::format("cannot open plan '{}'", path.string()));
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw PipelineError(fmt::format("'{}' is not valid JSON", path.string()));
  return PipelinePlan::from_json(j);
}

void write_plan(const PipelinePlan& plan, const fs::path& path) {
  std::ofstream out(path);
  out << plan.to_json().dump(2) << '\n';
  if (!out) throw PipelineError(fmt::format("cannot write plan '{}'", path.string()));
}

namespace {

json merge_params(const MergePolicy& policy) {
  if (policy.search) {
    json p = search_to_json(*policy.search);
    p["method"] = method_name(policy.method);
    return p;
  }
  return {{"method", method_name(policy.method)}, {"ratio", policy.ratio}};
}

}  // namespace

PipelinePlan build_plan(const PipelineSpec& spec) {
  spec.check();
  PipelinePlan plan;
  plan.sources = spec.checkpoints;
  plan.sources.try_emplace(spec.base, "");
  if (spec.instruct) plan.sources.try_emplace(*spec.instruct, "");
  plan.trainer = spec.trainer;
  plan.evaluator = spec.evaluator;
  plan.train = spec.train;
  plan.state_dir = spec.state_dir;

  std::string current = spec.base;
  for (std::size_t i = 0; i < spec.iterations.size(); ++i) {
    const auto& it = spec.iterations[i];
    const std::size_t n = i + 1;
    std::vector<std::string> outputs;
    for (const auto& part : it.branches) {
      plan.nodes.push_back({"train_" + part, NodeKind::Train, {current}, {{"data", part}}});
      outputs.push_back(plan.nodes.back().id);
    }
    if (it.inject_instruct) {
      const std::string id = fmt::format("inject_{}", n);
      plan.nodes.push_back({id, NodeKind::Merge, {outputs.back(), *spec.instruct},
                            {{"method", method_name(it.merge.method)},
                             {"ratio", it.instruct_ratio}}});
      outputs.back() = id;
    }
    // Branches fold left to right; only the last merge honours a search directive.
    std::string acc = outputs.front();
    for (std::size_t b = 1; b < outputs.size(); ++b) {
      const bool last = b + 1 == outputs.size();
      const std::string id = last ? fmt::format("merge_{}", n) : fmt::format("merge_{}_{}", n, b);
      const bool search = last && it.merge.search.has_value();
      MergePolicy policy = it.merge;
      if (!last) policy.search.reset();
      plan.nodes.push_back({id, search ? NodeKind::Search : NodeKind::Merge, {acc, outputs[b]},
                            merge_params(policy)});
      acc = id;
    }
    current = acc;
  }
  plan.final_node = current;
  if (auto problems = plan.validate(); !problems.empty()) {
    throw PipelineError("internal error, built an invalid plan: " + problems.front());
  }
  return plan;
}

PipelinePlan build_ift_language_plan(const std::vector<std::string>& english_parts,
                                     const std::vector<std::string>& target_parts,
                                     const std::string& base_id, MergePolicy merge) {
  if (english_parts.empty()) throw PipelineError("English instruction branch has no parts");
  if (target_parts.empty()) throw PipelineError("target-language instruction branch has no parts");
  auto join = [](const std::vector<std::string>& parts) {
    std::string out;
    for (const auto& p : parts) {
      if (p.empty() || p.find(',') != std::string::npos) {
        throw PipelineError(fmt::format("invalid instruction dataset id '{}'", p));
      }
      out += out.empty() ? p : "," + p;
    }
    return out;
  };
  PipelinePlan plan;
  plan.sources[base_id] = "";
  plan.nodes.push_back({"train_target", NodeKind::Train, {base_id},
                        {{"data", join(target_parts)}, {"parts", target_parts}}});
  plan.nodes.push_back({"train_english", NodeKind::Train, {base_id},
                        {{"data", join(english_parts)}, {"parts", english_parts}}});
  plan.nodes.push_back({"merge_1", merge.search ? NodeKind::Search : NodeKind::Merge,
                        {"train_target", "train_english"}, merge_params(merge)});
  plan.final_node = "merge_1";
  if (auto problems = plan.validate(); !problems.empty()) throw PipelineError(problems.front());
  return plan;
}

// ---------------------------------------------------------------------------
// Execution

namespace {

std::string file_digest(const fs::path& path) {
  return hex64(fnv1a64(read_file_bytes(path)));
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << text;
    out.flush();
    if (!out) throw PipelineError(fmt::format("cannot write '{}'", tmp.string()));
  }
  fs::rename(tmp, path);
}

void write_checkpoint_atomic(const Checkpoint& ckpt, const fs::path& path) {
  const fs::path tmp = path.string() + ".partial";
  write_checkpoint(ckpt, tmp);
  fs::rename(tmp, path);
}

class Executor {
 public:
  Executor(const PipelinePlan& plan, fs::path state) : plan_(plan), state_(std::move(state)) {}

  ExecuteReport run(const ExecuteOptions& options);

 private:
  fs::path node_ckpt(const std::string& id) const { return state_ / (id + ".ckpt"); }
  fs::path marker(const std::string& id) const { return state_ / (id + ".done"); }

  fs::path path_of(const std::string& id) const {
    if (plan_.find(id)) return node_ckpt(id);
    return plan_.sources.at(id);
  }

  void prepare_state_dir();
  bool verify_marker(const PlanNode& node);
  void write_marker(const PlanNode& node);
  void run_node(const PlanNode& node);
  void run_train(const PlanNode& node);
  void run_merge(const PlanNode& node);
  void run_search(const PlanNode& node);
  Checkpoint load_input(const std::string& id) const;

  std::string digest_of(const std::string& id) {
    std::lock_guard lock(mu_);
    auto it = digests_.find(id);
    if (it != digests_.end()) return it->second;
    return digests_[id] = file_digest(path_of(id));
  }

  const PipelinePlan& plan_;
  fs::path state_;
  std::mutex mu_;
  std::map<std::string, std::string> digests_;
  std::set<std::string> done_;
};

void Executor::prepare_state_dir() {
  fs::create_directories(state_);
  json current = plan_.to_json();
  current.erase("state_dir");
  const fs::path plan_file = state_ / "plan.json";
  if (fs::exists(plan_file)) {
    std::ifstream in(plan_file);
    json stored = json::parse(in, nullptr, false);
    if (stored.is_discarded()) {
      throw PipelineError(fmt::format("corrupted state: '{}' is not valid JSON", plan_file.string()));
    }
    stored.erase("state_dir");
    if (stored != current) {
      throw PipelineError(fmt::format("state directory '{}' belongs to a different plan",
                                      state_.string()));
    }
    return;
  }
  write_text_atomic(plan_file, current.dump(2) + "\n");
}

bool Executor::verify_marker(const PlanNode& node) {
  const fs::path m = marker(node.id);
  if (!fs::exists(m)) return false;
  std::ifstream in(m);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object() || j.value("node", std::string()) != node.id ||
      !j.contains("output") || !j["output"].is_string() || !j.contains("inputs") ||
      !j["inputs"].is_object()) {
    throw PipelineError(fmt::format("corrupted state marker '{}'", m.string()));
  }
  bool valid = fs::exists(node_ckpt(node.id)) &&
               file_digest(node_ckpt(node.id)) == j["output"].get<std::string>();
  for (const auto& in_id : node.inputs) {
    if (!valid) break;
    if (plan_.find(in_id) && !done_.count(in_id)) {
      valid = false;
    } else {
      valid = j["inputs"].value(in_id, std::string()) == digest_of(in_id);
    }
  }
  if (!valid) fs::remove(m);
  return valid;
}

void Executor::write_marker(const PlanNode& node) {
  json j{{"node", node.id}, {"output", digest_of(node.id)}, {"inputs", json::object()}};
  for (const auto& in_id : node.inputs) j["inputs"][in_id] = digest_of(in_id);
  write_text_atomic(marker(node.id), j.dump(2) + "\n");
}

Checkpoint Executor::load_input(const std::string& id) const {
  Checkpoint ckpt = read_checkpoint(path_of(id));
  const PlanNode* node = plan_.find(id);
  if (node && node->kind != NodeKind::Train) return ckpt;  // carries its merge tree
  // Trained branches and sources enter merge trees as leaves.
  ckpt.metadata.erase(std::string(kMetaTree));
  ckpt.metadata[std::string(kMetaId)] = node ? node->params["data"].get<std::string>() : id;
  return ckpt;
}

void Executor::run_train(const PlanNode& node) {
  const std::string data = node.params["data"].get<std::string>();
  const fs::path out = state_ / (node.id + ".ckpt.partial");
  const fs::path config = state_ / (node.id + ".config.json");
  fs::remove(out);
  json cfg = train_to_json(plan_.train);
  cfg["node"] = node.id;
  cfg["data"] = data;
  cfg["warmup_steps"] = plan_.train.warmup_steps();
  write_text_atomic(config, cfg.dump(2) + "\n");

  Command argv = plan_.trainer;
  argv.insert(argv.end(), {"--base", path_of(node.inputs[0]).string(), "--data", data, "--out",
                           out.string(), "--config", config.string()});
  const int rc = run_process(argv);
  if (rc != 0) throw PipelineError(fmt::format("trainer exited with status {}", rc));
  if (!fs::exists(out)) throw PipelineError("trainer wrote no checkpoint");
  read_checkpoint(out);
  fs::rename(out, node_ckpt(node.id));
}

void Executor::run_merge(const PlanNode& node) {
  const MergeSpec spec{parse_method(node.params["method"].get<std::string>()),
                       node.params["ratio"].get<double>()};
  write_checkpoint_atomic(
      merge_checkpoints(load_input(node.inputs[0]), load_input(node.inputs[1]), spec),
      node_ckpt(node.id));
}

void Executor::run_search(const PlanNode& node) {
  const MergeMethod method = parse_method(node.params["method"].get<std::string>());
  const RatioSearch search = search_from_json(node.params);
  const Checkpoint a = load_input(node.inputs[0]);
  const Checkpoint b = load_input(node.inputs[1]);

  std::vector<Candidate> candidates;
  std::vector<fs::path> files;
  json summary{{"node", node.id}, {"candidates", json::array()}};
  for (double ratio : grid(search.lo, search.hi, search.step)) {
    const std::string tag = fmt::format("{}.r{}", node.id, format_ratio(ratio));
    const fs::path ckpt_path = state_ / (tag + ".ckpt");
    const fs::path scores_path = state_ / (tag + ".scores.json");
    write_checkpoint(merge_checkpoints(a, b, MergeSpec{method, ratio}), ckpt_path);
    Command argv = plan_.evaluator;
    argv.insert(argv.end(), {"--ckpt", ckpt_path.string(), "--out", scores_path.string()});
    const int rc = run_process(argv);
    if (rc != 0) {
      throw PipelineError(fmt::format("evaluator exited with status {} at ratio {}", rc,
                                      format_ratio(ratio)));
    }
    candidates.push_back({ratio, read_score_table(scores_path)});
    files.push_back(ckpt_path);
    const auto avg = aggregate(candidates.back().table);
    summary["candidates"].push_back({{"ratio", ratio},
                                     {"target_avg", avg.target},
                                     {"retained_avg", avg.retained},
                                     {"objective", selection_objective(avg, search.weights)}});
  }
  const double best = select_best(candidates, search.weights);
  summary["selected"] = best;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i].ratio == best) {
      fs::rename(files[i], node_ckpt(node.id));
    } else {
      fs::remove(files[i]);
    }
  }
  write_text_atomic(state_ / (node.id + ".search.json"), summary.dump(2) + "\n");
}

void Executor::run_node(const PlanNode& node) {
  switch (node.kind) {
    case NodeKind::Train: run_train(node); break;
    case NodeKind::Merge: run_merge(node); break;
    case NodeKind::Search: run_search(node); break;
  }
}

ExecuteReport Executor::run(const ExecuteOptions& options) {
  if (auto problems = plan_.validate(); !problems.empty()) {
    throw PipelineError("invalid plan: " + problems.front());
  }
  for (const auto& node : plan_.nodes) {
    if (node.kind == NodeKind::Train && plan_.trainer.empty()) {
      throw PipelineError("plan has train nodes but no trainer hook");
    }
    if (node.kind == NodeKind::Search && plan_.evaluator.empty()) {
      throw PipelineError("plan has search nodes but no evaluator hook");
    }
    for (const auto& in : node.inputs) {
      if (plan_.find(in)) continue;
      const auto& path = plan_.sources.at(in);
      if (path.empty() || !fs::exists(path)) {
        throw PipelineError(fmt::format("missing input checkpoint '{}' ({})", in,
                                        path.empty() ? "no path given" : path));
      }
    }
  }
  prepare_state_dir();

  ExecuteReport report;
  std::vector<const PlanNode*> pending;
  for (const auto& node : plan_.nodes) {
    if (verify_marker(node)) {
      done_.insert(node.id);
      report.skipped.push_back(node.id);
    } else {
      pending.push_back(&node);
    }
  }

  const std::size_t width = std::max<std::size_t>(options.max_parallel, 1);
  while (!pending.empty()) {
    std::vector<const PlanNode*> wave;
    for (const PlanNode* node : pending) {
      if (wave.size() == width) break;
      const bool ready = std::all_of(node->inputs.begin(), node->inputs.end(), [&](const auto& in) {
        return !plan_.find(in) || done_.count(in);
      });
      if (ready) wave.push_back(node);
    }
    if (options.stop_after) {
      const std::size_t budget = *options.stop_after - std::min(*options.stop_after, report.executed.size());
      if (wave.size() > budget) wave.resize(budget);
      if (wave.empty()) break;
    }

    std::vector<std::string> errors(wave.size());
    auto attempt = [&](std::size_t i) {
      try {
        run_node(*wave[i]);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    };
    if (wave.size() == 1) {
      attempt(0);
    } else {
      std::vector<std::thread> threads;
      for (std::size_t i = 0; i < wave.size(); ++i) threads.emplace_back(attempt, i);
      for (auto& t : threads) t.join();
    }

    std::string failure;
    for (std::size_t i = 0; i < wave.size(); ++i) {
      if (!errors[i].empty()) {
        if (failure.empty()) failure = fmt::format("node '{}' failed: {}", wave[i]->id, errors[i]);
        continue;
      }
      write_marker(*wave[i]);
      done_.insert(wave[i]->id);
      report.executed.push_back(wave[i]->id);
    }
    if (!failure.empty()) throw PipelineError(failure);
    std::erase_if(pending, [&](const PlanNode* n) { return done_.count(n->id) > 0; });
  }

  report.complete = done_.count(plan_.final_node) > 0;
  report.final_checkpoint = node_ckpt(plan_.final_node);
  return report;
}

}  // namespace

ExecuteReport execute(const PipelinePlan& plan, const fs::path& state_dir,
                      const ExecuteOptions& options) {
  if (state_dir.empty()) throw PipelineError("no state directory given");
  return Executor(plan, state_dir).run(options);
}

}  // namespace bamforge
