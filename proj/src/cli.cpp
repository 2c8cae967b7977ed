// SPDX-License-Identifier: Apache-2.0

#include "bamforge/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <ostream>

#include <fmt/core.h>
#include <fmt/ranges.h>

#include "CLI11.hpp"
#include "bamforge/ckpt.hpp"
#include "bamforge/merge.hpp"
#include "bamforge/modelio.hpp"
#include "bamforge/pipeline.hpp"
#include "bamforge/process.hpp"
#include "bamforge/score.hpp"
#include "bamforge/select.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bamforge::cli {
namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string num(double v) { return fmt::format("{:.6g}", v); }

void write_json(const json& j, const std::string& path) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path));
}

std::vector<double> split_numbers(const std::string& text, std::size_t expected, const char* flag) {
  std::vector<double> out;
  std::size_t start = 0;
  while (true) {
    const auto colon = text.find(':', start);
    const std::string piece = text.substr(start, colon == std::string::npos ? std::string::npos : colon - start);
    try {
      std::size_t used = 0;
      out.push_back(std::stod(piece, &used));
      if (used != piece.size()) throw std::invalid_argument(piece);
    } catch (const std::exception&) {
      throw UsageError(fmt::format("{}: '{}' is not a number", flag, piece));
    }
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  if (out.size() != expected) {
    throw UsageError(fmt::format("{} expects {} colon-separated numbers", flag, expected));
  }
  return out;
}

std::string env_state_dir() {
  const char* env = std::getenv("BAMFORGE_STATE");
  return env ? env : "";
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open '{}'", path));
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error(fmt::format("'{}' is not valid JSON", path));
  return j;
}

std::string leaf_id(const std::string& path, const std::string& fallback) {
  const Checkpoint ckpt = read_checkpoint(path);
  auto it = ckpt.metadata.find(std::string(kMetaId));
  if (it == ckpt.metadata.end() || it->second.empty() || ckpt.metadata.count(std::string(kMetaTree))) {
    return fallback;
  }
  const bool plain = std::all_of(it->second.begin(), it->second.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
  });
  return plain ? it->second : fallback;
}

// --- subcommand bodies ----------------------------------------------------

struct MergeArgs {
  std::string a, b, method = "slerp", out;
  double ratio = 0.5;
  double epsilon = 1e-7;
};

int cmd_merge(const MergeArgs& args, std::ostream& out) {
  const MergeSpec spec{parse_method(args.method), args.ratio, args.epsilon};
  const Checkpoint a = read_checkpoint(args.a);
  const Checkpoint b = read_checkpoint(args.b);
  const Checkpoint merged = merge_checkpoints(a, b, spec);
  write_checkpoint(merged, args.out);
  out << fmt::format("merged {} tensors: {}\n", merged.tensors.size(),
                     merged.metadata.at(std::string(kMetaTree)));
  out << fmt::format("wrote {}\n", args.out);
  return 0;
}

int cmd_weights(const std::string& expr, const std::string& out_path, std::ostream& out) {
  const MergeTree tree = MergeTree::parse(expr);
  const auto weights = effective_weights(tree);
  json j{{"tree", tree.to_string()}, {"approximate", tree.has_slerp()}, {"weights", weights}};
  for (const auto& [id, w] : weights) out << id << ' ' << num(w) << '\n';
  if (tree.has_slerp()) out << "(approximate: SLERP nodes use linear-composition weights)\n";
  if (!out_path.empty()) write_json(j, out_path);
  return 0;
}

int cmd_plan(const std::string& spec_path, const std::string& out_path, const std::string& state_flag,
             std::ostream& out) {
  PipelineSpec spec = read_pipeline_spec(spec_path);
  if (!state_flag.empty()) {
    spec.state_dir = state_flag;
  } else if (auto env = env_state_dir(); !env.empty()) {
    spec.state_dir = env;
  }
  const PipelinePlan plan = build_plan(spec);
  write_plan(plan, out_path);
  for (const auto& node : plan.nodes) {
    out << fmt::format("{:<12} {:<6} <- {}\n", node.id, kind_name(node.kind),
                       fmt::format("{}", fmt::join(node.inputs, ", ")));
  }
  out << fmt::format("{} nodes, final {}; wrote {}\n", plan.nodes.size(), plan.final_node, out_path);
  return 0;
}

int cmd_run(const std::string& plan_path, const std::string& state_flag, std::size_t parallel,
            std::optional<std::size_t> stop_after, std::ostream& out) {
  const PipelinePlan plan = read_plan(plan_path);
  std::string state = state_flag;
  if (state.empty()) state = env_state_dir();
  if (state.empty()) state = plan.state_dir;
  if (state.empty()) throw UsageError("no state directory: pass --state or set BAMFORGE_STATE");
  const auto report = execute(plan, state, {parallel, stop_after});
  out << fmt::format("executed {} nodes, {} already complete\n", report.executed.size(),
                     report.skipped.size());
  if (report.complete) {
    out << fmt::format("final checkpoint {}\n", report.final_checkpoint.string());
  } else {
    out << "stopped before the final node\n";
  }
  return 0;
}

int cmd_search(const std::string& spec_path, const std::string& grid_flag,
               const std::string& weights_flag, const std::string& out_path, std::ostream& out) {
  const json spec = read_json_file(spec_path);
  const fs::path spec_dir = fs::absolute(spec_path).parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path path = p;
    return (path.is_relative() ? spec_dir / path : path).lexically_normal().string();
  };

  RatioSearch search;
  if (spec.contains("grid")) {
    search.lo = spec["grid"].value("lo", search.lo);
    search.hi = spec["grid"].value("hi", search.hi);
    search.step = spec["grid"].value("step", search.step);
  }
  if (spec.contains("weights")) {
    const auto w = spec["weights"].get<std::vector<double>>();
    if (w.size() != 2) throw std::runtime_error("spec weights must be [w_target, w_retained]");
    search.weights = {w[0], w[1]};
  }
  if (!grid_flag.empty()) {
    const auto g = split_numbers(grid_flag, 3, "--grid");
    search.lo = g[0];
    search.hi = g[1];
    search.step = g[2];
  }
  if (!weights_flag.empty()) {
    const auto w = split_numbers(weights_flag, 2, "--weights");
    search.weights = {w[0], w[1]};
  }

  json result{{"weights", {search.weights.target, search.weights.retained}},
              {"candidates", json::array()}};
  double selected = 0.0;

  if (spec.contains("candidates")) {
    // Pre-computed score tables; only the grid points are considered.
    const auto points = grid(search.lo, search.hi, search.step);
    std::vector<Candidate> candidates;
    for (const auto& cj : spec["candidates"]) {
      const double ratio = cj.at("ratio").get<double>();
      const bool on_grid = std::any_of(points.begin(), points.end(),
                                       [&](double r) { return std::abs(r - ratio) < 1e-9; });
      if (!on_grid) continue;
      const auto& sj = cj.at("scores");
      ScoreTable table = sj.is_string() ? read_score_table(resolve(sj.get<std::string>()))
                                        : ScoreTable::from_json(sj);
      candidates.push_back({ratio, std::move(table)});
    }
    if (candidates.empty()) throw std::runtime_error("no candidate ratio lies on the search grid");
    selected = select_best(candidates, search.weights);
    for (const auto& c : candidates) {
      const auto avg = aggregate(c.table);
      result["candidates"].push_back({{"ratio", c.ratio},
                                      {"target_avg", avg.target},
                                      {"retained_avg", avg.retained},
                                      {"objective", selection_objective(avg, search.weights)}});
      out << fmt::format("ratio {}  target {}  retained {}  objective {}\n", format_ratio(c.ratio),
                         num(avg.target), num(avg.retained),
                         num(selection_objective(avg, search.weights)));
    }
  } else {
    // Merge-and-evaluate: run a one-node plan in the work directory.
    // Leaves are named after the inputs' recorded ids when those are usable.
    const std::string path_a = resolve(spec.at("a").get<std::string>());
    const std::string path_b = resolve(spec.at("b").get<std::string>());
    std::string id_a = leaf_id(path_a, "A");
    std::string id_b = leaf_id(path_b, "B");
    if (id_a == id_b || id_a == "search" || id_b == "search") id_a = "A", id_b = "B";
    PipelinePlan plan;
    plan.sources = {{id_a, path_a}, {id_b, path_b}};
    const json ev = spec.at("evaluator");
    plan.evaluator = ev.is_string() ? split_command(ev.get<std::string>()) : ev.get<Command>();
    json params{{"method", spec.value("method", std::string("slerp"))},
                {"lo", search.lo},
                {"hi", search.hi},
                {"step", search.step},
                {"weights", {search.weights.target, search.weights.retained}}};
    plan.nodes.push_back({"search", NodeKind::Search, {id_a, id_b}, params});
    plan.final_node = "search";
    const std::string workdir = resolve(spec.value("workdir", std::string("search-work")));
    const auto report = execute(plan, workdir);
    const json summary = read_json_file((fs::path(workdir) / "search.search.json").string());
    selected = summary.at("selected").get<double>();
    result["candidates"] = summary.at("candidates");
    result["checkpoint"] = report.final_checkpoint.string();
    for (const auto& c : summary["candidates"]) {
      out << fmt::format("ratio {}  target {}  retained {}  objective {}\n",
                         format_ratio(c["ratio"].get<double>()), num(c["target_avg"].get<double>()),
                         num(c["retained_avg"].get<double>()), num(c["objective"].get<double>()));
    }
    if (spec.contains("out")) {
      fs::copy_file(report.final_checkpoint, resolve(spec["out"].get<std::string>()),
                    fs::copy_options::overwrite_existing);
      result["checkpoint"] = resolve(spec["out"].get<std::string>());
    }
  }
  result["selected"] = selected;
  out << fmt::format("selected ratio {}\n", format_ratio(selected));
  if (!out_path.empty()) write_json(result, out_path);
  return 0;
}

struct ScoreArgs {
  std::string mode, tasks, endpoint, exemplars, out, name, group = "target";
  std::size_t shots = 0;
  std::size_t parallel = 1;
  bool length_normalize = false;
  std::uint32_t max_tokens = 256;
  int retries = 2;
  double timeout_s = 30.0;
};

template <typename Item>
std::pair<std::vector<Item>, std::vector<Exemplar>> split_shots(std::vector<Item> items,
                                                                std::vector<Item> pool,
                                                                std::size_t k) {
  std::vector<Exemplar> exemplars;
  if (pool.empty()) {
    // No exemplar file: the first k tasks become exemplars and are not scored.
    if (k > 0 && k >= items.size()) {
      throw UsageError(fmt::format("{} tasks cannot supply {} exemplars and still leave items to score",
                                   items.size(), k));
    }
    pool.assign(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(k));
    items.erase(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(k));
  }
  for (const auto& p : pool) exemplars.push_back(as_exemplar(p));
  return {std::move(items), std::move(exemplars)};
}

int cmd_score(const ScoreArgs& args, std::ostream& out) {
  EndpointConfig config = parse_endpoint_spec(args.endpoint);
  config.retries = args.retries;
  config.max_inflight = std::max<std::size_t>(args.parallel, 1);
  config.timeout = std::chrono::milliseconds(static_cast<long long>(args.timeout_s * 1000));
  if (const char* token = std::getenv("BAMFORGE_BEARER_TOKEN")) config.bearer_token = token;
  auto model = connect(config);

  ScoringOptions options;
  options.parallelism = args.parallel;
  options.length_normalize = args.length_normalize;
  options.max_tokens = args.max_tokens;

  ScoreResult result;
  std::size_t scored = 0;
  if (args.mode == "mc") {
    auto [items, exemplars] = split_shots(read_mc_tasks(args.tasks),
                                          args.exemplars.empty() ? std::vector<MCItem>{}
                                                                 : read_mc_tasks(args.exemplars),
                                          args.shots);
    result = score_multiple_choice(*model, items, args.shots, exemplars, options);
    scored = items.size();
  } else {
    auto [items, exemplars] = split_shots(read_qa_tasks(args.tasks),
                                          args.exemplars.empty() ? std::vector<QAItem>{}
                                                                 : read_qa_tasks(args.exemplars),
                                          args.shots);
    result = score_generation(*model, items, args.shots, exemplars, extract_last_number, options);
    scored = items.size();
  }

  const std::string bench = args.name.empty() ? fs::path(args.tasks).stem().string() : args.name;
  out << fmt::format("{}: {} ({} / {} correct, {}-shot)\n", bench, num(result.score), result.correct,
                     scored, args.shots);
  if (!args.out.empty()) {
    ScoreTable table;
    if (fs::exists(args.out)) table = read_score_table(args.out);
    table.set(bench, result.score, args.group == "target" ? BenchGroup::Target : BenchGroup::Retained);
    write_score_table(table, args.out);
  }
  return 0;
}

int cmd_judge(const std::string& records, const std::string& out_path, std::ostream& out) {
  const auto recs = read_judgments(records);
  const auto s = preference_balance(recs);
  out << fmt::format("records {}  A {}  B {}\n", recs.size(), num(s.total_a), num(s.total_b));
  out << fmt::format("ties (A first) {}  ties (B first) {}  flip rate {} over {} decisive pairs\n",
                     s.ties_ab, s.ties_ba, num(s.flip_rate), s.decisive_pairs);
  if (!out_path.empty()) {
    write_json({{"records", recs.size()},
                {"total_a", s.total_a},
                {"total_b", s.total_b},
                {"ties_ab", s.ties_ab},
                {"ties_ba", s.ties_ba},
                {"decisive_pairs", s.decisive_pairs},
                {"flip_rate", s.flip_rate}},
               out_path);
  }
  return 0;
}

int cmd_grade(const std::string& records, const std::string& out_path, std::ostream& out) {
  const auto grades = read_grades(records);
  const double avg = grade_average(grades);
  out << fmt::format("average grade {} over {} answers\n", num(avg), grades.size());
  if (!out_path.empty()) write_json({{"count", grades.size()}, {"average", avg}}, out_path);
  return 0;
}

int cmd_lr(std::uint64_t steps, double max_lr, std::uint64_t at, const std::string& out_path,
           std::ostream& out) {
  TrainConfig cfg;
  cfg.total_steps = steps;
  cfg.max_lr = max_lr;
  const double lr = lr_schedule(at, cfg);
  out << num(lr) << '\n';
  out << fmt::format("(warmup {} steps, floor {})\n", cfg.warmup_steps(), num(0.1 * max_lr));
  if (!out_path.empty()) {
    write_json({{"step", at}, {"total_steps", steps}, {"max_lr", max_lr},
                {"warmup_steps", cfg.warmup_steps()}, {"lr", lr}},
               out_path);
  }
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Checkpoint merging and branch-and-merge pipeline tools", "bamforge"};
  app.require_subcommand(1);

  MergeArgs merge_args;
  auto* merge = app.add_subcommand("merge", "Interpolate two checkpoints tensor by tensor");
  merge->add_option("--a", merge_args.a, "First checkpoint")->required();
  merge->add_option("--b", merge_args.b, "Second checkpoint")->required();
  merge->add_option("--method", merge_args.method, "slerp or linear")
      ->check(CLI::IsMember({"slerp", "linear"}));
  merge->add_option("--ratio", merge_args.ratio, "Weight of the second checkpoint")
      ->check(CLI::Range(0.0, 1.0));
  merge->add_option("--epsilon", merge_args.epsilon, "Colinearity threshold");
  merge->add_option("--out", merge_args.out, "Output checkpoint")->required();

  std::string tree_expr, weights_out;
  auto* weights = app.add_subcommand("weights", "Effective weight of each leaf in a merge tree");
  weights->add_option("--tree", tree_expr, "e.g. linear(0.5, G3, linear(0.5, G4, IT))")->required();
  weights->add_option("--out", weights_out, "JSON output file");

  std::string spec_path, plan_out, plan_state;
  auto* plan = app.add_subcommand("plan", "Build a pipeline plan from a spec file");
  plan->add_option("--spec", spec_path, "Pipeline spec (JSON)")->required();
  plan->add_option("--out", plan_out, "Plan output (JSON)")->required();
  plan->add_option("--state", plan_state, "State directory recorded in the plan");

  std::string run_plan, run_state;
  std::size_t run_parallel = 2;
  std::optional<std::size_t> run_stop;
  auto* run = app.add_subcommand("run", "Execute or resume a pipeline plan");
  run->add_option("--plan", run_plan, "Plan file")->required();
  run->add_option("--state", run_state, "State directory (default $BAMFORGE_STATE, then the plan's)");
  run->add_option("--max-parallel", run_parallel, "Concurrent hook processes")
      ->check(CLI::PositiveNumber);
  run->add_option("--stop-after", run_stop, "Stop after running this many nodes");

  std::string search_spec, search_grid, search_weights, search_out;
  auto* search = app.add_subcommand("search", "Merge-ratio search and bilingual selection");
  search->add_option("--spec", search_spec, "Search spec (JSON)")->required();
  search->add_option("--grid", search_grid, "lo:hi:step (default 0.3:0.7:0.05)");
  search->add_option("--weights", search_weights, "w_target:w_retained (default 2:1)");
  search->add_option("--out", search_out, "JSON result file");

  ScoreArgs score_args;
  auto* score = app.add_subcommand("score", "Score a model endpoint on a task file");
  score->add_option("mode", score_args.mode, "mc or gen")->required()->check(CLI::IsMember({"mc", "gen"}));
  score->add_option("--tasks", score_args.tasks, "Task file (JSON lines)")->required();
  score->add_option("--endpoint", score_args.endpoint, "stub:<seed>, cmd:<command> or http URL")->required();
  score->add_option("--shots", score_args.shots, "Exemplars per prompt");
  score->add_option("--exemplars", score_args.exemplars, "Exemplar file (default: first k tasks)");
  score->add_option("--out", score_args.out, "Score table to create or update");
  score->add_option("--name", score_args.name, "Benchmark name (default: task file stem)");
  score->add_option("--group", score_args.group, "target or retained")
      ->check(CLI::IsMember({"target", "retained"}));
  score->add_option("--parallel", score_args.parallel, "Concurrent requests")->check(CLI::PositiveNumber);
  score->add_flag("--length-normalize", score_args.length_normalize, "Per-byte option log-likelihood");
  score->add_option("--max-tokens", score_args.max_tokens, "Generation budget")->check(CLI::PositiveNumber);
  score->add_option("--retries", score_args.retries, "Retries per request")->check(CLI::NonNegativeNumber);
  score->add_option("--timeout", score_args.timeout_s, "Request timeout in seconds")->check(CLI::PositiveNumber);

  std::string judge_records, judge_out;
  auto* judge = app.add_subcommand("judge-score", "Dual-ordering preference points");
  judge->add_option("--records", judge_records, "Judgment file (JSON lines)")->required();
  judge->add_option("--out", judge_out, "JSON summary file");

  std::string grade_records, grade_out;
  auto* grade = app.add_subcommand("grade", "Average of 2..6 grades");
  grade->add_option("--records", grade_records, "Grade file (JSON lines)")->required();
  grade->add_option("--out", grade_out, "JSON summary file");

  std::uint64_t lr_steps = 0, lr_at = 0;
  double lr_max = 1e-5;
  std::string lr_out;
  auto* lr = app.add_subcommand("lr", "Learning rate at a step of the warmup + cosine schedule");
  lr->add_option("--steps", lr_steps, "Total steps")->required();
  lr->add_option("--max-lr", lr_max, "Peak learning rate");
  lr->add_option("--at", lr_at, "Step to evaluate")->required();
  lr->add_option("--out", lr_out, "JSON output file");

  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    const CLI::App* target = &app;
    for (auto* sub : app.get_subcommands()) target = sub;
    out << target->help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    if (auto nl = msg.find('\n'); nl != std::string::npos) msg.resize(nl);
    err << "usage error: " << msg << '\n';
    return 2;
  }

  try {
    if (merge->parsed()) return cmd_merge(merge_args, out);
    if (weights->parsed()) return cmd_weights(tree_expr, weights_out, out);
    if (plan->parsed()) return cmd_plan(spec_path, plan_out, plan_state, out);
    if (run->parsed()) return cmd_run(run_plan, run_state, run_parallel, run_stop, out);
    if (search->parsed()) return cmd_search(search_spec, search_grid, search_weights, search_out, out);
    if (score->parsed()) return cmd_score(score_args, out);
    if (judge->parsed()) return cmd_judge(judge_records, judge_out, out);
    if (grade->parsed()) return cmd_grade(grade_records, grade_out, out);
    if (lr->parsed()) return cmd_lr(lr_steps, lr_max, lr_at, lr_out, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << "usage error: no subcommand\n";
  return 2;
}

}  // namespace bamforge::cli
