// SPDX-License-Identifier: Apache-2.0

#include "bamforge/select.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/core.h>

namespace bamforge {

const char* group_name(BenchGroup group) {
  return group == BenchGroup::Target ? "target" : "retained";
}

static BenchGroup parse_group(const std::string& name) {
  if (name == "target") return BenchGroup::Target;
  if (name == "retained") return BenchGroup::Retained;
  throw SelectError(fmt::format("unknown benchmark group '{}'", name));
}

void ScoreTable::set(const std::string& bench, double score, BenchGroup group) {
  scores[bench] = score;
  groups[bench] = group;
}

void ScoreTable::check() const {
  for (const auto& [bench, score] : scores) {
    if (!(score >= 0.0 && score <= 100.0)) {
      throw SelectError(fmt::format("benchmark '{}': score {} outside [0, 100]", bench, score));
    }
    if (!groups.count(bench)) {
      throw SelectError(fmt::format("benchmark '{}' has no group", bench));
    }
  }
  for (const auto& [bench, group] : groups) {
    if (!scores.count(bench)) {
      throw SelectError(fmt::format("group entry '{}' has no score", bench));
    }
  }
}

nlohmann::json ScoreTable::to_json() const {
  nlohmann::json j;
  j["scores"] = nlohmann::json::object();
  j["group"] = nlohmann::json::object();
  for (const auto& [bench, score] : scores) j["scores"][bench] = score;
  for (const auto& [bench, group] : groups) j["group"][bench] = group_name(group);
  return j;
}

ScoreTable ScoreTable::from_json(const nlohmann::json& j) {
  ScoreTable table;
  try {
    for (const auto& [bench, score] : j.at("scores").items()) {
      table.scores[bench] = score.get<double>();
    }
    for (const auto& [bench, group] : j.at("group").items()) {
      table.groups[bench] = parse_group(group.get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw SelectError(fmt::format("malformed score table: {}", e.what()));
  }
  table.check();
  return table;
}

ScoreTable read_score_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SelectError(fmt::format("cannot open score table '{}'", path.string()));
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SelectError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return ScoreTable::from_json(j);
}

void write_score_table(const ScoreTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  out << table.to_json().dump(2) << '\n';
  if (!out) throw SelectError(fmt::format("cannot write score table '{}'", path.string()));
}

void SelectionWeights::check() const {
  if (!(target > 0.0) || !(retained > 0.0)) {
    throw SelectError(fmt::format("selection weights must be positive (got {}, {})",
                                  target, retained));
  }
}

std::vector<double> grid(double lo, double hi, double step) {
  if (!(step > 0.0)) throw SelectError(fmt::format("grid step {} must be positive", step));
  if (!(lo >= 0.0 && hi <= 1.0)) {
    throw SelectError(fmt::format("grid [{}, {}] outside [0, 1]", lo, hi));
  }
  if (lo > hi) throw SelectError(fmt::format("grid lower bound {} exceeds upper {}", lo, hi));

  constexpr double kSnap = 1e-9;
  const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step + kSnap)) + 1;
  std::vector<double> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    double r = lo + static_cast<double>(i) * step;
    r = std::round(r * 1e12) / 1e12;
    if (std::abs(r - hi) < kSnap) r = hi;
    out.push_back(std::min(r, hi));
  }
  return out;
}

GroupAverages aggregate(const ScoreTable& table) {
  table.check();
  double sum[2] = {0.0, 0.0};
  std::size_t n[2] = {0, 0};
  for (const auto& [bench, score] : table.scores) {
    const int g = table.groups.at(bench) == BenchGroup::Target ? 0 : 1;
    sum[g] += score;
    ++n[g];
  }
  if (n[0] == 0) throw SelectError("score table has no target-language benchmark");
  if (n[1] == 0) throw SelectError("score table has no retained-language benchmark");
  return {sum[0] / static_cast<double>(n[0]), sum[1] / static_cast<double>(n[1])};
}

double selection_objective(const GroupAverages& avg, const SelectionWeights& weights) {
  return weights.target * avg.target + weights.retained * avg.retained;
}

double select_best(const std::vector<Candidate>& candidates, const SelectionWeights& weights) {
  weights.check();
  if (candidates.empty()) throw SelectError("no candidates to select from");

  const auto& reference = candidates.front().table.groups;
  std::vector<double> objective;
  objective.reserve(candidates.size());
  for (const auto& c : candidates) {
    if (c.table.groups != reference) {
      throw SelectError(fmt::format(
          "candidate at ratio {} has a different benchmark set", c.ratio));
    }
    objective.push_back(selection_objective(aggregate(c.table), weights));
  }

  const double best_value = *std::max_element(objective.begin(), objective.end());
  const double tol = 1e-9 * std::max(1.0, std::abs(best_value));
  std::size_t best = candidates.size();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (best_value - objective[i] > tol) continue;
    if (best == candidates.size()) {
      best = i;
      continue;
    }
    const double di = std::abs(candidates[i].ratio - 0.5);
    const double db = std::abs(candidates[best].ratio - 0.5);
    if (di < db - 1e-12 ||
        (std::abs(di - db) <= 1e-12 && candidates[i].ratio < candidates[best].ratio)) {
      best = i;
    }
  }
  return candidates[best].ratio;
}

}  // namespace bamforge
