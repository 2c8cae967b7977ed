// SPDX-License-Identifier: Apache-2.0
//
// Merge-ratio grid and the bilingual selection rule: maximize a weighted sum
// of the target-language and retained-language benchmark averages.

#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace bamforge {

enum class BenchGroup { Target, Retained };

const char* group_name(BenchGroup group);

class SelectError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScoreTable {
  std::map<std::string, double> scores;      // benchmark -> [0, 100]
  std::map<std::string, BenchGroup> groups;  // benchmark -> group

  void set(const std::string& bench, double score, BenchGroup group);
  /// Throws SelectError on out-of-range scores or ungrouped benchmarks.
  void check() const;

  nlohmann::json to_json() const;
  static ScoreTable from_json(const nlohmann::json& j);
};

ScoreTable read_score_table(const std::filesystem::path& path);
void write_score_table(const ScoreTable& table, const std::filesystem::path& path);

struct GroupAverages {
  double target = 0.0;
  double retained = 0.0;
};

struct SelectionWeights {
  double target = 2.0;
  double retained = 1.0;

  void check() const;
};

struct Candidate {
  double ratio = 0.5;
  ScoreTable table;
};

/// lo, lo+step, ... through hi; the last point snaps to hi within 1e-9.
std::vector<double> grid(double lo = 0.3, double hi = 0.7, double step = 0.05);

GroupAverages aggregate(const ScoreTable& table);

double selection_objective(const GroupAverages& avg, const SelectionWeights& weights);

/// Ratio maximizing the weighted objective. Objectives within a relative
/// 1e-9 count as tied; ties go to the ratio nearest 0.5, then the smaller.
double select_best(const std::vector<Candidate>& candidates,
                   const SelectionWeights& weights = {});

}  // namespace bamforge
