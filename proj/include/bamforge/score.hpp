// SPDX-License-Identifier: Apache-2.0
//
// Evaluation scoring: k-shot prompts, token-probability multiple choice,
// generation with answer extraction, dual-ordering judge points and grade
// averages. Judge verdicts and grades are inputs; nothing here calls a judge.

#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bamforge {

class ModelEndpoint;

class ScoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MCItem {
  std::string question;
  std::vector<std::string> options;
  std::size_t gold = 0;

  void check() const;
};

struct QAItem {
  std::string question;
  std::string gold;
  std::string answer;  // worked answer shown when used as an exemplar; gold if empty
};

struct Exemplar {
  std::string question;
  std::string answer;
};

Exemplar as_exemplar(const MCItem& item);
Exemplar as_exemplar(const QAItem& item);

/// First k exemplars as "question\nanswer\n\n" blocks, then the bare question.
std::string assemble_prompt(std::string_view question, std::span<const Exemplar> exemplars,
                            std::size_t k);

struct ScoringOptions {
  std::size_t parallelism = 1;     // concurrent endpoint requests
  bool length_normalize = false;   // divide option log-likelihood by byte length
  std::uint32_t max_tokens = 256;  // generation budget
};

struct ScoreResult {
  double score = 0.0;  // 100 * correct / items
  std::size_t correct = 0;
  std::vector<std::size_t> predictions;  // MC: chosen option per item
};

/// Index of the largest value; ties resolve to the lowest index.
std::size_t argmax_lowest(std::span<const double> values);

ScoreResult score_multiple_choice(ModelEndpoint& model, std::span<const MCItem> items,
                                  std::size_t k, std::span<const Exemplar> exemplars,
                                  const ScoringOptions& options = {});

using AnswerExtractor = std::function<std::optional<std::string>(std::string_view)>;

/// Last number in the text with thousands separators removed and trailing
/// zeros of a fraction dropped; nullopt if there is none.
std::optional<std::string> extract_last_number(std::string_view text);

ScoreResult score_generation(ModelEndpoint& model, std::span<const QAItem> items, std::size_t k,
                             std::span<const Exemplar> exemplars,
                             const AnswerExtractor& extractor = extract_last_number,
                             const ScoringOptions& options = {});

// --- Dual-ordering preference judging ------------------------------------

enum class Verdict { First, Second, Tie };

Verdict parse_verdict(std::string_view text);
const char* verdict_name(Verdict v);

struct JudgmentRecord {
  std::string id;
  Verdict verdict_ab = Verdict::Tie;  // A shown first
  Verdict verdict_ba = Verdict::Tie;  // B shown first
};

/// Same judgments with the model labels exchanged.
JudgmentRecord swap_roles(const JudgmentRecord& rec);

struct PreferencePoints {
  double a = 0.0;
  double b = 0.0;
};

PreferencePoints preference_points(const JudgmentRecord& rec);

struct PreferenceSummary {
  double total_a = 0.0;
  double total_b = 0.0;
  std::size_t ties_ab = 0;
  std::size_t ties_ba = 0;
  std::size_t decisive_pairs = 0;  // records with no tie in either ordering
  double flip_rate = 0.0;          // over decisive pairs; 0 when there are none
};

PreferenceSummary preference_balance(std::span<const JudgmentRecord> records);

// --- Grades on the 2..6 scale ---------------------------------------------

struct GradeRecord {
  std::string id;
  double grade = 0.0;
};

double grade_average(std::span<const GradeRecord> grades);

// --- JSON-lines files -----------------------------------------------------

/// {question, options, gold:int} per line.
std::vector<MCItem> read_mc_tasks(const std::filesystem::path& path);
/// {question, gold, answer?} per line; numeric gold is accepted.
std::vector<QAItem> read_qa_tasks(const std::filesystem::path& path);
std::vector<JudgmentRecord> read_judgments(const std::filesystem::path& path);
std::vector<GradeRecord> read_grades(const std::filesystem::path& path);

}  // namespace bamforge
