// SPDX-License-Identifier: Apache-2.0

#include "bamforge/score.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include <fmt/core.h>

#include "bamforge/modelio.hpp"
#include "json.hpp"

namespace bamforge {

using nlohmann::json;

void MCItem::check() const {
  if (options.size() < 2) {
    throw ScoreError(fmt::format("item '{}' needs at least two options", question));
  }
  if (gold >= options.size()) {
    throw ScoreError(fmt::format("item '{}': gold index {} out of range", question, gold));
  }
}

Exemplar as_exemplar(const MCItem& item) {
  item.check();
  return {item.question, item.options[item.gold]};
}

Exemplar as_exemplar(const QAItem& item) {
  return {item.question, item.answer.empty() ? item.gold : item.answer};
}

std::string assemble_prompt(std::string_view question, std::span<const Exemplar> exemplars,
                            std::size_t k) {
  if (k > exemplars.size()) {
    throw ScoreError(fmt::format("{}-shot prompt needs {} exemplars, have {}", k, k,
                                 exemplars.size()));
  }
  std::string prompt;
  for (std::size_t i = 0; i < k; ++i) {
    prompt += exemplars[i].question;
    prompt += '\n';
    prompt += exemplars[i].answer;
    prompt += "\n\n";
  }
  prompt += question;
  return prompt;
}

std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

namespace {

void check_disjoint(std::string_view question, std::span<const Exemplar> exemplars,
                    std::size_t k) {
  for (std::size_t i = 0; i < k && i < exemplars.size(); ++i) {
    if (exemplars[i].question == question) {
      throw ScoreError(fmt::format("scored item '{}' also appears among the exemplars", question));
    }
  }
}

// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; !failed && (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string trim(std::string_view s) {
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return std::string(s);
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }

}  // namespace

ScoreResult score_multiple_choice(ModelEndpoint& model, std::span<const MCItem> items,
                                  std::size_t k, std::span<const Exemplar> exemplars,
                                  const ScoringOptions& options) {
  if (items.empty()) throw ScoreError("no items to score");
  for (const auto& item : items) {
    item.check();
    check_disjoint(item.question, exemplars, k);
  }
  ScoreResult result;
  result.predictions.resize(items.size());
  parallel_for(items.size(), options.parallelism, [&](std::size_t i) {
    const auto& item = items[i];
    const std::string context = assemble_prompt(item.question, exemplars, k);
    std::vector<double> ll(item.options.size());
    for (std::size_t o = 0; o < item.options.size(); ++o) {
      const std::string continuation = " " + item.options[o];
      ll[o] = model.loglikelihood(context, continuation);
      if (options.length_normalize) ll[o] /= static_cast<double>(continuation.size());
    }
    result.predictions[i] = argmax_lowest(ll);
  });
  for (std::size_t i = 0; i < items.size(); ++i) {
    result.correct += result.predictions[i] == items[i].gold ? 1 : 0;
  }
  result.score = 100.0 * static_cast<double>(result.correct) / static_cast<double>(items.size());
  return result;
}

std::optional<std::string> extract_last_number(std::string_view text) {
  // Walk backwards to the last digit, then outwards to the token bounds.
  std::size_t end = text.size();
  while (end > 0 && !is_digit(text[end - 1])) --end;
  if (end == 0) return std::nullopt;
  std::size_t begin = end;
  while (begin > 0) {
    const char c = text[begin - 1];
    if (is_digit(c)) {
      --begin;
    } else if ((c == ',' || c == '.') && begin >= 2 && is_digit(text[begin - 2])) {
      --begin;
    } else {
      break;
    }
  }
  const bool negative = begin > 0 && text[begin - 1] == '-';
  std::string digits;
  for (char c : text.substr(begin, end - begin)) {
    if (c != ',') digits.push_back(c);
  }
  // Only the final '.' can be a decimal point; earlier ones were separators.
  if (auto dot = digits.rfind('.'); dot != std::string::npos) {
    std::string whole;
    for (std::size_t i = 0; i < dot; ++i) {
      if (digits[i] != '.') whole.push_back(digits[i]);
    }
    std::string frac = digits.substr(dot + 1);
    while (!frac.empty() && frac.back() == '0') frac.pop_back();
    digits = frac.empty() ? whole : whole + "." + frac;
  }
  const auto first = digits.find_first_not_of('0');
  if (first == std::string::npos) {
    digits = "0";
  } else if (digits[first] == '.') {
    digits = "0" + digits.substr(first);
  } else {
    digits = digits.substr(first);
  }
  if (negative && digits != "0") digits.insert(digits.begin(), '-');
  return digits;
}

ScoreResult score_generation(ModelEndpoint& model, std::span<const QAItem> items, std::size_t k,
                             std::span<const Exemplar> exemplars,
                             const AnswerExtractor& extractor, const ScoringOptions& options) {
  if (items.empty()) throw ScoreError("no items to score");
  for (const auto& item : items) check_disjoint(item.question, exemplars, k);
  std::vector<char> hit(items.size(), 0);
  parallel_for(items.size(), options.parallelism, [&](std::size_t i) {
    const auto& item = items[i];
    const auto output = model.generate(assemble_prompt(item.question, exemplars, k),
                                       options.max_tokens);
    const auto predicted = extractor(output.text);
    if (!predicted) return;
    const auto gold = extractor(item.gold);
    hit[i] = gold ? *predicted == *gold : *predicted == trim(item.gold);
  });
  ScoreResult result;
  result.correct = static_cast<std::size_t>(std::count(hit.begin(), hit.end(), 1));
  result.score = 100.0 * static_cast<double>(result.correct) / static_cast<double>(items.size());
  return result;
}

// ---------------------------------------------------------------------------

Verdict parse_verdict(std::string_view text) {
  if (text == "first") return Verdict::First;
  if (text == "second") return Verdict::Second;
  if (text == "tie") return Verdict::Tie;
  throw ScoreError(fmt::format("unknown verdict '{}' (expected first, second or tie)", text));
}

const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::First: return "first";
    case Verdict::Second: return "second";
    case Verdict::Tie: return "tie";
  }
  return "?";
}

JudgmentRecord swap_roles(const JudgmentRecord& rec) {
  return {rec.id, rec.verdict_ba, rec.verdict_ab};
}

PreferencePoints preference_points(const JudgmentRecord& rec) {
  PreferencePoints pts;
  // (A, B) ordering: first position is A.
  if (rec.verdict_ab == Verdict::First) pts.a += 0.5;
  if (rec.verdict_ab == Verdict::Second) pts.b += 0.5;
  // (B, A) ordering: first position is B.
  if (rec.verdict_ba == Verdict::First) pts.b += 0.5;
  if (rec.verdict_ba == Verdict::Second) pts.a += 0.5;
  return pts;
}

PreferenceSummary preference_balance(std::span<const JudgmentRecord> records) {
  if (records.empty()) throw ScoreError("no judgment records");
  PreferenceSummary s;
  std::size_t flips = 0;
  for (const auto& rec : records) {
    const auto pts = preference_points(rec);
    s.total_a += pts.a;
    s.total_b += pts.b;
    s.ties_ab += rec.verdict_ab == Verdict::Tie ? 1 : 0;
    s.ties_ba += rec.verdict_ba == Verdict::Tie ? 1 : 0;
    if (rec.verdict_ab == Verdict::Tie || rec.verdict_ba == Verdict::Tie) continue;
    ++s.decisive_pairs;
    const bool a_wins_ab = rec.verdict_ab == Verdict::First;
    const bool a_wins_ba = rec.verdict_ba == Verdict::Second;
    flips += a_wins_ab != a_wins_ba ? 1 : 0;
  }
  s.flip_rate = s.decisive_pairs == 0
                    ? 0.0
                    : static_cast<double>(flips) / static_cast<double>(s.decisive_pairs);
  return s;
}

double grade_average(std::span<const GradeRecord> grades) {
  if (grades.empty()) throw ScoreError("no grades to average");
  double sum = 0.0;
  for (const auto& g : grades) {
    if (!(g.grade >= 2.0 && g.grade <= 6.0)) {
      throw ScoreError(fmt::format("grade {} for '{}' outside [2, 6]", g.grade, g.id));
    }
    sum += g.grade;
  }
  return sum / static_cast<double>(grades.size());
}

// ---------------------------------------------------------------------------

namespace {

template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw ScoreError(fmt::format("cannot open '{}'", path.string()));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      fn(json::parse(line));
    } catch (const json::exception& e) {
      throw ScoreError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    } catch (const ScoreError& e) {
      throw ScoreError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
  }
}

std::string id_of(const json& j, std::size_t fallback) {
  if (!j.contains("id")) return std::to_string(fallback);
  return j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
}

}  // namespace

std::vector<MCItem> read_mc_tasks(const std::filesystem::path& path) {
  std::vector<MCItem> items;
  for_each_json_line(path, [&](const json& j) {
    MCItem item{j.at("question").get<std::string>(),
                j.at("options").get<std::vector<std::string>>(),
                j.at("gold").get<std::size_t>()};
    item.check();
    items.push_back(std::move(item));
  });
  return items;
}

std::vector<QAItem> read_qa_tasks(const std::filesystem::path& path) {
  std::vector<QAItem> items;
  for_each_json_line(path, [&](const json& j) {
    const auto& gold = j.at("gold");
    items.push_back({j.at("question").get<std::string>(),
                     gold.is_string() ? gold.get<std::string>() : gold.dump(),
                     j.value("answer", std::string())});
  });
  return items;
}

std::vector<JudgmentRecord> read_judgments(const std::filesystem::path& path) {
  std::vector<JudgmentRecord> out;
  for_each_json_line(path, [&](const json& j) {
    out.push_back({id_of(j, out.size()), parse_verdict(j.at("verdict_ab").get<std::string>()),
                   parse_verdict(j.at("verdict_ba").get<std::string>())});
  });
  return out;
}

std::vector<GradeRecord> read_grades(const std::filesystem::path& path) {
  std::vector<GradeRecord> out;
  for_each_json_line(path, [&](const json& j) {
    GradeRecord g{id_of(j, out.size()), j.at("grade").get<double>()};
    if (!(g.grade >= 2.0 && g.grade <= 6.0)) {
      throw ScoreError(fmt::format("grade {} for '{}' outside [2, 6]", g.grade, g.id));
    }
    out.push_back(std::move(g));
  });
  return out;
}

}  // namespace bamforge
