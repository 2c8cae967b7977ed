// SPDX-License-Identifier: Apache-2.0
//
// Deterministic stand-in for a benchmark run: scores in [40, 90] derived
// from a digest of the checkpoint's tensor bytes.

#include <iostream>

#include "CLI11.hpp"
#include "bamforge/ckpt.hpp"
#include "bamforge/hash.hpp"
#include "bamforge/select.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Deterministic stub evaluator", "bamforge-stub-evaluator"};
  std::string ckpt_path, out;
  app.add_option("--ckpt", ckpt_path)->required();
  app.add_option("--out", out)->required();
  CLI11_PARSE(app, argc, argv);

  try {
    const auto ckpt = bamforge::read_checkpoint(ckpt_path);
    std::uint64_t digest = bamforge::kFnvOffset;
    for (const auto& t : ckpt.tensors) digest = bamforge::fnv1a64(t.data, digest);

    bamforge::ScoreTable table;
    const std::pair<const char*, bamforge::BenchGroup> benches[] = {
        {"bg_reading", bamforge::BenchGroup::Target},
        {"bg_reasoning", bamforge::BenchGroup::Target},
        {"en_reading", bamforge::BenchGroup::Retained},
        {"en_reasoning", bamforge::BenchGroup::Retained},
    };
    for (const auto& [name, group] : benches) {
      const std::uint64_t h = bamforge::fnv1a64(name, digest);
      table.set(name, 40.0 + static_cast<double>(h % 50001) / 1000.0, group);
    }
    bamforge::write_score_table(table, out);
  } catch (const std::exception& e) {
    std::cerr << "stub evaluator: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
