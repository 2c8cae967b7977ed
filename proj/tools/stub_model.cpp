// SPDX-License-Identifier: Apache-2.0
//
// JSON-lines model server over stdin/stdout backed by the deterministic stub.

#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "bamforge/modelio.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Stub model server (JSON lines on stdio)", "bamforge-stub-model"};
  std::uint64_t seed = 0;
  std::size_t drop_first = 0;
  app.add_option("--seed", seed);
  app.add_option("--drop-first", drop_first, "Silently ignore the first N requests");
  CLI11_PARSE(app, argc, argv);

  auto model = bamforge::make_stub(seed);
  std::string line;
  std::size_t seen = 0;
  while (std::getline(std::cin, line)) {
    if (line.empty()) continue;
    if (seen++ < drop_first) continue;
    std::istringstream one(line + "\n");
    bamforge::serve_lines(*model, one, std::cout);
  }
  return 0;
}
