// SPDX-License-Identifier: Apache-2.0
//
// Deterministic stand-in for a training job. With --init it writes a random
// base checkpoint; otherwise it adds a small seeded delta, keyed on the data
// part and tensor name, to every tensor of --base.
//
// Test hooks (environment):
//   BAMFORGE_STUB_LOG=<file>         append "train <part>" per invocation
//   BAMFORGE_STUB_FAIL_ON=<part>     exit 1 for that part
//   BAMFORGE_STUB_KILL_PARENT_ON=<part>  SIGKILL the parent process first

#include <signal.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "bamforge/ckpt.hpp"
#include "bamforge/hash.hpp"
#include "bamforge/merge.hpp"

namespace {

struct SplitMix64 {
  std::uint64_t state;
  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  // Uniform in [-1, 1).
  double symmetric() { return 2.0 * static_cast<double>(next() >> 11) * 0x1.0p-53 - 1.0; }
};

bool env_is(const char* name, const std::string& value) {
  const char* v = std::getenv(name);
  return v != nullptr && value == v;
}

bamforge::Checkpoint make_base(std::uint64_t seed, std::size_t count, const std::string& id) {
  using bamforge::DType;
  bamforge::Checkpoint ckpt;
  SplitMix64 rng{seed};
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::uint64_t> shape;
    DType dtype = DType::F32;
    std::string name;
    switch (i % 4) {
      case 0: name = "layers." + std::to_string(i / 4) + ".attn.weight"; shape = {16, 16}; break;
      case 1: name = "layers." + std::to_string(i / 4) + ".mlp.weight"; shape = {32, 16}; break;
      case 2: name = "layers." + std::to_string(i / 4) + ".norm"; shape = {16}; dtype = DType::F16; break;
      default: name = "layers." + std::to_string(i / 4) + ".gate"; shape = {}; break;
    }
    std::uint64_t n = 1;
    for (auto e : shape) n *= e;
    std::vector<float> values(n);
    for (auto& v : values) v = static_cast<float>(rng.symmetric());
    ckpt.tensors.push_back(bamforge::TensorBlock::from_f32(name, shape, values, dtype));
  }
  ckpt.metadata[std::string(bamforge::kMetaId)] = id;
  return ckpt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic stub trainer", "bamforge-stub-trainer"};
  bool init = false;
  std::string base, data, out, config, id = "base";
  std::uint64_t seed = 1;
  std::size_t tensors = 10;
  double scale = 0.05;
  app.add_flag("--init", init, "Write a random base checkpoint instead of training");
  app.add_option("--base", base);
  app.add_option("--data", data);
  app.add_option("--out", out)->required();
  app.add_option("--config", config);
  app.add_option("--seed", seed);
  app.add_option("--tensors", tensors);
  app.add_option("--id", id, "Checkpoint id recorded by --init");
  app.add_option("--scale", scale, "Delta magnitude");
  CLI11_PARSE(app, argc, argv);

  try {
    if (init) {
      bamforge::write_checkpoint(make_base(seed, tensors, id), out);
      return 0;
    }
    if (base.empty() || data.empty()) {
      std::cerr << "--base and --data are required\n";
      return 2;
    }
    if (const char* log = std::getenv("BAMFORGE_STUB_LOG")) {
      std::ofstream(log, std::ios::app) << "train " << data << '\n';
    }
    if (env_is("BAMFORGE_STUB_KILL_PARENT_ON", data)) {
      ::kill(::getppid(), SIGKILL);
      return 1;
    }
    if (env_is("BAMFORGE_STUB_FAIL_ON", data)) {
      std::cerr << "stub trainer: failing on " << data << " as requested\n";
      return 1;
    }

    bamforge::Checkpoint ckpt = bamforge::read_checkpoint(base);
    for (auto& t : ckpt.tensors) {
      const std::uint64_t key = bamforge::fnv1a64(t.name, bamforge::fnv1a64(data, seed));
      SplitMix64 rng{key};
      auto values = t.to_f32();
      for (auto& v : values) v += static_cast<float>(scale * rng.symmetric());
      t = bamforge::TensorBlock::from_f32(t.name, t.shape, values, t.dtype);
    }
    ckpt.metadata.clear();
    ckpt.metadata[std::string(bamforge::kMetaId)] = data;
    bamforge::write_checkpoint(ckpt, out);
  } catch (const std::exception& e) {
    std::cerr << "stub trainer: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
