// SPDX-License-Identifier: Apache-2.0
//
// BGC1 checkpoint container: an ordered list of named tensors plus a
// string metadata map, with a fixed little-endian on-disk layout.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bamforge {

enum class DType : std::uint8_t { F32 = 0, F16 = 1 };

std::size_t dtype_size(DType dtype);
const char* dtype_name(DType dtype);

struct TensorBlock {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint64_t> shape;
  std::vector<std::byte> data;  // row-major, little-endian elements

  std::uint64_t element_count() const;

  /// Element values widened to f32 (f16 is upcast exactly).
  std::vector<float> to_f32() const;

  static TensorBlock from_f32(std::string name, std::vector<std::uint64_t> shape,
                              std::span<const float> values,
                              DType dtype = DType::F32);

  friend bool operator==(const TensorBlock&, const TensorBlock&) = default;
};

struct Checkpoint {
  std::vector<TensorBlock> tensors;
  std::map<std::string, std::string> metadata;

  const TensorBlock* find(std::string_view name) const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind {
    Io,
    Invalid,
    BadMagic,
    UnsupportedVersion,
    Truncated,
    LengthMismatch,
    Checksum,
    Malformed,
  };

  CheckpointError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// One entry per violated invariant; empty when the checkpoint is well formed.
std::vector<std::string> validate(const Checkpoint& ckpt);

std::vector<std::byte> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::byte> bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);

}  // namespace bamforge
