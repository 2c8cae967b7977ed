// SPDX-License-Identifier: Apache-2.0

#include "bamforge/ckpt.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <set>

#include <fmt/core.h>

#include "bamforge/kernels.hpp"

namespace bamforge {

static_assert(std::endian::native == std::endian::little,
              "BGC1 tensor payloads are stored in host order");

namespace {

constexpr char kMagic[4] = {'B', 'G', 'C', '1'};
constexpr std::uint32_t kVersion = 1;

std::uint32_t crc32_of(std::span<const std::byte> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    const std::size_t len = std::min(kChunk, bytes.size() - off);
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off),
                  static_cast<uInt>(len));
  }
  return static_cast<std::uint32_t>(crc);
}

class Writer {
 public:
  template <typename T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::byte*>(&value);
    out_.insert(out_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::span<const std::byte> bytes) {
    out_.insert(out_.end(), bytes.begin(), bytes.end());
  }
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(std::as_bytes(std::span(s.data(), s.size())));
  }
  std::vector<std::byte>& bytes() { return out_; }

 private:
  std::vector<std::byte> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t offset() const { return pos_; }

  template <typename T>
  T get(std::string_view what) {
    T value;
    std::memcpy(&value, take(sizeof(T), what).data(), sizeof(T));
    return value;
  }

  std::span<const std::byte> take(std::size_t n, std::string_view what) {
    if (n > remaining()) {
      throw CheckpointError(
          CheckpointError::Kind::Truncated,
          fmt::format("truncated checkpoint: {} needs {} bytes at offset {}, {} left",
                      what, n, pos_, remaining()));
    }
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::string get_string(std::string_view what) {
    const auto len = get<std::uint32_t>(what);
    auto raw = take(len, what);
    return std::string(reinterpret_cast<const char*>(raw.data()), raw.size());
  }

 private:
  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

// Element count with overflow detection; nullopt on overflow.
std::optional<std::uint64_t> checked_count(const std::vector<std::uint64_t>& shape) {
  std::uint64_t n = 1;
  for (auto extent : shape) {
    if (extent != 0 && n > std::numeric_limits<std::uint64_t>::max() / extent) {
      return std::nullopt;
    }
    n *= extent;
  }
  return n;
}

}  // namespace

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::F32: return 4;
    case DType::F16: return 2;
  }
  return 0;
}

const char* dtype_name(DType dtype) {
  switch (dtype) {
    case DType::F32: return "f32";
    case DType::F16: return "f16";
  }
  return "?";
}

std::uint64_t TensorBlock::element_count() const {
  return checked_count(shape).value_or(0);
}

std::vector<float> TensorBlock::to_f32() const {
  const std::size_t n = data.size() / dtype_size(dtype);
  std::vector<float> out(n);
  if (dtype == DType::F32) {
    std::memcpy(out.data(), data.data(), n * sizeof(float));
  } else {
    std::vector<std::uint16_t> halves(n);
    std::memcpy(halves.data(), data.data(), n * sizeof(std::uint16_t));
    kernels::f16_to_f32(halves, out);
  }
  return out;
}

TensorBlock TensorBlock::from_f32(std::string name, std::vector<std::uint64_t> shape,
                                  std::span<const float> values, DType dtype) {
  TensorBlock t{std::move(name), dtype, std::move(shape), {}};
  if (dtype == DType::F32) {
    t.data.resize(values.size_bytes());
    std::memcpy(t.data.data(), values.data(), values.size_bytes());
  } else {
    std::vector<std::uint16_t> halves(values.size());
    kernels::f32_to_f16(values, halves);
    t.data.resize(halves.size() * sizeof(std::uint16_t));
    std::memcpy(t.data.data(), halves.data(), t.data.size());
  }
  return t;
}

const TensorBlock* Checkpoint::find(std::string_view name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(),
                         [&](const TensorBlock& t) { return t.name == name; });
  return it == tensors.end() ? nullptr : &*it;
}

std::vector<std::string> validate(const Checkpoint& ckpt) {
  std::vector<std::string> violations;
  std::set<std::string_view> seen;
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    const auto& t = ckpt.tensors[i];
    const std::string label = t.name.empty() ? fmt::format("#{}", i) : t.name;
    if (t.name.empty()) {
      violations.push_back(fmt::format("tensor {}: name must be non-empty", label));
    } else if (!seen.insert(t.name).second) {
      violations.push_back(fmt::format("tensor {}: duplicate name", label));
    }
    if (t.dtype != DType::F32 && t.dtype != DType::F16) {
      violations.push_back(fmt::format("tensor {}: unknown dtype tag {}", label,
                                       static_cast<int>(t.dtype)));
      continue;
    }
    if (std::find(t.shape.begin(), t.shape.end(), 0u) != t.shape.end()) {
      violations.push_back(fmt::format("tensor {}: zero extent in shape", label));
      continue;
    }
    const auto count = checked_count(t.shape);
    if (!count || *count > std::numeric_limits<std::uint64_t>::max() / dtype_size(t.dtype)) {
      violations.push_back(fmt::format("tensor {}: shape overflows", label));
      continue;
    }
    const std::uint64_t expected = *count * dtype_size(t.dtype);
    if (t.data.size() != expected) {
      violations.push_back(
          fmt::format("tensor {}: data length {} bytes, shape requires {} ({} x {})",
                      label, t.data.size(), expected, *count, dtype_name(t.dtype)));
    }
  }
  return violations;
}

std::vector<std::byte> serialize_checkpoint(const Checkpoint& ckpt) {
  if (auto violations = validate(ckpt); !violations.empty()) {
    throw CheckpointError(CheckpointError::Kind::Invalid,
                          "invalid checkpoint: " + violations.front());
  }
  Writer w;
  w.put_bytes(std::as_bytes(std::span(kMagic)));
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [key, value] : ckpt.metadata) {
    w.put_string(key);
    w.put_string(value);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.put_string(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (auto extent : t.shape) w.put<std::uint64_t>(extent);
    w.put<std::uint64_t>(t.data.size());
    w.put_bytes(t.data);
  }
  const std::uint32_t crc = crc32_of(w.bytes());
  w.put<std::uint32_t>(crc);
  return std::move(w.bytes());
}

Checkpoint deserialize_checkpoint(std::span<const std::byte> bytes) {
  using Kind = CheckpointError::Kind;
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(Kind::BadMagic, "not a BGC1 checkpoint (bad magic bytes)");
  }
  r.take(4, "magic");
  const auto version = r.get<std::uint32_t>("format version");
  if (version != kVersion) {
    throw CheckpointError(Kind::UnsupportedVersion,
                          fmt::format("unsupported BGC1 version {}", version));
  }

  Checkpoint ckpt;
  const auto meta_count = r.get<std::uint32_t>("metadata count");
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    auto key = r.get_string("metadata key");
    auto value = r.get_string(fmt::format("metadata value for '{}'", key));
    if (!ckpt.metadata.emplace(key, std::move(value)).second) {
      throw CheckpointError(Kind::Malformed,
                            fmt::format("duplicate metadata key '{}'", key));
    }
  }

  const auto tensor_count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < tensor_count; ++i) {
    TensorBlock t;
    t.name = r.get_string(fmt::format("name of tensor #{}", i));
    const std::string what = fmt::format("tensor '{}'", t.name);
    const auto tag = r.get<std::uint8_t>(what);
    if (tag > 1) {
      throw CheckpointError(Kind::Malformed,
                            fmt::format("{}: unknown dtype tag {}", what, tag));
    }
    t.dtype = static_cast<DType>(tag);
    const auto rank = r.get<std::uint32_t>(what);
    if (rank > r.remaining() / sizeof(std::uint64_t)) {
      throw CheckpointError(Kind::Truncated,
                            fmt::format("truncated checkpoint: {} declares rank {}", what, rank));
    }
    t.shape.resize(rank);
    for (auto& extent : t.shape) extent = r.get<std::uint64_t>(what);
    const auto declared = r.get<std::uint64_t>(what);
    const auto count = checked_count(t.shape);
    if (!count || *count > std::numeric_limits<std::uint64_t>::max() / dtype_size(t.dtype) ||
        declared != *count * dtype_size(t.dtype)) {
      throw CheckpointError(
          Kind::LengthMismatch,
          fmt::format("{}: declared data length {} does not match shape", what, declared));
    }
    if (declared > r.remaining()) {
      throw CheckpointError(
          Kind::Truncated,
          fmt::format("truncated checkpoint: {} needs {} data bytes, {} left", what,
                      declared, r.remaining()));
    }
    auto raw = r.take(declared, what);
    t.data.assign(raw.begin(), raw.end());
    ckpt.tensors.push_back(std::move(t));
  }

  const std::size_t body_len = r.offset();
  const auto stored_crc = r.get<std::uint32_t>("trailing CRC32");
  if (r.remaining() != 0) {
    throw CheckpointError(Kind::Malformed,
                          fmt::format("{} unexpected bytes after CRC32", r.remaining()));
  }
  const auto actual_crc = crc32_of(bytes.first(body_len));
  if (stored_crc != actual_crc) {
    throw CheckpointError(Kind::Checksum,
                          fmt::format("CRC32 mismatch: stored {:08x}, computed {:08x}",
                                      stored_crc, actual_crc));
  }
  if (auto violations = validate(ckpt); !violations.empty()) {
    throw CheckpointError(Kind::Invalid, "invalid checkpoint: " + violations.front());
  }
  return ckpt;
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) {
    throw CheckpointError(CheckpointError::Kind::Io,
                          fmt::format("cannot open '{}' for reading", path.string()));
  }
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<std::byte> bytes(size);
  in.seekg(0);
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw CheckpointError(CheckpointError::Kind::Io,
                          fmt::format("failed reading '{}'", path.string()));
  }
  return bytes;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw CheckpointError(CheckpointError::Kind::Io,
                          fmt::format("cannot open '{}' for writing", path.string()));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) {
    throw CheckpointError(CheckpointError::Kind::Io,
                          fmt::format("failed writing '{}'", path.string()));
  }
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  try {
    return deserialize_checkpoint(read_file_bytes(path));
  } catch (const CheckpointError& e) {
    if (e.kind() == CheckpointError::Kind::Io) throw;
    throw CheckpointError(e.kind(), fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace bamforge
