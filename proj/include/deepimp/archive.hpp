#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deepimp/errors.hpp"
#include "deepimp/tensor.hpp"

namespace deepimp {

// Named-tensor container used for checkpoints, RNN heads and feature caches.
//
// Layout (little-endian):
//   "DIChkpt1"  u32 version  u32 epoch  u32 tensor_count
//   tensor_count x { u16 name_len, name, u8 rank, rank x u32 extent, f32 payload }
//   u32 optimizer_count  u64 optimizer_step
//   optimizer_count x tensor entry (names prefixed "adam.m." / "adam.v.")
//   u32 rng_len  rng bytes
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool operator==(const NamedTensor&) const = default;
};

struct TensorArchive {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::uint32_t epoch = 0;
  std::vector<NamedTensor> tensors;
  std::uint64_t optimizer_step = 0;
  std::vector<NamedTensor> optimizer;
  std::string rng_state;

  const Tensor* find(const std::string& name) const;
  bool operator==(const TensorArchive&) const = default;
};

class ArchiveError : public DataError {
 public:
  enum class Code { io, bad_magic, version_mismatch, manifest_mismatch, truncated };
  ArchiveError(Code code, const std::string& what) : DataError(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes);
void save_archive(const TensorArchive& archive, const std::filesystem::path& path);
TensorArchive load_archive(const std::filesystem::path& path);

}  // namespace deepimp
