#include "deepimp/archive.hpp"

#include <cstring>
#include <limits>

#include "byteio.hpp"
#include "deepimp/data.hpp"

namespace deepimp {

namespace {

constexpr char kArchiveMagic[8] = {'D', 'I', 'C', 'h', 'k', 'p', 't', '1'};

void write_tensor(ByteWriter& w, const NamedTensor& t) {
  if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw std::invalid_argument("tensor name too long: " + t.name.substr(0, 32));
  }
  if (t.tensor.rank() > std::numeric_limits<std::uint8_t>::max()) {
    throw std::invalid_argument("tensor rank too large for " + t.name);
  }
  w.u16(static_cast<std::uint16_t>(t.name.size()));
  w.bytes(t.name.data(), t.name.size());
  w.u8(static_cast<std::uint8_t>(t.tensor.rank()));
  for (std::size_t e : t.tensor.shape()) {
    if (e > std::numeric_limits<std::uint32_t>::max()) {
      throw std::invalid_argument("tensor extent too large for " + t.name);
    }
    w.u32(static_cast<std::uint32_t>(e));
  }
  for (float v : t.tensor.data()) w.f32(v);
}

NamedTensor read_tensor(ByteReader& r) {
  NamedTensor t;
  t.name.resize(r.u16());
  r.bytes(t.name.data(), t.name.size());
  const std::size_t rank = r.u8();
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& e : shape) {
    e = r.u32();
    if (e == 0) throw ArchiveError(ArchiveError::Code::truncated, "zero extent in " + t.name);
    if (__builtin_mul_overflow(count, std::uint64_t{e}, &count) || count > r.remaining() / 4) {
      throw ArchiveError(ArchiveError::Code::truncated, "truncated payload for " + t.name);
    }
  }
  std::vector<float> data(count);
  for (auto& v : data) v = r.f32();
  t.tensor = Tensor(std::move(shape), std::move(data));
  return t;
}

}  // namespace

const Tensor* TensorArchive::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.tensor;
  return nullptr;
}

std::vector<std::uint8_t> encode_archive(const TensorArchive& a) {
  ByteWriter w;
  w.bytes(kArchiveMagic, sizeof kArchiveMagic);
  w.u32(a.version);
  w.u32(a.epoch);
  w.u32(static_cast<std::uint32_t>(a.tensors.size()));
  for (const auto& t : a.tensors) write_tensor(w, t);
  w.u32(static_cast<std::uint32_t>(a.optimizer.size()));
  w.u64(a.optimizer_step);
  for (const auto& t : a.optimizer) write_tensor(w, t);
  w.u32(static_cast<std::uint32_t>(a.rng_state.size()));
  w.bytes(a.rng_state.data(), a.rng_state.size());
  return std::move(w.buffer);
}

TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes) {
  using Code = ArchiveError::Code;
  if (bytes.size() < sizeof kArchiveMagic ||
      std::memcmp(bytes.data(), kArchiveMagic, sizeof kArchiveMagic) != 0) {
    throw ArchiveError(Code::bad_magic, "bad magic: not a tensor archive");
  }
  ByteReader r(bytes.data(), bytes.size());
  r.skip(sizeof kArchiveMagic);
  TensorArchive a;
  try {
    a.version = r.u32();
    if (a.version != TensorArchive::kVersion) {
      throw ArchiveError(Code::version_mismatch,
                         "archive version " + std::to_string(a.version) + ", expected " +
                             std::to_string(TensorArchive::kVersion));
    }
    a.epoch = r.u32();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) a.tensors.push_back(read_tensor(r));
    const std::uint32_t opt_count = r.u32();
    a.optimizer_step = r.u64();
    for (std::uint32_t i = 0; i < opt_count; ++i) a.optimizer.push_back(read_tensor(r));
    a.rng_state.resize(r.u32());
    r.bytes(a.rng_state.data(), a.rng_state.size());
  } catch (const std::out_of_range&) {
    throw ArchiveError(Code::truncated, "truncated tensor archive");
  }
  if (r.remaining() != 0) {
    throw ArchiveError(Code::truncated, "tensor archive length mismatch: " +
                                            std::to_string(r.remaining()) + " trailing bytes");
  }
  return a;
}

void save_archive(const TensorArchive& archive, const std::filesystem::path& path) {
  const auto bytes = encode_archive(archive);
  write_file_atomic(path, bytes.data(), bytes.size());
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const DataError& e) {
    throw ArchiveError(ArchiveError::Code::io, e.what());
  }
  return decode_archive(bytes);
}

}  // namespace deepimp
