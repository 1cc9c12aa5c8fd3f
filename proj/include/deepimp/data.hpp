#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "deepimp/tensor.hpp"

namespace deepimp {

// Every stochastic draw in the project comes from this generator.
using Rng = std::mt19937_64;

std::string rng_state(const Rng& rng);
Rng rng_from_state(const std::string& state);

constexpr std::size_t kTraitCount = 5;
constexpr std::uint32_t kSampleRate = 16000;

// Openness, agreeableness, conscientiousness, neuroticism, extraversion.
struct TraitVector {
  std::array<float, kTraitCount> values{};

  float& operator[](std::size_t i) { return values[i]; }
  float operator[](std::size_t i) const { return values[i]; }
  bool operator==(const TraitVector&) const = default;
};

const std::array<std::string_view, kTraitCount>& trait_names();

// One preprocessed video sample. Audio is mono 16 kHz; frames are stored as
// 8-bit planar RGB (frame-major, channel, row, column) and exposed as floats
// in [0, 1].
class Clip {
 public:
  Clip() = default;
  Clip(Tensor audio, std::uint32_t frame_count, std::uint16_t height, std::uint16_t width,
       std::vector<std::uint8_t> pixels, std::optional<TraitVector> label = std::nullopt);
  // frames: (T, 3, H, W) in [0, 1]; quantized to 1/255 steps.
  static Clip from_frames(Tensor audio, const Tensor& frames,
                          std::optional<TraitVector> label = std::nullopt);

  const Tensor& audio() const { return audio_; }
  std::size_t sample_count() const { return audio_.size(); }
  std::uint32_t frame_count() const { return frame_count_; }
  std::uint16_t height() const { return height_; }
  std::uint16_t width() const { return width_; }
  const std::vector<std::uint8_t>& pixels() const { return pixels_; }
  const std::optional<TraitVector>& label() const { return label_; }
  void set_label(std::optional<TraitVector> label) { label_ = label; }

  // (3, H, W) float view of one frame.
  Tensor frame(std::size_t index) const;
  // Copy of the clip restricted to audio samples [begin, end) and frames
  // [frame_begin, frame_end).
  Clip slice(std::size_t begin, std::size_t end, std::size_t frame_begin,
             std::size_t frame_end) const;

  bool operator==(const Clip&) const = default;

 private:
  Tensor audio_{{1}};
  std::uint32_t frame_count_ = 0;
  std::uint16_t height_ = 0;
  std::uint16_t width_ = 0;
  std::vector<std::uint8_t> pixels_;
  std::optional<TraitVector> label_;
};

// --- augmentation ------------------------------------------------------------

// Random contiguous window of `length` samples, shape (1, length). Audio
// shorter than `length` is zero-padded at the end.
Tensor crop_audio(const Clip& clip, Rng& rng, std::size_t length = 50176);
Tensor audio_window(const Clip& clip, std::size_t start, std::size_t length);

struct FrameCrop {
  std::size_t frame = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  bool flip = false;
};

// Random frame, random size x size window, left/right flip with p = 1/2.
// Output (3, size, size).
Tensor crop_frame(const Clip& clip, Rng& rng, std::size_t size = 224);
FrameCrop draw_frame_crop(const Clip& clip, Rng& rng, std::size_t size);
Tensor extract_frame_crop(const Clip& clip, const FrameCrop& crop, std::size_t size);

// --- clip container ----------------------------------------------------------

class ClipFormatError : public DataError {
 public:
  enum class Code { io, bad_magic, truncated, extent_overflow, invalid };
  ClipFormatError(Code code, const std::string& what) : DataError(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

std::vector<std::uint8_t> encode_clip(const Clip& clip);
Clip decode_clip(const std::vector<std::uint8_t>& bytes);
void save_clip(const Clip& clip, const std::filesystem::path& path);
Clip load_clip(const std::filesystem::path& path);

// --- manifest ----------------------------------------------------------------

enum class Split { train, validation, test };
std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct ManifestRow {
  std::string clip_id;
  std::string path;  // relative paths resolve against the manifest directory
  TraitVector label;
  Split split = Split::train;
};

struct Manifest {
  std::vector<ManifestRow> rows;
  std::filesystem::path base_dir;

  std::vector<ManifestRow> rows_for(Split split) const;
  std::filesystem::path resolve(const ManifestRow& row) const;
};

Manifest parse_manifest(std::string_view text, std::filesystem::path base_dir = {});
Manifest load_manifest(const std::filesystem::path& path);
std::string format_manifest(const Manifest& manifest);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Clip with its manifest label attached.
Clip load_labeled_clip(const Manifest& manifest, const ManifestRow& row);

// --- synthetic data ----------------------------------------------------------

struct SynthOptions {
  std::size_t count = 8;
  std::uint64_t seed = 0;
  double seconds = 2.0;
  std::size_t fps = 4;
  std::uint16_t height = 256;
  std::uint16_t width = 456;
  // The last `validation` clips are tagged as the validation split.
  std::size_t validation = 0;
};

// Generating parameters of one synthetic clip.
struct SynthParams {
  double frequency = 0.0;    // dominant tone, Hz
  std::array<double, 3> color{};  // per-channel mean in [0, 1]
  double orientation = 0.0;  // gradient direction, radians
};

SynthParams draw_synth_params(Rng& rng);
TraitVector synth_label(const SynthParams& p);
Clip synth_clip(const SynthParams& p, const SynthOptions& options, Rng& rng);

// Writes clips/<id>.diclip and manifest.csv under `out_dir`.
Manifest synth_dataset(const SynthOptions& options, const std::filesystem::path& out_dir);

// Writes via a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace deepimp
