#include "deepimp/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include "byteio.hpp"

namespace deepimp {

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream is(state);
  is >> rng;
  if (!is) throw DataError("invalid random generator state");
  return rng;
}

const std::array<std::string_view, kTraitCount>& trait_names() {
  static const std::array<std::string_view, kTraitCount> names{
      "openness", "agreeableness", "conscientiousness", "neuroticism", "extraversion"};
  return names;
}

// --- Clip ------------------------------------------------------------------------

Clip::Clip(Tensor audio, std::uint32_t frame_count, std::uint16_t height, std::uint16_t width,
           std::vector<std::uint8_t> pixels, std::optional<TraitVector> label)
    : audio_(std::move(audio)),
      frame_count_(frame_count),
      height_(height),
      width_(width),
      pixels_(std::move(pixels)),
      label_(label) {
  if (audio_.rank() != 2 || audio_.extent(0) != 1) {
    throw ShapeError("clip audio must be (1, S), got " + shape_string(audio_.shape()));
  }
  if (frame_count_ == 0 || height_ == 0 || width_ == 0) {
    throw ShapeError("clip needs at least one non-empty frame");
  }
  const std::size_t expected = std::size_t{frame_count_} * 3 * height_ * width_;
  if (pixels_.size() != expected) {
    throw ShapeError("clip pixel buffer holds " + std::to_string(pixels_.size()) +
                     " bytes, expected " + std::to_string(expected));
  }
}

Clip Clip::from_frames(Tensor audio, const Tensor& frames, std::optional<TraitVector> label) {
  if (frames.rank() != 4 || frames.extent(1) != 3) {
    throw ShapeError("frames must be (T, 3, H, W), got " + shape_string(frames.shape()));
  }
  if (frames.extent(0) > std::numeric_limits<std::uint32_t>::max() ||
      frames.extent(2) > std::numeric_limits<std::uint16_t>::max() ||
      frames.extent(3) > std::numeric_limits<std::uint16_t>::max()) {
    throw ShapeError("frame extents exceed the container limits");
  }
  std::vector<std::uint8_t> pixels(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const float v = std::clamp(frames[i], 0.0f, 1.0f);
    pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return Clip(std::move(audio), static_cast<std::uint32_t>(frames.extent(0)),
              static_cast<std::uint16_t>(frames.extent(2)),
              static_cast<std::uint16_t>(frames.extent(3)), std::move(pixels), label);
}

Tensor Clip::frame(std::size_t index) const {
  if (index >= frame_count_) {
    throw std::out_of_range("frame " + std::to_string(index) + " of " +
                            std::to_string(frame_count_));
  }
  const std::size_t n = std::size_t{3} * height_ * width_;
  Tensor out({3, height_, width_});
  const std::uint8_t* src = pixels_.data() + index * n;
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(src[i]) / 255.0f;
  return out;
}

Clip Clip::slice(std::size_t begin, std::size_t end, std::size_t frame_begin,
                 std::size_t frame_end) const {
  if (begin >= end || end > sample_count() || frame_begin >= frame_end ||
      frame_end > frame_count_) {
    throw std::out_of_range("clip slice out of range");
  }
  std::vector<float> samples(audio_.data().begin() + static_cast<std::ptrdiff_t>(begin),
                             audio_.data().begin() + static_cast<std::ptrdiff_t>(end));
  const std::size_t n = std::size_t{3} * height_ * width_;
  std::vector<std::uint8_t> px(pixels_.begin() + static_cast<std::ptrdiff_t>(frame_begin * n),
                               pixels_.begin() + static_cast<std::ptrdiff_t>(frame_end * n));
  return Clip(Tensor({1, end - begin}, std::move(samples)),
              static_cast<std::uint32_t>(frame_end - frame_begin), height_, width_, std::move(px),
              label_);
}

// --- augmentation ------------------------------------------------------------------

Tensor audio_window(const Clip& clip, std::size_t start, std::size_t length) {
  Tensor out({1, length});
  const auto src = clip.audio().data();
  if (start < src.size()) {
    const std::size_t n = std::min(length, src.size() - start);
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(start), n, out.ptr());
  }
  return out;
}

Tensor crop_audio(const Clip& clip, Rng& rng, std::size_t length) {
  const std::size_t s = clip.sample_count();
  if (s <= length) return audio_window(clip, 0, length);
  std::uniform_int_distribution<std::size_t> start(0, s - length);
  return audio_window(clip, start(rng), length);
}

FrameCrop draw_frame_crop(const Clip& clip, Rng& rng, std::size_t size) {
  if (clip.height() < size || clip.width() < size) {
    throw DataError("frame " + std::to_string(clip.height()) + "x" + std::to_string(clip.width()) +
                    " is smaller than the " + std::to_string(size) + "x" + std::to_string(size) +
                    " crop");
  }
  FrameCrop c;
  c.frame = std::uniform_int_distribution<std::size_t>(0, clip.frame_count() - 1)(rng);
  c.row = std::uniform_int_distribution<std::size_t>(0, clip.height() - size)(rng);
  c.col = std::uniform_int_distribution<std::size_t>(0, clip.width() - size)(rng);
  c.flip = std::bernoulli_distribution(0.5)(rng);
  return c;
}

Tensor extract_frame_crop(const Clip& clip, const FrameCrop& crop, std::size_t size) {
  if (crop.frame >= clip.frame_count() || crop.row + size > clip.height() ||
      crop.col + size > clip.width()) {
    throw DataError("frame crop outside the clip");
  }
  const std::size_t h = clip.height(), w = clip.width();
  const std::uint8_t* frame = clip.pixels().data() + crop.frame * 3 * h * w;
  Tensor out({3, size, size});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < size; ++y) {
      const std::uint8_t* row = frame + (c * h + crop.row + y) * w + crop.col;
      float* dst = out.ptr() + (c * size + y) * size;
      for (std::size_t x = 0; x < size; ++x) {
        dst[crop.flip ? size - 1 - x : x] = static_cast<float>(row[x]) / 255.0f;
      }
    }
  }
  return out;
}

Tensor crop_frame(const Clip& clip, Rng& rng, std::size_t size) {
  return extract_frame_crop(clip, draw_frame_crop(clip, rng, size), size);
}

// --- clip container ----------------------------------------------------------------

namespace {

constexpr char kClipMagic[8] = {'D', 'I', 'C', 'l', 'i', 'p', '1', '\0'};
constexpr std::size_t kClipHeader = 8 + 4 + 4 + 2 + 2;

bool checked_mul(std::uint64_t a, std::uint64_t b, std::uint64_t& out) {
  return !__builtin_mul_overflow(a, b, &out);
}

}  // namespace

std::vector<std::uint8_t> encode_clip(const Clip& clip) {
  if (clip.frame_count() == 0 || clip.sample_count() == 0) {
    throw ClipFormatError(ClipFormatError::Code::invalid, "cannot encode an empty clip");
  }
  if (clip.sample_count() > std::numeric_limits<std::uint32_t>::max()) {
    throw ClipFormatError(ClipFormatError::Code::extent_overflow, "audio longer than 2^32 samples");
  }
  if (!all_finite(clip.audio())) {
    throw ClipFormatError(ClipFormatError::Code::invalid, "clip audio is not finite");
  }
  ByteWriter w;
  w.bytes(kClipMagic, sizeof kClipMagic);
  w.u32(static_cast<std::uint32_t>(clip.sample_count()));
  w.u32(clip.frame_count());
  w.u16(clip.height());
  w.u16(clip.width());
  for (float v : clip.audio().data()) w.f32(v);
  w.bytes(clip.pixels().data(), clip.pixels().size());
  return std::move(w.buffer);
}

Clip decode_clip(const std::vector<std::uint8_t>& bytes) {
  using Code = ClipFormatError::Code;
  if (bytes.size() < sizeof kClipMagic ||
      std::memcmp(bytes.data(), kClipMagic, sizeof kClipMagic) != 0) {
    throw ClipFormatError(Code::bad_magic, "bad magic: not a clip container");
  }
  if (bytes.size() < kClipHeader) throw ClipFormatError(Code::truncated, "truncated clip header");
  ByteReader r(bytes.data(), bytes.size());
  r.skip(sizeof kClipMagic);
  const std::uint32_t samples = r.u32();
  const std::uint32_t frames = r.u32();
  const std::uint16_t height = r.u16();
  const std::uint16_t width = r.u16();
  if (samples == 0 || frames == 0 || height == 0 || width == 0) {
    throw ClipFormatError(Code::invalid, "clip header has a zero extent");
  }
  std::uint64_t pixel_bytes = 0, audio_bytes = 0, total = 0;
  if (!checked_mul(frames, 3, pixel_bytes) || !checked_mul(pixel_bytes, height, pixel_bytes) ||
      !checked_mul(pixel_bytes, width, pixel_bytes) || !checked_mul(samples, 4, audio_bytes) ||
      __builtin_add_overflow(audio_bytes, pixel_bytes, &total) ||
      __builtin_add_overflow(total, std::uint64_t{kClipHeader}, &total) ||
      total > std::numeric_limits<std::size_t>::max()) {
    throw ClipFormatError(Code::extent_overflow, "clip header extents overflow");
  }
  if (bytes.size() != total) {
    throw ClipFormatError(Code::truncated, "truncated: file holds " + std::to_string(bytes.size()) +
                                               " bytes, header implies " + std::to_string(total));
  }
  std::vector<float> audio(samples);
  for (auto& v : audio) v = r.f32();
  std::vector<std::uint8_t> pixels(bytes.begin() + static_cast<std::ptrdiff_t>(r.position()),
                                   bytes.end());
  return Clip(Tensor({1, samples}, std::move(audio)), frames, height, width, std::move(pixels));
}

void save_clip(const Clip& clip, const std::filesystem::path& path) {
  const auto bytes = encode_clip(clip);
  write_file_atomic(path, bytes.data(), bytes.size());
}

Clip load_clip(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const DataError& e) {
    throw ClipFormatError(ClipFormatError::Code::io, e.what());
  }
  return decode_clip(bytes);
}

// --- files ---------------------------------------------------------------------------

void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    out.flush();
    if (!out) throw DataError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp.string() + ": " + ec.message());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

// --- manifest --------------------------------------------------------------------------

std::string_view split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "validation") return Split::validation;
  if (name == "test") return Split::test;
  throw DataError("unknown split '" + std::string(name) + "'");
}

namespace {

constexpr std::string_view kManifestHeader =
    "clip_id,path,openness,agreeableness,conscientiousness,neuroticism,extraversion,split";

std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.emplace_back(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

std::string_view trim_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

}  // namespace

Manifest parse_manifest(std::string_view text, std::filesystem::path base_dir) {
  Manifest m;
  m.base_dir = std::move(base_dir);
  std::set<std::string> ids;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool header_seen = false;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line =
        trim_cr(text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos));
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (line.empty()) continue;
    if (!header_seen) {
      if (line != kManifestHeader) throw DataError("manifest header mismatch on row 1");
      header_seen = true;
      continue;
    }
    const std::string where = "manifest row " + std::to_string(line_no);
    auto cells = split_csv(line);
    if (cells.size() != 8) throw DataError(where + ": expected 8 columns");
    ManifestRow row;
    row.clip_id = cells[0];
    row.path = cells[1];
    if (row.clip_id.empty()) throw DataError(where + ": empty clip_id");
    for (std::size_t k = 0; k < kTraitCount; ++k) {
      const std::string& cell = cells[2 + k];
      double value = 0.0;
      std::size_t used = 0;
      try {
        value = std::stod(cell, &used);
      } catch (const std::exception&) {
        throw DataError(where + ": trait '" + cell + "' is not a number");
      }
      if (used != cell.size() || !(value >= 0.0 && value <= 1.0)) {
        throw DataError(where + ": trait " + std::string(trait_names()[k]) + " = '" + cell +
                        "' outside [0, 1]");
      }
      row.label[k] = static_cast<float>(value);
    }
    try {
      row.split = parse_split(cells[7]);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    if (!ids.insert(row.clip_id).second) {
      throw DataError(where + ": duplicate clip_id " + row.clip_id);
    }
    m.rows.push_back(std::move(row));
  }
  if (!header_seen) throw DataError("manifest is empty");
  return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_manifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                        path.parent_path());
}

std::string format_manifest(const Manifest& manifest) {
  std::ostringstream os;
  os << kManifestHeader << '\n';
  os.setf(std::ios::fixed);
  os.precision(6);
  for (const auto& r : manifest.rows) {
    os << r.clip_id << ',' << r.path;
    for (std::size_t k = 0; k < kTraitCount; ++k) os << ',' << r.label[k];
    os << ',' << split_name(r.split) << '\n';
  }
  return os.str();
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  const std::string text = format_manifest(manifest);
  write_file_atomic(path, text.data(), text.size());
}

std::vector<ManifestRow> Manifest::rows_for(Split split) const {
  std::vector<ManifestRow> out;
  for (const auto& r : rows)
    if (r.split == split) out.push_back(r);
  return out;
}

std::filesystem::path Manifest::resolve(const ManifestRow& row) const {
  std::filesystem::path p(row.path);
  return p.is_absolute() ? p : base_dir / p;
}

Clip load_labeled_clip(const Manifest& manifest, const ManifestRow& row) {
  Clip clip = load_clip(manifest.resolve(row));
  clip.set_label(row.label);
  return clip;
}

// --- synthetic data ------------------------------------------------------------------------

namespace {

constexpr double kMinFrequency = 200.0;
constexpr double kMaxFrequency = 2000.0;
constexpr double kMinColor = 0.2;
constexpr double kMaxColor = 0.8;
constexpr double kRampAmplitude = 0.15;

double to_label(double unit) { return 0.05 + 0.9 * std::clamp(unit, 0.0, 1.0); }

}  // namespace

SynthParams draw_synth_params(Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SynthParams p;
  p.frequency = kMinFrequency + (kMaxFrequency - kMinFrequency) * unit(rng);
  for (auto& c : p.color) c = kMinColor + (kMaxColor - kMinColor) * unit(rng);
  p.orientation = std::numbers::pi * unit(rng);
  return p;
}

// Openness follows the tone frequency; agreeableness, conscientiousness and
// neuroticism follow the mean red, green and blue levels; extraversion mixes
// gradient orientation with overall brightness.
TraitVector synth_label(const SynthParams& p) {
  const double freq = (p.frequency - kMinFrequency) / (kMaxFrequency - kMinFrequency);
  auto color = [&](std::size_t c) { return (p.color[c] - kMinColor) / (kMaxColor - kMinColor); };
  const double brightness = (color(0) + color(1) + color(2)) / 3.0;
  const double orient = 0.5 * (1.0 + std::cos(2.0 * p.orientation));
  TraitVector t;
  t[0] = static_cast<float>(to_label(freq));
  t[1] = static_cast<float>(to_label(color(0)));
  t[2] = static_cast<float>(to_label(color(1)));
  t[3] = static_cast<float>(to_label(color(2)));
  t[4] = static_cast<float>(to_label(0.5 * orient + 0.5 * brightness));
  return t;
}

Clip synth_clip(const SynthParams& p, const SynthOptions& o, Rng& rng) {
  const std::size_t samples =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(o.seconds * kSampleRate)));
  const std::size_t frames =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(o.seconds * o.fps)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.01);

  const double phase = 2.0 * std::numbers::pi * unit(rng);
  const double overtone = 2500.0 + 1500.0 * unit(rng);
  const double overtone_phase = 2.0 * std::numbers::pi * unit(rng);
  std::vector<float> audio(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    const double t = static_cast<double>(i) / kSampleRate;
    const double v = 0.5 * std::sin(2.0 * std::numbers::pi * p.frequency * t + phase) +
                     0.1 * std::sin(2.0 * std::numbers::pi * overtone * t + overtone_phase) +
                     noise(rng);
    audio[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
  }

  const std::size_t h = o.height, w = o.width;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double radius = std::max(1.0, std::hypot(cx, cy));
  const double dx = std::cos(p.orientation), dy = std::sin(p.orientation);
  std::vector<std::uint8_t> pixels(frames * 3 * h * w);
  for (std::size_t f = 0; f < frames; ++f) {
    const double amp = kRampAmplitude * (1.0 + 0.1 * std::sin(0.7 * static_cast<double>(f)));
    for (std::size_t c = 0; c < 3; ++c) {
      const double sign = c == 1 ? -1.0 : 1.0;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double ramp = ((static_cast<double>(x) - cx) * dx + (static_cast<double>(y) - cy) * dy) / radius;
          const double v = std::clamp(p.color[c] + sign * amp * ramp, 0.0, 1.0);
          pixels[((f * 3 + c) * h + y) * w + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
      }
    }
  }
  return Clip(Tensor({1, samples}, std::move(audio)), static_cast<std::uint32_t>(frames),
              o.height, o.width, std::move(pixels), synth_label(p));
}

Manifest synth_dataset(const SynthOptions& options, const std::filesystem::path& out_dir) {
  if (options.count == 0) throw std::invalid_argument("synth_dataset needs at least one clip");
  if (options.validation > options.count) {
    throw std::invalid_argument("validation count exceeds clip count");
  }
  std::filesystem::create_directories(out_dir / "clips");
  Rng rng(options.seed);
  Manifest m;
  m.base_dir = out_dir;
  for (std::size_t i = 0; i < options.count; ++i) {
    const SynthParams p = draw_synth_params(rng);
    const Clip clip = synth_clip(p, options, rng);
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05zu", i);
    ManifestRow row;
    row.clip_id = id;
    row.path = "clips/" + row.clip_id + ".diclip";
    row.label = *clip.label();
    row.split = i >= options.count - options.validation ? Split::validation : Split::train;
    save_clip(clip, out_dir / row.path);
    m.rows.push_back(std::move(row));
  }
  save_manifest(m, out_dir / "manifest.csv");
  return m;
}

}  // namespace deepimp
