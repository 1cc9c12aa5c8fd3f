#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>

#include "deepimp/data.hpp"
#include "deepimp/errors.hpp"
#include "support.hpp"

using namespace deepimp;
using testing::TempDir;

namespace {

Clip small_clip(std::uint64_t seed, std::size_t frames = 3, std::size_t h = 5, std::size_t w = 7) {
  std::mt19937_64 rng(seed);
  Tensor audio = testing::random_tensor({1, 40}, rng, 0.5);
  Tensor pix({frames, 3, h, w});
  std::uniform_int_distribution<int> u(0, 255);
  for (auto& v : pix.data()) v = static_cast<float>(u(rng)) / 255.0f;
  return Clip::from_frames(audio, pix);
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Frequency with the largest DFT magnitude on a 2 Hz grid over [150, 2100] Hz.
double dominant_frequency(const Tensor& audio) {
  double best = 0.0, best_power = -1.0;
  for (double f = 150.0; f <= 2100.0; f += 2.0) {
    double re = 0.0, im = 0.0;
    const double w = 2.0 * std::numbers::pi * f / 16000.0;
    for (std::size_t i = 0; i < audio.size(); ++i) {
      re += audio[i] * std::cos(w * static_cast<double>(i));
      im += audio[i] * std::sin(w * static_cast<double>(i));
    }
    if (re * re + im * im > best_power) best_power = re * re + im * im, best = f;
  }
  return best;
}

std::string manifest_text(const std::string& rows) {
  return "clip_id,path,openness,agreeableness,conscientiousness,neuroticism,extraversion,split\n" + rows;
}

std::string error_of(const std::string& text) {
  try {
    parse_manifest(text);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("clip container round trip") {
  TempDir dir;
  Clip c = small_clip(1);
  save_clip(c, dir / "a.diclip");
  const Clip back = load_clip(dir / "a.diclip");
  CHECK(back == c);
  CHECK(back.frame(2) == c.frame(2));
  // Header (20 bytes) + 40 float samples + 3 * 3 * 5 * 7 pixels.
  CHECK(std::filesystem::file_size(dir / "a.diclip") == 20 + 160 + 315);
}

TEST_CASE("clip container errors carry a code") {
  TempDir dir;
  const auto bytes = encode_clip(small_clip(2));
  auto code_of = [](const std::vector<std::uint8_t>& b) {
    try {
      decode_clip(b);
    } catch (const ClipFormatError& e) {
      return e.code();
    }
    FAIL("expected ClipFormatError");
    return ClipFormatError::Code::invalid;
  };
  auto bad = bytes;
  bad[0] = 'X';
  CHECK(code_of(bad) == ClipFormatError::Code::bad_magic);
  CHECK(code_of({bytes.begin(), bytes.begin() + 12}) == ClipFormatError::Code::truncated);
  CHECK(code_of({bytes.begin(), bytes.end() - 1}) == ClipFormatError::Code::truncated);
  auto zero = bytes;
  zero[12] = zero[13] = zero[14] = zero[15] = 0;  // frame count
  CHECK(code_of(zero) == ClipFormatError::Code::invalid);
  auto huge = bytes;
  for (int i = 8; i < 20; ++i) huge[i] = 0xff;
  CHECK(code_of(huge) == ClipFormatError::Code::extent_overflow);
  try {
    load_clip(dir / "missing.diclip");
    FAIL("expected ClipFormatError");
  } catch (const ClipFormatError& e) {
    CHECK(e.code() == ClipFormatError::Code::io);
  }
}

TEST_CASE("clip slicing and frame views") {
  const Clip c = small_clip(3);
  const Clip s = c.slice(10, 20, 1, 3);
  CHECK(s.sample_count() == 10);
  CHECK(s.frame_count() == 2);
  CHECK(s.audio()[0] == c.audio()[10]);
  CHECK(s.frame(0) == c.frame(1));
  CHECK_THROWS(c.slice(0, 41, 0, 1));
  CHECK_THROWS(c.frame(3));
}

TEST_CASE("manifest parsing and validation") {
  const auto m = parse_manifest(manifest_text("a,clips/a.diclip,0.1,0.2,0.3,0.4,0.5,train\r\n"
                                              "b,/abs/b.diclip,1,0,0.5,0.5,0.5,validation\n"),
                                "/data");
  REQUIRE(m.rows.size() == 2);
  CHECK(m.rows[0].label[4] == 0.5f);
  CHECK(m.rows[1].split == Split::validation);
  CHECK(m.resolve(m.rows[0]) == std::filesystem::path("/data/clips/a.diclip"));
  CHECK(m.resolve(m.rows[1]) == std::filesystem::path("/abs/b.diclip"));
  CHECK(m.rows_for(Split::train).size() == 1);
  CHECK(parse_manifest(format_manifest(m)).rows.size() == 2);

  CHECK(error_of("id,path\n").find("header") != std::string::npos);
  CHECK(error_of(manifest_text("a,p,0.1,0.2,0.3,0.4,train\n")).find("row 2") != std::string::npos);
  const std::string range = error_of(manifest_text("a,p,0.1,0.2,0.3,0.4,0.5,train\nb,p,0.1,1.2,0.3,0.4,0.5,train\n"));
  CHECK(range.find("row 3") != std::string::npos);
  CHECK(range.find("agreeableness") != std::string::npos);
  CHECK(error_of(manifest_text("a,p,x,0.2,0.3,0.4,0.5,train\n")).find("row 2") != std::string::npos);
  CHECK(error_of(manifest_text("a,p,0.1,0.2,0.3,0.4,0.5,dev\n")).find("row 2") != std::string::npos);
  CHECK(error_of(manifest_text("a,p,0.1,0.2,0.3,0.4,0.5,train\na,q,0.1,0.2,0.3,0.4,0.5,test\n"))
            .find("duplicate") != std::string::npos);
  CHECK_FALSE(error_of("").empty());
}

TEST_CASE("audio crops are contiguous windows; short audio is zero-padded") {
  const Clip c = small_clip(4);
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    const Tensor w = crop_audio(c, rng, 16);
    CHECK(w.shape() == Shape{1, 16});
    std::size_t start = 0;
    while (start + 16 <= 40 && c.audio()[start] != w[0]) ++start;
    REQUIRE(start + 16 <= 40);
    for (std::size_t k = 0; k < 16; ++k) CHECK(w[k] == c.audio()[start + k]);
  }
  const Tensor padded = crop_audio(c, rng, 64);
  for (std::size_t k = 0; k < 40; ++k) CHECK(padded[k] == c.audio()[k]);
  for (std::size_t k = 40; k < 64; ++k) CHECK(padded[k] == 0.0f);
}

TEST_CASE("frame crops copy pixels exactly, flips mirror columns") {
  const Clip c = small_clip(5, 2, 9, 11);
  for (bool flip : {false, true}) {
    const FrameCrop fc{1, 2, 3, flip};
    const Tensor crop = extract_frame_crop(c, fc, 4);
    const Tensor frame = c.frame(1);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) {
          const std::size_t src_x = 3 + (flip ? 3 - x : x);
          CHECK(crop.at({ch, y, x}) == frame.at({ch, 2 + y, src_x}));
        }
  }
  Rng rng(1);
  int flips = 0;
  for (int i = 0; i < 200; ++i) flips += draw_frame_crop(c, rng, 4).flip;
  CHECK(flips > 70);
  CHECK(flips < 130);
  CHECK_THROWS_AS(crop_frame(c, rng, 10), DataError);
  CHECK_THROWS_AS(extract_frame_crop(c, {0, 6, 0, false}, 4), DataError);
}

TEST_CASE("rng state round trip") {
  Rng a(77);
  a.discard(13);
  Rng b = rng_from_state(rng_state(a));
  for (int i = 0; i < 10; ++i) CHECK(a() == b());
  CHECK_THROWS_AS(rng_from_state("not a state"), DataError);
}

TEST_CASE("synthetic dataset is deterministic and labels track generators") {
  TempDir d1, d2;
  SynthOptions o;
  o.count = 16;
  o.seed = 42;
  o.seconds = 0.5;
  o.fps = 2;
  o.height = 24;
  o.width = 40;
  o.validation = 4;
  const Manifest m1 = synth_dataset(o, d1.path());
  const Manifest m2 = synth_dataset(o, d2.path());
  REQUIRE(m1.rows.size() == 16);
  CHECK(m1.rows_for(Split::validation).size() == 4);
  CHECK(m1.rows.back().split == Split::validation);
  CHECK(format_manifest(m1) == format_manifest(m2));
  CHECK(read_file(d1 / "manifest.csv") == read_file(d2 / "manifest.csv"));

  std::vector<double> freq, open, red, agree;
  for (const auto& row : m1.rows) {
    CHECK(read_file(m1.resolve(row)) == read_file(m2.resolve(row)));
    for (std::size_t k = 0; k < kTraitCount; ++k) {
      CHECK(row.label[k] >= 0.05f);
      CHECK(row.label[k] <= 0.95f);
    }
    const Clip c = load_labeled_clip(m1, row);
    CHECK(c.label() == std::optional<TraitVector>(row.label));
    CHECK(c.sample_count() == 8000);
    CHECK(c.frame_count() == 1);
    freq.push_back(dominant_frequency(c.audio()));
    open.push_back(row.label[0]);
    const Tensor f = c.frame(0);
    double r = 0.0;
    for (std::size_t i = 0; i < 24 * 40; ++i) r += f[i];
    red.push_back(r / (24 * 40));
    agree.push_back(row.label[1]);
  }
  CHECK(correlation(freq, open) > 0.99);
  CHECK(correlation(red, agree) > 0.99);

  TempDir d3;
  o.seed = 43;
  CHECK(format_manifest(synth_dataset(o, d3.path())) != format_manifest(m1));
}
