#include <doctest.h>

#include <cmath>

#include "deepimp/train.hpp"
#include "support.hpp"

using namespace deepimp;
using testing::TempDir;

namespace {

SynthOptions mini_clips() {
  SynthOptions o;
  o.seconds = 0.064;
  o.fps = 16;
  o.height = 32;
  o.width = 32;
  return o;
}

std::vector<Clip> make_clips(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Clip> clips;
  for (std::size_t i = 0; i < n; ++i) clips.push_back(synth_clip(draw_synth_params(rng), mini_clips(), rng));
  return clips;
}

TrainConfig mini_config(std::uint32_t epochs) {
  TrainConfig c;
  c.mini = true;
  c.epochs = epochs;
  c.batch_size = 4;
  c.seed = 3;
  return c;
}

std::vector<std::uint8_t> bytes_of(const Checkpoint& c) { return encode_archive(to_archive(c)); }

}  // namespace

TEST_CASE("checkpoint save/load is bitwise lossless, predictions included") {
  TempDir dir;
  const auto clips = make_clips(6, 1);
  const auto result = train(mini_config(2), clips, initial_checkpoint(Architecture::mini(), 3));
  save_checkpoint(result.checkpoint, dir / "c.bin");
  const Checkpoint back = load_checkpoint(dir / "c.bin");
  CHECK(back.epoch == 2);
  CHECK(back.adam.step == result.checkpoint.adam.step);
  CHECK(back.rng_state == result.checkpoint.rng_state);
  CHECK(bytes_of(back) == bytes_of(result.checkpoint));
  CHECK(read_file(dir / "c.bin") == encode_archive(to_archive(back)));
  for (const auto& c : clips) CHECK(predict_clip(c, back.params) == predict_clip(c, result.checkpoint.params));
  CHECK(load_checkpoint(dir / "c.bin", Architecture::mini()).epoch == 2);
}

TEST_CASE("checkpoint loading rejects mismatches and damaged files") {
  TempDir dir;
  save_checkpoint(initial_checkpoint(Architecture::mini(), 1), dir / "c.bin");
  auto code_of = [&](auto&& fn) {
    try {
      fn();
    } catch (const ArchiveError& e) {
      return e.code();
    }
    FAIL("expected ArchiveError");
    return ArchiveError::Code::io;
  };
  CHECK(code_of([&] { load_checkpoint(dir / "c.bin", Architecture::full()); }) ==
        ArchiveError::Code::manifest_mismatch);

  auto bytes = read_file(dir / "c.bin");
  auto versioned = bytes;
  versioned[8] = 9;
  write_file_atomic(dir / "v.bin", versioned.data(), versioned.size());
  CHECK(code_of([&] { load_checkpoint(dir / "v.bin"); }) == ArchiveError::Code::version_mismatch);
  write_file_atomic(dir / "t.bin", bytes.data(), bytes.size() - 3);
  CHECK(code_of([&] { load_checkpoint(dir / "t.bin"); }) == ArchiveError::Code::truncated);
  bytes[0] = 'x';
  write_file_atomic(dir / "m.bin", bytes.data(), bytes.size());
  CHECK(code_of([&] { load_checkpoint(dir / "m.bin"); }) == ArchiveError::Code::bad_magic);
  CHECK(code_of([&] { load_checkpoint(dir / "none.bin"); }) == ArchiveError::Code::io);

  auto archive = to_archive(initial_checkpoint(Architecture::mini(), 1));
  archive.tensors[0].tensor = Tensor({1});
  CHECK(code_of([&] { from_archive(archive, Architecture::mini()); }) == ArchiveError::Code::manifest_mismatch);
}

TEST_CASE("training is deterministic and resume reproduces the next epoch bitwise") {
  const auto clips = make_clips(6, 2);
  const auto start = initial_checkpoint(Architecture::mini(), 3);
  const auto a = train(mini_config(3), clips, start);
  const auto b = train(mini_config(3), clips, start);
  REQUIRE(a.log.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) CHECK(a.log[e].train_mae == b.log[e].train_mae);
  CHECK(bytes_of(a.checkpoint) == bytes_of(b.checkpoint));

  TempDir dir;
  const auto first = train(mini_config(2), clips, start);
  save_checkpoint(first.checkpoint, dir / "two.bin");
  const auto resumed = train(mini_config(3), clips, load_checkpoint(dir / "two.bin"));
  REQUIRE(resumed.log.size() == 1);
  CHECK(resumed.log[0].epoch == 2);
  CHECK(resumed.log[0].train_mae == a.log[2].train_mae);
  CHECK(bytes_of(resumed.checkpoint) == bytes_of(a.checkpoint));
}

TEST_CASE("training writes a loss log and checkpoints at the cadence") {
  TempDir dir;
  auto config = mini_config(4);
  config.out_dir = dir.path();
  config.checkpoint_every = 2;
  config.schedule.period = 2;
  const auto r = train(config, make_clips(5, 4), initial_checkpoint(Architecture::mini(), 3));
  CHECK(std::filesystem::exists(dir / "ckpt_00002.bin"));
  CHECK(std::filesystem::exists(dir / "ckpt_00004.bin"));
  CHECK(std::filesystem::exists(dir / "final.bin"));
  CHECK(r.log[2].alpha == doctest::Approx(2e-5).epsilon(1e-12));
  const auto text = read_file(dir / "loss.csv");
  const std::string csv(text.begin(), text.end());
  CHECK(csv == format_loss_log(r.log));
  CHECK(csv.starts_with("epoch,alpha,train_mae\n"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

  auto bad = mini_config(1);
  bad.batch_size = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("a head that starts at 0.5 gives epoch-0 loss near the mean |0.5 - label|") {
  const auto clips = make_clips(8, 5);
  auto start = initial_checkpoint(Architecture::mini(), 3);
  for (auto& v : start.params.fusion_w.data()) v = 0.0f;
  double expected = 0.0;
  for (const auto& c : clips)
    for (std::size_t k = 0; k < kTraitCount; ++k) expected += std::abs(0.5 - (*c.label())[k]);
  expected /= 8.0 * kTraitCount;
  auto config = mini_config(1);
  config.batch_size = 8;
  const auto r = train(config, clips, start);
  CHECK(r.log[0].train_mae == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("five trait accuracies aggregate to their mean within one ulp") {
  const auto report = make_report({0.911983, 0.915466, 0.913077, 0.909705, 0.910429}, 2000);
  CHECK(std::abs(report.average - 0.912132) <= std::nextafter(0.912132, 1.0) - 0.912132);
  const std::string csv = format_report_csv(report);
  CHECK(csv.starts_with("average,openness,agreeableness,conscientiousness,neuroticism,extraversion,clips,excluded\n"));
  CHECK(csv.find("0.912132,0.911983,0.915466,0.913077,0.909705,0.910429,2000,0") != std::string::npos);
}

TEST_CASE("scoring: perfect predictions and a constant predictor") {
  Rng rng(8);
  std::uniform_real_distribution<float> u(0.05f, 0.95f);
  std::vector<TraitVector> targets(20), half(20);
  for (auto& t : targets)
    for (auto& v : t.values) v = u(rng);
  for (auto& h : half) h.values.fill(0.5f);
  const auto perfect = score_predictions(targets, targets);
  for (double a : perfect.accuracy) CHECK(a == 1.0);
  CHECK(perfect.average == 1.0);
  const auto constant = score_predictions(half, targets);
  double avg = 0.0;
  for (std::size_t k = 0; k < kTraitCount; ++k) {
    double s = 0.0;
    for (const auto& t : targets) s += std::abs(0.5 - static_cast<double>(t[k]));
    CHECK(constant.accuracy[k] == doctest::Approx(1.0 - s / 20.0).epsilon(1e-12));
    avg += (1.0 - s / 20.0) / 5.0;
  }
  CHECK(constant.average == doctest::Approx(avg).epsilon(1e-12));
  CHECK(constant.clips == 20);
}

TEST_CASE("evaluation matches per-clip inference and excludes unreadable clips") {
  TempDir dir;
  auto o = mini_clips();
  o.count = 5;
  o.validation = 3;
  Manifest m = synth_dataset(o, dir.path());
  const auto net = build_network(Architecture::mini(), 9);

  const auto clips = load_split(m, Split::validation);
  std::array<double, kTraitCount> expected{};
  for (const auto& c : clips) {
    const Tensor y = predict_clip(c, net);
    for (std::size_t k = 0; k < kTraitCount; ++k) expected[k] += std::abs(y[k] - (*c.label())[k]) / 3.0;
  }
  const auto report = evaluate(net, m, Split::validation);
  CHECK(report.clips == 3);
  for (std::size_t k = 0; k < kTraitCount; ++k) CHECK(report.accuracy[k] == doctest::Approx(1.0 - expected[k]).epsilon(1e-6));
  EvalOptions threaded;
  threaded.threads = 3;
  const auto t = evaluate(net, m, Split::validation, threaded);
  CHECK(t.accuracy == report.accuracy);

  std::filesystem::remove(m.resolve(m.rows[4]));
  const auto missing = evaluate(net, m, Split::validation);
  CHECK(missing.clips == 2);
  CHECK(missing.excluded == 1);
  REQUIRE(missing.failures.size() == 1);
  CHECK(missing.failures[0].find(m.rows[4].clip_id) != std::string::npos);
}

TEST_CASE("per-trait head replacement") {
  const auto base = train(mini_config(1), make_clips(4, 6), initial_checkpoint(Architecture::mini(), 3)).checkpoint;
  const auto start = per_trait_start(base, 2, 11);
  CHECK(start.epoch == 0);
  CHECK(start.adam.step == 0);
  CHECK(start.params.fusion_w.shape() == Shape{64, 1});
  CHECK(start.params.fusion_b == Tensor({1}));
  CHECK(start.params.arch.outputs == 1);
  const auto a = base.params.all_tensors(), b = start.params.all_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first.starts_with("fusion.")) continue;
    CHECK(a[i].first == b[i].first);
    CHECK(*a[i].second == *b[i].second);
  }
  CHECK_THROWS_AS(per_trait_start(base, 5, 11), std::invalid_argument);

  TempDir dir;
  save_checkpoint(start, dir / "head.bin");
  CHECK(load_checkpoint(dir / "head.bin").params.arch.outputs == 1);

  const auto tuned = finetune_per_trait(base, 2, mini_config(2), make_clips(4, 6));
  CHECK(tuned.checkpoint.params.fusion_w.shape() == Shape{64, 1});
  CHECK(trait_accuracy(tuned.checkpoint.params, 2, make_clips(4, 6)) > 0.0);
}

TEST_CASE("parallel_for visits every index once") {
  std::vector<int> hits(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { ++hits[i]; });
  for (int h : hits) CHECK(h == 1);
}
