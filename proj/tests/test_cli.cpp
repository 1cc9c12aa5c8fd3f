#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include "deepimp/cli.hpp"
#include "deepimp/train.hpp"
#include "support.hpp"

using namespace deepimp;
using testing::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> synth_args(const std::filesystem::path& dir, std::string n = "3") {
  return {"synth", "--n", n, "--out", dir.string(), "--seconds", "0.064", "--fps", "16",
          "--height", "32", "--width", "32", "--seed", "5", "--validation", "1"};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("synth is deterministic given the seed") {
  TempDir a, b;
  REQUIRE(run(synth_args(a.path())).code == 0);
  REQUIRE(run(synth_args(b.path())).code == 0);
  CHECK(slurp(a / "manifest.csv") == slurp(b / "manifest.csv"));
  for (const auto& e : std::filesystem::directory_iterator(a / "clips")) {
    CHECK(read_file(e.path()) == read_file(b.path() / "clips" / e.path().filename()));
  }
}

TEST_CASE("usage errors exit with 1") {
  CHECK(run({}).code == 1);
  CHECK(run({"nonsense"}).code == 1);
  CHECK(run({"synth", "--out", "/tmp/x", "--bogus", "1"}).code == 1);
  CHECK(run({"train", "--manifest", "m.csv"}).code == 1);
  CHECK(run({"train", "--manifest", "m.csv", "--out", "o", "--batch-size", "1"}).code == 1);
  CHECK(run({"eval", "--checkpoint", "c", "--manifest", "m", "--split", "dev"}).code == 1);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("missing inputs exit with 2") {
  TempDir d;
  const auto r = run({"train", "--mini", "--manifest", (d / "none.csv").string(), "--out", d.path().string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("none.csv") != std::string::npos);
}

TEST_CASE("train, eval, predict and finetune end to end") {
  TempDir d;
  REQUIRE(run(synth_args(d / "data", "4")).code == 0);
  const std::string manifest = (d / "data" / "manifest.csv").string();
  const std::string run_dir = (d / "run").string();

  std::ofstream(d / "train.cfg") << "# defaults\nepochs = 3\nbatch-size = 2\n";
  auto r = run({"train", "--mini", "--manifest", manifest, "--out", run_dir, "--config", (d / "train.cfg").string(),
                "--epochs", "2"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  // Command-line flags override the file.
  const std::string loss = slurp(d / "run" / "loss.csv");
  CHECK(std::count(loss.begin(), loss.end(), '\n') == 3);
  const std::string ckpt = (d / "run" / "final.bin").string();
  CHECK(load_checkpoint(ckpt).epoch == 2);

  std::ofstream(d / "bad.cfg") << "no-such-key = 1\n";
  CHECK(run({"train", "--mini", "--manifest", manifest, "--out", run_dir, "--config", (d / "bad.cfg").string()}).code == 1);

  r = run({"eval", "--checkpoint", ckpt, "--manifest", manifest, "--split", "validation"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(std::filesystem::exists(d / "run" / "eval_validation.csv"));
  CHECK(slurp(d / "run" / "eval_validation.csv") == r.out);

  r = run({"predict", "--checkpoint", ckpt, "--manifest", manifest, "--split", "train", "--threads", "2"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const std::regex line(R"(synth_\d{5}(,[01]\.\d{6}){5})");
  std::istringstream lines(r.out);
  std::string l;
  int count = 0;
  while (std::getline(lines, l)) {
    CHECK_MESSAGE(std::regex_match(l, line), l);
    ++count;
  }
  CHECK(count == 3);

  r = run({"finetune", "--checkpoint", ckpt, "--manifest", manifest, "--out", (d / "ft").string(), "--trait",
           "neuroticism", "--epochs", "1", "--batch-size", "2"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(load_checkpoint(d / "ft" / "final.bin").params.arch.outputs == 1);
  CHECK(run({"finetune", "--checkpoint", ckpt, "--manifest", manifest, "--out", (d / "ft").string(), "--trait",
             "5"}).code == 1);
  CHECK(run({"predict", "--checkpoint", (d / "ft" / "final.bin").string(), "--manifest", manifest, "--split",
             "train"}).code == 1);

  r = run({"train", "--mini", "--manifest", manifest, "--out", run_dir, "--resume", ckpt, "--epochs", "3",
           "--batch-size", "2"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(load_checkpoint(ckpt).epoch == 3);
}

TEST_CASE("eval prints 1.000000 for a network that reproduces the labels") {
  TempDir d;
  REQUIRE(run(synth_args(d.path())).code == 0);
  Manifest m = load_manifest(d / "manifest.csv");
  TraitVector label;
  label.values = {0.2f, 0.35f, 0.5f, 0.65f, 0.8f};
  for (auto& row : m.rows) row.label = label;
  save_manifest(m, d / "manifest.csv");

  auto ckpt = initial_checkpoint(Architecture::mini(), 1);
  for (auto& v : ckpt.params.fusion_w.data()) v = 0.0f;
  for (std::size_t k = 0; k < kTraitCount; ++k) ckpt.params.fusion_b[k] = static_cast<float>(std::atanh(2.0 * label[k] - 1.0));
  save_checkpoint(ckpt, d / "perfect.bin");

  const auto r = run({"eval", "--checkpoint", (d / "perfect.bin").string(), "--manifest", (d / "manifest.csv").string(),
                      "--split", "train", "--out", (d / "report.csv").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("\n1.000000,1.000000,1.000000,1.000000,1.000000,1.000000,2,0") != std::string::npos);
}

TEST_CASE("feature extraction and the recurrent head through the CLI") {
  TempDir d;
  auto args = synth_args(d / "data", "2");
  args[6] = "2.0";
  args[8] = "2";
  REQUIRE(run(args).code == 0);
  const auto manifest = (d / "data" / "manifest.csv").string();
  save_checkpoint(initial_checkpoint(Architecture::mini(), 1), d / "base.bin");
  auto r = run({"extract-features", "--checkpoint", (d / "base.bin").string(), "--manifest", manifest, "--split",
                "train", "--out", (d / "feat.bin").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  r = run({"train-rnn", "--features", (d / "feat.bin").string(), "--out", (d / "head.bin").string(), "--epochs", "2",
           "--hidden", "8"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  r = run({"predict-rnn", "--checkpoint", (d / "base.bin").string(), "--manifest", manifest, "--split", "train",
           "--head", (d / "head.bin").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 1);
}

TEST_CASE("thread count falls back to DI_THREADS") {
  TempDir d;
  REQUIRE(run(synth_args(d.path())).code == 0);
  save_checkpoint(initial_checkpoint(Architecture::mini(), 1), d / "c.bin");
  const std::vector<std::string> args{"predict", "--checkpoint", (d / "c.bin").string(), "--manifest",
                                      (d / "manifest.csv").string(), "--split", "train"};
  ::setenv("DI_THREADS", "0", 1);
  CHECK(run(args).code == 1);
  ::setenv("DI_THREADS", "2", 1);
  const auto two = run(args);
  ::unsetenv("DI_THREADS");
  CHECK(two.code == 0);
  CHECK(two.out == run(args).out);
}

TEST_CASE("gradcheck subcommand passes") {
  const auto r = run({"gradcheck", "--mini", "--seed", "1"});
  CHECK_MESSAGE(r.code == 0, r.out);
  CHECK(r.out.find("network_mini") != std::string::npos);
}
