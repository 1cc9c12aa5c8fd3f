#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "deepimp/archive.hpp"
#include "deepimp/data.hpp"
#include "deepimp/model.hpp"
#include "deepimp/optim.hpp"

namespace deepimp {

struct Checkpoint {
  std::uint32_t epoch = 0;  // completed epochs
  NetworkParams<float> params;
  AdamState<float> adam;
  std::string rng_state;
};

TensorArchive to_archive(const Checkpoint& checkpoint);
// Validates the tensor name/shape manifest against `arch`.
Checkpoint from_archive(const TensorArchive& archive, const Architecture& arch);
// Picks the full or miniature architecture (with a 5- or 1-output head) whose
// manifest the archive matches.
Architecture infer_architecture(const TensorArchive& archive);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path, const Architecture& arch);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainConfig {
  std::uint32_t epochs = 900;
  std::size_t batch_size = 32;
  LrSchedule schedule;
  AdamHyper adam;  // alpha is overridden by the schedule every epoch
  std::uint64_t seed = 0;
  std::uint32_t checkpoint_every = 0;  // 0: final checkpoint only
  std::filesystem::path out_dir;      // empty: write nothing
  bool mini = false;
  // Target column for single-output heads.
  std::optional<std::size_t> trait;

  Architecture architecture() const { return mini ? Architecture::mini() : Architecture::full(); }
  void validate() const;
};

struct EpochLog {
  std::uint32_t epoch = 0;
  double alpha = 0.0;
  double train_mae = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

std::string format_loss_log(const std::vector<EpochLog>& log);

// Fresh network (He init from the seed), zero optimizer state, epoch 0.
Checkpoint initial_checkpoint(const Architecture& arch, std::uint64_t seed);

// Labeled clips of one split, in manifest order.
std::vector<Clip> load_split(const Manifest& manifest, Split split);

// Runs epochs [start.epoch, config.epochs). Each epoch shuffles the clips,
// draws one audio crop and one frame crop per clip, and takes one Adam step
// per mini-batch; a trailing batch smaller than two clips is dropped. A
// non-finite loss throws NumericError; with an output directory the state at
// the start of the failing epoch is written to last_good.bin first.
TrainResult train(const TrainConfig& config, const std::vector<Clip>& clips, Checkpoint start);
TrainResult train(const TrainConfig& config, const Manifest& manifest,
                  std::optional<Checkpoint> resume = std::nullopt);

// --- per-trait fine-tuning ---------------------------------------------------------

// Copy of `base` with the fusion layer replaced by a freshly initialized
// single-output layer; optimizer state and epoch reset.
Checkpoint per_trait_start(const Checkpoint& base, std::size_t trait, std::uint64_t seed);
TrainResult finetune_per_trait(const Checkpoint& base, std::size_t trait, TrainConfig config,
                               const std::vector<Clip>& clips);

// --- evaluation ------------------------------------------------------------------

struct EvalReport {
  std::array<double, kTraitCount> accuracy{};
  double average = 0.0;
  std::size_t clips = 0;
  std::size_t excluded = 0;
  std::vector<std::string> failures;
};

// average = arithmetic mean of the per-trait accuracies.
EvalReport make_report(const std::array<double, kTraitCount>& accuracy, std::size_t clips,
                       std::size_t excluded = 0);
// accuracy_k = 1 - mean |pred_k - target_k|, accumulated in clip order.
EvalReport score_predictions(const std::vector<TraitVector>& predictions,
                             const std::vector<TraitVector>& targets);
std::string format_report_csv(const EvalReport& report);

struct EvalOptions {
  InferenceOptions inference;
  std::size_t threads = 1;
};

struct ClipPrediction {
  std::string clip_id;
  std::optional<Tensor> output;  // empty when the clip failed to load
  std::string error;
  TraitVector target;
};

// Full-clip predictions for every row of a split, in manifest order.
std::vector<ClipPrediction> predict_split(const NetworkParams<float>& params,
                                          const Manifest& manifest, Split split,
                                          const EvalOptions& options = {});

EvalReport evaluate(const NetworkParams<float>& params, const Manifest& manifest, Split split,
                    const EvalOptions& options = {});
EvalReport evaluate(const NetworkParams<float>& params, const std::vector<Clip>& clips,
                    const EvalOptions& options = {});

// One single-output network per trait, combined into a five-trait report.
EvalReport evaluate_per_trait(const std::array<const NetworkParams<float>*, kTraitCount>& nets,
                              const std::vector<Clip>& clips, const EvalOptions& options = {});
// Accuracy of one trait column; the network may have one or five outputs.
double trait_accuracy(const NetworkParams<float>& params, std::size_t trait,
                      const std::vector<Clip>& clips, const EvalOptions& options = {});

// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace deepimp
