#include "deepimp/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace deepimp {

// --- checkpoints -----------------------------------------------------------------

TensorArchive to_archive(const Checkpoint& c) {
  TensorArchive a;
  a.epoch = c.epoch;
  for (const auto& [name, t] : c.params.all_tensors()) a.tensors.push_back({name, *t});
  a.optimizer_step = c.adam.step;
  for (const auto& [name, t] : c.adam.m) a.optimizer.push_back({"adam.m." + name, t});
  for (const auto& [name, t] : c.adam.v) a.optimizer.push_back({"adam.v." + name, t});
  a.rng_state = c.rng_state;
  return a;
}

Checkpoint from_archive(const TensorArchive& a, const Architecture& arch) {
  using Code = ArchiveError::Code;
  Checkpoint c;
  c.epoch = a.epoch;
  c.params = network_skeleton<float>(arch);
  auto refs = c.params.all_tensors();
  if (refs.size() != a.tensors.size()) {
    throw ArchiveError(Code::manifest_mismatch,
                       "manifest mismatch: archive holds " + std::to_string(a.tensors.size()) +
                           " tensors, architecture expects " + std::to_string(refs.size()));
  }
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& [name, dst] = refs[i];
    const NamedTensor& src = a.tensors[i];
    if (src.name != name || src.tensor.shape() != dst->shape()) {
      throw ArchiveError(Code::manifest_mismatch,
                         "manifest mismatch at " + name + " " + shape_string(dst->shape()) +
                             ": archive has " + src.name + " " + shape_string(src.tensor.shape()));
    }
    *dst = src.tensor;
  }
  std::map<std::string, Shape> trainable;
  for (const auto& [name, t] : c.params.trainable()) trainable.emplace(name, t->shape());
  c.adam.step = a.optimizer_step;
  for (const auto& t : a.optimizer) {
    const bool is_m = t.name.starts_with("adam.m.");
    if (!is_m && !t.name.starts_with("adam.v.")) {
      throw ArchiveError(Code::manifest_mismatch, "unexpected optimizer tensor " + t.name);
    }
    const std::string param = t.name.substr(7);
    auto it = trainable.find(param);
    if (it == trainable.end() || it->second != t.tensor.shape()) {
      throw ArchiveError(Code::manifest_mismatch, "optimizer tensor " + t.name +
                                                      " does not match a trainable parameter");
    }
    (is_m ? c.adam.m : c.adam.v)[param] = t.tensor;
  }
  c.rng_state = a.rng_state;
  return c;
}

Architecture infer_architecture(const TensorArchive& a) {
  for (Architecture arch : {Architecture::full(), Architecture::mini()}) {
    for (std::size_t outputs : {kTraitCount, std::size_t{1}}) {
      arch.outputs = outputs;
      const auto manifest = parameter_manifest(arch);
      if (manifest.size() != a.tensors.size()) continue;
      bool match = true;
      for (std::size_t i = 0; i < manifest.size() && match; ++i) {
        match = manifest[i].name == a.tensors[i].name &&
                manifest[i].shape == a.tensors[i].tensor.shape();
      }
      if (match) return arch;
    }
  }
  throw ArchiveError(ArchiveError::Code::manifest_mismatch,
                     "manifest mismatch: archive matches no known architecture");
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  save_archive(to_archive(checkpoint), path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const Architecture& arch) {
  return from_archive(load_archive(path), arch);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorArchive a = load_archive(path);
  return from_archive(a, infer_architecture(a));
}

// --- training ------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("batch size must be >= 2");
  if (schedule.period < 1) throw std::invalid_argument("schedule period must be >= 1");
  if (trait && *trait >= kTraitCount) throw std::invalid_argument("trait index must be in [0, 5)");
}

std::string format_loss_log(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << "epoch,alpha,train_mae\n";
  os.precision(9);
  for (const auto& e : log) os << e.epoch << ',' << e.alpha << ',' << e.train_mae << '\n';
  return os.str();
}

Checkpoint initial_checkpoint(const Architecture& arch, std::uint64_t seed) {
  Checkpoint c;
  c.params = build_network(arch, seed);
  c.rng_state = rng_state(Rng(seed ^ 0x9e3779b97f4a7c15ULL));
  return c;
}

std::vector<Clip> load_split(const Manifest& manifest, Split split) {
  std::vector<Clip> clips;
  for (const auto& row : manifest.rows_for(split)) clips.push_back(load_labeled_clip(manifest, row));
  return clips;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

std::string checkpoint_name(std::uint32_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%05u.bin", epoch);
  return buf;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<Clip>& clips, Checkpoint start) {
  config.validate();
  const Architecture& arch = start.params.arch;
  if (arch.outputs != kTraitCount && !(arch.outputs == 1 && config.trait)) {
    throw std::invalid_argument("single-output heads need a target trait");
  }
  if (clips.size() < config.batch_size) {
    throw DataError("need at least " + std::to_string(config.batch_size) +
                    " training clips, have " + std::to_string(clips.size()));
  }
  for (const auto& c : clips) {
    if (!c.label()) throw DataError("training clip without label");
  }
  if (!config.out_dir.empty()) std::filesystem::create_directories(config.out_dir);

  TrainResult result{std::move(start), {}};
  Checkpoint& state = result.checkpoint;
  Rng rng = rng_from_state(state.rng_state);
  state.adam.hyper = config.adam;
  const std::size_t outputs = arch.outputs;

  std::vector<std::size_t> order(clips.size());
  for (std::uint32_t epoch = state.epoch; epoch < config.epochs; ++epoch) {
    const Checkpoint epoch_start = state;
    state.adam.hyper.alpha = config.schedule.alpha_for_epoch(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
      const std::size_t b = std::min(config.batch_size, order.size() - first);
      if (b < 2) break;
      Tensor audio({b, 1, arch.audio_crop});
      Tensor frames({b, 3, arch.frame_crop, arch.frame_crop});
      Tensor target({b, outputs});
      for (std::size_t i = 0; i < b; ++i) {
        const Clip& clip = clips[order[first + i]];
        const Tensor a = crop_audio(clip, rng, arch.audio_crop);
        const Tensor f = crop_frame(clip, rng, arch.frame_crop);
        std::copy(a.data().begin(), a.data().end(), audio.ptr() + i * a.size());
        std::copy(f.data().begin(), f.data().end(), frames.ptr() + i * f.size());
        const TraitVector& label = *clip.label();
        for (std::size_t k = 0; k < outputs; ++k) {
          target[i * outputs + k] = outputs == 1 ? label[*config.trait] : label[k];
        }
      }
      NetworkTape<float> tape;
      const Tensor pred = forward_train(audio, frames, state.params, tape);
      const LossResult<float> loss = mae_loss(pred, target);
      if (!std::isfinite(loss.loss)) {
        if (!config.out_dir.empty()) save_checkpoint(epoch_start, config.out_dir / "last_good.bin");
        throw NumericError("non-finite training loss in epoch " + std::to_string(epoch));
      }
      const GradientSet<float> grads = backward(tape, state.params, loss.grad);
      adam_step(state.params, grads, state.adam);
      loss_sum += loss.loss * static_cast<double>(b);
      seen += b;
    }

    state.epoch = epoch + 1;
    state.rng_state = rng_state(rng);
    result.log.push_back({epoch, state.adam.hyper.alpha, loss_sum / static_cast<double>(seen)});
    if (!config.out_dir.empty()) {
      write_text(config.out_dir / "loss.csv", format_loss_log(result.log));
      if (config.checkpoint_every && state.epoch % config.checkpoint_every == 0) {
        save_checkpoint(state, config.out_dir / checkpoint_name(state.epoch));
      }
    }
  }
  if (!config.out_dir.empty()) save_checkpoint(state, config.out_dir / "final.bin");
  return result;
}

TrainResult train(const TrainConfig& config, const Manifest& manifest,
                  std::optional<Checkpoint> resume) {
  const std::vector<Clip> clips = load_split(manifest, Split::train);
  Checkpoint start = resume ? std::move(*resume) : initial_checkpoint(config.architecture(), config.seed);
  return train(config, clips, std::move(start));
}

// --- fine-tuning -------------------------------------------------------------------------

Checkpoint per_trait_start(const Checkpoint& base, std::size_t trait, std::uint64_t seed) {
  if (trait >= kTraitCount) throw std::invalid_argument("trait index must be in [0, 5)");
  Checkpoint c;
  c.params = base.params;
  c.params.arch.outputs = 1;
  const std::size_t inputs = c.params.arch.fusion_inputs();
  c.params.fusion_w = Tensor({inputs, 1});
  c.params.fusion_b = Tensor({1});
  Rng rng(seed);
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(inputs)));
  for (auto& v : c.params.fusion_w.data()) v = dist(rng);
  c.params.version = 0;
  c.rng_state = rng_state(Rng(seed ^ 0x9e3779b97f4a7c15ULL));
  return c;
}

TrainResult finetune_per_trait(const Checkpoint& base, std::size_t trait, TrainConfig config,
                               const std::vector<Clip>& clips) {
  config.trait = trait;
  return train(config, clips, per_trait_start(base, trait, config.seed));
}

// --- evaluation ------------------------------------------------------------------------------

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

EvalReport make_report(const std::array<double, kTraitCount>& accuracy, std::size_t clips,
                       std::size_t excluded) {
  EvalReport r;
  r.accuracy = accuracy;
  double sum = 0.0;
  for (double a : accuracy) sum += a;
  r.average = sum / static_cast<double>(kTraitCount);
  r.clips = clips;
  r.excluded = excluded;
  return r;
}

EvalReport score_predictions(const std::vector<TraitVector>& predictions,
                             const std::vector<TraitVector>& targets) {
  if (predictions.size() != targets.size() || predictions.empty()) {
    throw std::invalid_argument("need matching, non-empty prediction and target lists");
  }
  std::array<double, kTraitCount> err{};
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    for (std::size_t k = 0; k < kTraitCount; ++k) {
      err[k] += std::abs(static_cast<double>(predictions[i][k]) - static_cast<double>(targets[i][k]));
    }
  }
  std::array<double, kTraitCount> acc{};
  for (std::size_t k = 0; k < kTraitCount; ++k) {
    acc[k] = 1.0 - err[k] / static_cast<double>(predictions.size());
  }
  return make_report(acc, predictions.size());
}

std::string format_report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "average";
  for (auto name : trait_names()) os << ',' << name;
  os << ",clips,excluded\n";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", r.average);
  os << buf;
  for (double a : r.accuracy) {
    std::snprintf(buf, sizeof buf, ",%.6f", a);
    os << buf;
  }
  os << ',' << r.clips << ',' << r.excluded << '\n';
  return os.str();
}

std::vector<ClipPrediction> predict_split(const NetworkParams<float>& params,
                                          const Manifest& manifest, Split split,
                                          const EvalOptions& options) {
  const auto rows = manifest.rows_for(split);
  if (rows.empty()) throw DataError("split " + std::string(split_name(split)) + " is empty");
  std::vector<ClipPrediction> out(rows.size());
  parallel_for(rows.size(), options.threads, [&](std::size_t i) {
    out[i].clip_id = rows[i].clip_id;
    out[i].target = rows[i].label;
    Clip clip;
    try {
      clip = load_clip(manifest.resolve(rows[i]));
    } catch (const DataError& e) {
      out[i].error = e.what();
      return;
    }
    out[i].output = predict_clip(clip, params, options.inference);
  });
  return out;
}

namespace {

TraitVector to_traits(const Tensor& t) {
  TraitVector v;
  for (std::size_t k = 0; k < kTraitCount; ++k) v[k] = t[k];
  return v;
}

}  // namespace

EvalReport evaluate(const NetworkParams<float>& params, const Manifest& manifest, Split split,
                    const EvalOptions& options) {
  if (params.arch.outputs != kTraitCount) throw std::invalid_argument("evaluate needs a five-output head");
  const auto preds = predict_split(params, manifest, split, options);
  std::vector<TraitVector> p, t;
  std::vector<std::string> failures;
  for (const auto& c : preds) {
    if (!c.output) {
      failures.push_back(c.clip_id + ": " + c.error);
      continue;
    }
    p.push_back(to_traits(*c.output));
    t.push_back(c.target);
  }
  if (p.empty()) throw DataError("no clip of the split could be evaluated");
  EvalReport r = score_predictions(p, t);
  r.excluded = failures.size();
  r.failures = std::move(failures);
  return r;
}

EvalReport evaluate(const NetworkParams<float>& params, const std::vector<Clip>& clips,
                    const EvalOptions& options) {
  if (params.arch.outputs != kTraitCount) throw std::invalid_argument("evaluate needs a five-output head");
  std::vector<TraitVector> p(clips.size()), t(clips.size());
  parallel_for(clips.size(), options.threads, [&](std::size_t i) {
    p[i] = forward_infer(clips[i], params, options.inference);
    t[i] = clips[i].label().value();
  });
  return score_predictions(p, t);
}

double trait_accuracy(const NetworkParams<float>& params, std::size_t trait,
                      const std::vector<Clip>& clips, const EvalOptions& options) {
  if (trait >= kTraitCount) throw std::invalid_argument("trait index must be in [0, 5)");
  if (clips.empty()) throw std::invalid_argument("no clips to score");
  std::vector<double> err(clips.size());
  parallel_for(clips.size(), options.threads, [&](std::size_t i) {
    const Tensor out = predict_clip(clips[i], params, options.inference);
    const float pred = params.arch.outputs == 1 ? out[0] : out[trait];
    err[i] = std::abs(static_cast<double>(pred) - static_cast<double>(clips[i].label().value()[trait]));
  });
  double sum = 0.0;
  for (double e : err) sum += e;
  return 1.0 - sum / static_cast<double>(clips.size());
}

EvalReport evaluate_per_trait(const std::array<const NetworkParams<float>*, kTraitCount>& nets,
                              const std::vector<Clip>& clips, const EvalOptions& options) {
  std::array<double, kTraitCount> acc{};
  for (std::size_t k = 0; k < kTraitCount; ++k) acc[k] = trait_accuracy(*nets[k], k, clips, options);
  return make_report(acc, clips.size());
}

}  // namespace deepimp
