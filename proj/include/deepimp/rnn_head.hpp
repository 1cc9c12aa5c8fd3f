#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "deepimp/data.hpp"
#include "deepimp/layers.hpp"
#include "deepimp/model.hpp"
#include "deepimp/optim.hpp"

namespace deepimp {

// Two stacked LSTM layers, dropout on each layer's output in train mode, a
// linear layer and the scaled tanh, applied at every time step.
template <typename T>
struct RnnHeadParams {
  LstmParams<T> lstm1;
  LstmParams<T> lstm2;
  BasicTensor<T> out_w;  // (hidden, outputs)
  BasicTensor<T> out_b;  // (outputs)
  double dropout = 0.5;

  std::size_t input_size() const { return lstm1.input_size(); }
  std::size_t hidden_size() const { return lstm1.hidden_size(); }
  std::size_t outputs() const { return out_b.size(); }

  // lstm1.w, lstm1.b, lstm2.w, lstm2.b, out.w, out.b
  ParamRefs<T> trainable();
  std::vector<std::pair<std::string, const BasicTensor<T>*>> trainable() const;
  void validate() const;

  template <typename U>
  RnnHeadParams<U> cast() const;
};

constexpr std::size_t kRnnHidden = 512;

// Every tensor zero.
template <typename T>
RnnHeadParams<T> zero_rnn_head(std::size_t input, std::size_t hidden = kRnnHidden,
                               std::size_t outputs = kTraitCount, double dropout = 0.5);

// Uniform(-1/sqrt(H), 1/sqrt(H)) LSTM weights, forget-gate bias 1, He-normal
// output layer, zero output bias.
RnnHeadParams<float> build_rnn_head(std::size_t input, std::uint64_t seed,
                                    std::size_t hidden = kRnnHidden,
                                    std::size_t outputs = kTraitCount, double dropout = 0.5);

template <typename T>
struct RnnCarry {
  LstmState<T> layer1;
  LstmState<T> layer2;

  static RnnCarry zeros(std::size_t batch, std::size_t hidden);
};

// seq: (steps, input). Returns (steps, outputs). Train mode needs `rng`.
template <typename T>
BasicTensor<T> rnn_forward(const BasicTensor<T>& seq, const RnnHeadParams<T>& params, Mode mode,
                           Rng* rng = nullptr);

struct RnnGradientOptions {
  std::size_t truncation = 15;
  Mode mode = Mode::eval;
  // Loss = scale * sum over sequences and steps of the per-step MAE. Zero
  // means 1 / (sequences * steps).
  double loss_scale = 0.0;
};

template <typename T>
struct RnnGradients {
  double loss = 0.0;
  GradientSet<T> grads;
  RnnCarry<T> carry;  // state after the last step, detached
};

// Equal-length sequences (steps, input) with per-step targets (steps,
// outputs). Backpropagation runs within windows of `truncation` steps; the
// state entering a window is treated as a constant. `initial` defaults to
// zero state.
template <typename T>
RnnGradients<T> rnn_gradients(const std::vector<BasicTensor<T>>& seqs,
                              const std::vector<BasicTensor<T>>& targets,
                              const RnnHeadParams<T>& params, const RnnGradientOptions& options,
                              Rng* rng = nullptr, const RnnCarry<T>* initial = nullptr);

// --- features ----------------------------------------------------------------------

// One row per whole second: audio samples [16000 t, 16000 (t + 1)) and the
// frames whose timestamps fall in that second, through the frozen streams in
// eval mode. (seconds, fusion_inputs).
Tensor extract_features(const Clip& clip, const NetworkParams<float>& base);

struct FeatureSet {
  std::vector<std::string> clip_ids;
  std::vector<Tensor> features;
  std::vector<TraitVector> labels;
};

FeatureSet extract_feature_set(const Manifest& manifest, Split split,
                               const NetworkParams<float>& base, std::size_t threads = 1);
// Tensor archive with one `feat.<clip_id>` tensor per clip and a
// `label.<clip_id>` (5) tensor when labels are present.
void save_feature_cache(const FeatureSet& set, const std::filesystem::path& path);
FeatureSet load_feature_cache(const std::filesystem::path& path);

// --- training ----------------------------------------------------------------------

struct RnnTrainConfig {
  std::uint32_t epochs = 100;
  std::size_t batch_size = 4;
  std::size_t truncation = 15;
  AdamHyper adam;
  std::uint64_t seed = 0;
};

struct RnnTrainResult {
  RnnHeadParams<float> params;
  std::vector<double> epoch_loss;  // train-mode per-step MAE
};

// Sequences are batched in shuffled order; a batch with mixed lengths is
// split into equal-length groups whose gradients are summed. Non-finite loss
// throws NumericError.
RnnTrainResult train_rnn(const FeatureSet& data, RnnHeadParams<float> params,
                         const RnnTrainConfig& config);

// Eval-mode per-step MAE averaged over every step of every sequence.
double rnn_mae(const FeatureSet& data, const RnnHeadParams<float>& params);

// Mean of the per-step outputs.
TraitVector predict_rnn(const Tensor& features, const RnnHeadParams<float>& head);
TraitVector predict_rnn(const Clip& clip, const NetworkParams<float>& base,
                        const RnnHeadParams<float>& head);

void save_rnn_head(const RnnHeadParams<float>& head, const std::filesystem::path& path);
RnnHeadParams<float> load_rnn_head(const std::filesystem::path& path);

}  // namespace deepimp
