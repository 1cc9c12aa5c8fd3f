#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "deepimp/data.hpp"
#include "deepimp/layers.hpp"

namespace deepimp {

// Channel plan and input geometry. `full()` is the reference network: the
// first 17 layers of an 18-layer residual network with halved kernel counts,
// once for audio (1D) and once for frames (2D). `mini()` keeps every code
// path at desk scale.
struct Architecture {
  std::size_t stem_channels = 32;
  std::vector<std::size_t> stage_channels{32, 64, 128, 256};
  std::size_t blocks_per_stage = 2;
  std::size_t audio_crop = 50176;
  std::size_t frame_crop = 224;
  std::size_t outputs = kTraitCount;

  static Architecture full();
  // Channels / 8, one block per stage, 1024-sample audio, 32 x 32 frames.
  static Architecture mini();

  std::size_t stream_features() const { return stage_channels.back(); }
  std::size_t fusion_inputs() const { return 2 * stream_features(); }
  bool operator==(const Architecture&) const = default;
};

enum class StreamKind { audio, visual };

// Per-stream kernel/stride/padding table. The auditory stream uses the
// squared 1D counterpart of every visual 2D kernel and stride.
struct StreamGeometry {
  std::size_t spatial_rank;
  std::size_t in_channels;
  std::size_t stem_kernel, stem_stride, stem_padding;
  std::size_t pool_kernel, pool_stride, pool_padding;
  std::size_t block_kernel, block_padding;
  std::size_t stage_stride;

  static StreamGeometry of(StreamKind kind);
};

// Shortest audio accepted by the auditory stream at inference; shorter audio
// is zero-padded symmetrically to this length.
constexpr std::size_t kMinInferenceAudio = 1024;

template <typename T>
struct StreamParams {
  StreamKind kind = StreamKind::audio;
  ConvSpec stem;
  BasicTensor<T> stem_w;
  BatchNormState<T> stem_bn;
  PoolSpec pool;
  std::vector<ResidualBlockParams<T>> blocks;
};

template <typename T>
using GradientSet = std::map<std::string, BasicTensor<T>>;

template <typename T>
using ParamRefs = std::vector<std::pair<std::string, BasicTensor<T>*>>;

template <typename T>
struct NetworkParams {
  Architecture arch;
  StreamParams<T> audio;
  StreamParams<T> visual;
  BasicTensor<T> fusion_w;  // (fusion_inputs, outputs)
  BasicTensor<T> fusion_b;  // (outputs)
  // Bumped on every parameter update; tapes from older versions are stale.
  std::uint64_t version = 0;

  ParamRefs<T> trainable();
  // Every tensor including batch-norm running statistics, in a fixed order.
  ParamRefs<T> all_tensors();
  std::vector<std::pair<std::string, const BasicTensor<T>*>> all_tensors() const;

  template <typename U>
  NetworkParams<U> cast() const;
};

// Network with the given architecture, all tensors zero/identity; weights are
// not drawn.
template <typename T>
NetworkParams<T> network_skeleton(const Architecture& arch);

// He-normal conv/linear weights N(0, sqrt(2 / fan_in)), zero biases, BN gamma
// 1 / beta 0, running mean 0 / variance 1. Deterministic in `seed`.
NetworkParams<float> build_network(const Architecture& arch, std::uint64_t seed);

// Names and shapes of every tensor, trainable flag included.
struct ManifestEntry {
  std::string name;
  Shape shape;
  bool trainable;
  bool operator==(const ManifestEntry&) const = default;
};
std::vector<ManifestEntry> parameter_manifest(const Architecture& arch);
std::size_t trainable_parameter_count(const Architecture& arch);

// --- training path -------------------------------------------------------------

template <typename T>
struct StreamTape {
  BasicTensor<T> input;
  BasicTensor<T> stem_out;
  BasicTensor<T> stem_act;
  MaxPoolResult<T> pool;
  std::vector<ResidualBlockTape<T>> blocks;
  Shape pre_gap_shape;
};

template <typename T>
struct NetworkTape {
  const NetworkParams<T>* owner = nullptr;
  std::uint64_t version = 0;
  StreamTape<T> audio;
  StreamTape<T> visual;
  BasicTensor<T> fused;   // (B, fusion_inputs)
  BasicTensor<T> logits;  // (B, outputs), before scaled tanh
};

// audio: (B, 1, audio_crop), frames: (B, 3, frame_crop, frame_crop), B >= 2.
// Batch norm runs in train mode and updates running statistics. Returns the
// (B, outputs) predictions in (0, 1).
template <typename T>
BasicTensor<T> forward_train(const BasicTensor<T>& audio, const BasicTensor<T>& frames,
                             NetworkParams<T>& params, NetworkTape<T>& tape);

// Gradient for every trainable tensor given dL/dprediction.
template <typename T>
GradientSet<T> backward(const NetworkTape<T>& tape, const NetworkParams<T>& params,
                        const BasicTensor<T>& grad_out);

// --- inference path --------------------------------------------------------------

// Eval-mode stream up to (and including) global average pooling: (B, C).
template <typename T>
BasicTensor<T> stream_forward(const StreamParams<T>& stream, const BasicTensor<T>& x,
                              Shape* pre_gap_shape = nullptr);

// Eval-mode network on arbitrary-size batches: (B, outputs).
template <typename T>
BasicTensor<T> forward_eval(const BasicTensor<T>& audio, const BasicTensor<T>& frames,
                            const NetworkParams<T>& params);

// Fusion head on pooled features (B, fusion_inputs) -> (B, outputs).
template <typename T>
BasicTensor<T> fusion_head(const BasicTensor<T>& features, const NetworkParams<T>& params);

struct InferenceOptions {
  std::size_t frame_stride = 1;  // every n-th frame
};

// Whole audio through the auditory stream (pooled over its full extent) and
// every frame at native resolution through the visual stream, per-frame
// pooled vectors averaged over frames. Returns (fusion_inputs).
Tensor clip_features(const Clip& clip, const NetworkParams<float>& params,
                     const InferenceOptions& options = {});
Tensor audio_features(const Tensor& audio, const NetworkParams<float>& params);

// Raw head output (outputs) for a clip.
Tensor predict_clip(const Clip& clip, const NetworkParams<float>& params,
                    const InferenceOptions& options = {});
// Five-trait prediction; requires a five-output head.
TraitVector forward_infer(const Clip& clip, const NetworkParams<float>& params,
                          const InferenceOptions& options = {});

}  // namespace deepimp
