#include "deepimp/model.hpp"

#include <cmath>
#include <stdexcept>

namespace deepimp {

Architecture Architecture::full() { return Architecture{}; }

Architecture Architecture::mini() {
  Architecture a;
  a.stem_channels = 4;
  a.stage_channels = {4, 8, 16, 32};
  a.blocks_per_stage = 1;
  a.audio_crop = 1024;
  a.frame_crop = 32;
  return a;
}

StreamGeometry StreamGeometry::of(StreamKind kind) {
  if (kind == StreamKind::audio) {
    return StreamGeometry{1, 1, 49, 4, 24, 9, 4, 4, 9, 4, 4};
  }
  return StreamGeometry{2, 3, 7, 2, 3, 3, 2, 1, 3, 1, 2};
}

namespace {

template <typename T>
StreamParams<T> make_stream(StreamKind kind, const Architecture& a) {
  const StreamGeometry g = StreamGeometry::of(kind);
  StreamParams<T> s;
  s.kind = kind;
  if (g.spatial_rank == 1) {
    s.stem = ConvSpec::conv1d(g.in_channels, a.stem_channels, g.stem_kernel, g.stem_stride,
                              g.stem_padding);
    s.pool = PoolSpec::pool1d(g.pool_kernel, g.pool_stride, g.pool_padding);
  } else {
    s.stem = ConvSpec::conv2d(g.in_channels, a.stem_channels, g.stem_kernel, g.stem_stride,
                              g.stem_padding);
    s.pool = PoolSpec::pool2d(g.pool_kernel, g.pool_stride, g.pool_padding);
  }
  s.stem_w = BasicTensor<T>(s.stem.weight_shape());
  s.stem_bn = BatchNormState<T>::fresh(a.stem_channels);
  std::size_t in = a.stem_channels;
  for (std::size_t stage = 0; stage < a.stage_channels.size(); ++stage) {
    for (std::size_t b = 0; b < a.blocks_per_stage; ++b) {
      const std::size_t stride = (stage > 0 && b == 0) ? g.stage_stride : 1;
      s.blocks.push_back(ResidualBlockParams<T>::make(g.spatial_rank, in, a.stage_channels[stage],
                                                      g.block_kernel, stride, g.block_padding));
      in = a.stage_channels[stage];
    }
  }
  return s;
}

std::string stream_prefix(StreamKind kind) { return kind == StreamKind::audio ? "audio" : "visual"; }

std::string block_prefix(StreamKind kind, const Architecture& a, std::size_t index) {
  return stream_prefix(kind) + ".stage" + std::to_string(index / a.blocks_per_stage + 1) +
         ".block" + std::to_string(index % a.blocks_per_stage);
}

// f(name, tensor&, trainable) over every tensor of `net`, const or not.
template <typename Net, typename F>
void visit_tensors(Net& net, F&& f) {
  auto bn = [&](const std::string& p, auto& s) {
    f(p + ".gamma", s.gamma, true);
    f(p + ".beta", s.beta, true);
    f(p + ".running_mean", s.running_mean, false);
    f(p + ".running_var", s.running_var, false);
  };
  auto stream = [&](auto& s) {
    const std::string p = stream_prefix(s.kind);
    f(p + ".stem.w", s.stem_w, true);
    bn(p + ".stem.bn", s.stem_bn);
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
      auto& blk = s.blocks[i];
      const std::string q = block_prefix(s.kind, net.arch, i);
      f(q + ".conv1.w", blk.conv1_w, true);
      bn(q + ".bn1", blk.bn1);
      f(q + ".conv2.w", blk.conv2_w, true);
      bn(q + ".bn2", blk.bn2);
      if (blk.kind == ShortcutKind::projection) {
        f(q + ".shortcut.w", blk.shortcut_w, true);
        bn(q + ".shortcut_bn", blk.shortcut_bn);
      }
    }
  };
  stream(net.audio);
  stream(net.visual);
  f(std::string("fusion.w"), net.fusion_w, true);
  f(std::string("fusion.b"), net.fusion_b, true);
}

template <typename T>
void check_tape(const NetworkTape<T>& tape, const NetworkParams<T>& params) {
  if (tape.owner != &params || tape.version != params.version) {
    throw std::invalid_argument("tape does not belong to the current parameter version");
  }
}

template <typename T>
BasicTensor<T> stream_train(StreamParams<T>& s, const BasicTensor<T>& x, StreamTape<T>& t) {
  t.input = x;
  t.stem_out = conv_forward(x, s.stem_w, s.stem);
  t.stem_act = relu(batchnorm_forward(t.stem_out, s.stem_bn, Mode::train));
  t.pool = maxpool(t.stem_act, s.pool);
  BasicTensor<T> h = t.pool.output;
  t.blocks.assign(s.blocks.size(), {});
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    h = residual_block_forward(h, s.blocks[i], Mode::train, &t.blocks[i]);
  }
  t.pre_gap_shape = h.shape();
  return global_average_pool(h);
}

template <typename T>
void stream_backward(const StreamTape<T>& t, const StreamParams<T>& s, const Architecture& arch,
                     const BasicTensor<T>& d_pooled, GradientSet<T>& grads) {
  BasicTensor<T> dh = global_average_pool_backward(t.pre_gap_shape, d_pooled);
  for (std::size_t i = s.blocks.size(); i-- > 0;) {
    auto g = residual_block_backward(t.blocks[i], s.blocks[i], dh);
    const std::string q = block_prefix(s.kind, arch, i);
    for (auto& [k, v] : g.params) grads.emplace(q + "." + k, std::move(v));
    dh = std::move(g.input);
  }
  BasicTensor<T> dact = maxpool_backward(t.pool, dh);
  BasicTensor<T> dbn = relu_backward(t.stem_act, dact);
  auto bng = batchnorm_backward(t.stem_out, s.stem_bn, dbn);
  auto cg = conv_backward(t.input, s.stem_w, s.stem, bng.input, false);
  const std::string p = stream_prefix(s.kind);
  grads.emplace(p + ".stem.w", std::move(cg.params.at("w")));
  grads.emplace(p + ".stem.bn.gamma", std::move(bng.params.at("gamma")));
  grads.emplace(p + ".stem.bn.beta", std::move(bng.params.at("beta")));
}

template <typename T, typename U>
BatchNormState<U> cast_bn(const BatchNormState<T>& s) {
  BatchNormState<U> out;
  out.gamma = s.gamma.template cast<U>();
  out.beta = s.beta.template cast<U>();
  out.running_mean = s.running_mean.template cast<U>();
  out.running_var = s.running_var.template cast<U>();
  out.momentum = s.momentum;
  out.epsilon = s.epsilon;
  return out;
}

template <typename T, typename U>
StreamParams<U> cast_stream(const StreamParams<T>& s) {
  StreamParams<U> out;
  out.kind = s.kind;
  out.stem = s.stem;
  out.stem_w = s.stem_w.template cast<U>();
  out.stem_bn = cast_bn<T, U>(s.stem_bn);
  out.pool = s.pool;
  for (const auto& b : s.blocks) {
    ResidualBlockParams<U> c;
    c.kind = b.kind;
    c.conv1 = b.conv1;
    c.conv2 = b.conv2;
    c.shortcut = b.shortcut;
    c.conv1_w = b.conv1_w.template cast<U>();
    c.conv2_w = b.conv2_w.template cast<U>();
    c.shortcut_w = b.shortcut_w.template cast<U>();
    c.bn1 = cast_bn<T, U>(b.bn1);
    c.bn2 = cast_bn<T, U>(b.bn2);
    c.shortcut_bn = cast_bn<T, U>(b.shortcut_bn);
    out.blocks.push_back(std::move(c));
  }
  return out;
}

}  // namespace

template <typename T>
ParamRefs<T> NetworkParams<T>::trainable() {
  ParamRefs<T> refs;
  visit_tensors(*this, [&](const std::string& name, BasicTensor<T>& t, bool train) {
    if (train) refs.emplace_back(name, &t);
  });
  return refs;
}

template <typename T>
ParamRefs<T> NetworkParams<T>::all_tensors() {
  ParamRefs<T> refs;
  visit_tensors(*this, [&](const std::string& name, BasicTensor<T>& t, bool) {
    refs.emplace_back(name, &t);
  });
  return refs;
}

template <typename T>
std::vector<std::pair<std::string, const BasicTensor<T>*>> NetworkParams<T>::all_tensors() const {
  std::vector<std::pair<std::string, const BasicTensor<T>*>> refs;
  visit_tensors(*this, [&](const std::string& name, const BasicTensor<T>& t, bool) {
    refs.emplace_back(name, &t);
  });
  return refs;
}

template <typename T>
template <typename U>
NetworkParams<U> NetworkParams<T>::cast() const {
  NetworkParams<U> out;
  out.arch = arch;
  out.audio = cast_stream<T, U>(audio);
  out.visual = cast_stream<T, U>(visual);
  out.fusion_w = fusion_w.template cast<U>();
  out.fusion_b = fusion_b.template cast<U>();
  out.version = version;
  return out;
}

template <typename T>
NetworkParams<T> network_skeleton(const Architecture& arch) {
  if (arch.stage_channels.empty() || arch.blocks_per_stage == 0 || arch.outputs == 0) {
    throw std::invalid_argument("architecture needs at least one stage, block and output");
  }
  NetworkParams<T> net;
  net.arch = arch;
  net.audio = make_stream<T>(StreamKind::audio, arch);
  net.visual = make_stream<T>(StreamKind::visual, arch);
  net.fusion_w = BasicTensor<T>({arch.fusion_inputs(), arch.outputs});
  net.fusion_b = BasicTensor<T>({arch.outputs});
  return net;
}

NetworkParams<float> build_network(const Architecture& arch, std::uint64_t seed) {
  NetworkParams<float> net = network_skeleton<float>(arch);
  Rng rng(seed);
  for (auto& [name, tensor] : net.trainable()) {
    if (!name.ends_with(".w")) continue;
    const Shape& s = tensor->shape();
    const std::size_t fan_in = name == "fusion.w" ? s[0] : shape_size(s) / s[0];
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    for (auto& v : tensor->data()) v = dist(rng);
  }
  return net;
}

std::vector<ManifestEntry> parameter_manifest(const Architecture& arch) {
  const auto net = network_skeleton<float>(arch);
  std::vector<ManifestEntry> out;
  visit_tensors(net, [&](const std::string& name, const Tensor& t, bool train) {
    out.push_back({name, t.shape(), train});
  });
  return out;
}

std::size_t trainable_parameter_count(const Architecture& arch) {
  std::size_t n = 0;
  for (const auto& e : parameter_manifest(arch)) {
    if (e.trainable) n += shape_size(e.shape);
  }
  return n;
}

// --- training path ---------------------------------------------------------------

template <typename T>
BasicTensor<T> forward_train(const BasicTensor<T>& audio, const BasicTensor<T>& frames,
                             NetworkParams<T>& params, NetworkTape<T>& tape) {
  const Architecture& a = params.arch;
  if (audio.rank() != 3 || audio.extent(1) != 1 || audio.extent(2) != a.audio_crop) {
    throw ShapeError("audio crop must be (B, 1, " + std::to_string(a.audio_crop) + "), got " +
                     shape_string(audio.shape()));
  }
  if (frames.rank() != 4 || frames.extent(1) != 3 || frames.extent(2) != a.frame_crop ||
      frames.extent(3) != a.frame_crop) {
    throw ShapeError("frame crop must be (B, 3, " + std::to_string(a.frame_crop) + ", " +
                     std::to_string(a.frame_crop) + "), got " + shape_string(frames.shape()));
  }
  if (audio.extent(0) != frames.extent(0) || audio.extent(0) < 2) {
    throw ShapeError("training batch must pair audio and frames with B >= 2: " +
                     shape_string(audio.shape()) + " vs " + shape_string(frames.shape()));
  }
  tape = NetworkTape<T>{};
  BasicTensor<T> a_pooled = stream_train(params.audio, audio, tape.audio);
  BasicTensor<T> v_pooled = stream_train(params.visual, frames, tape.visual);
  tape.fused = concat_columns(a_pooled, v_pooled);
  tape.logits = linear_forward(tape.fused, params.fusion_w, params.fusion_b);
  tape.owner = &params;
  tape.version = params.version;
  return scaled_tanh(tape.logits);
}

template <typename T>
GradientSet<T> backward(const NetworkTape<T>& tape, const NetworkParams<T>& params,
                        const BasicTensor<T>& grad_out) {
  check_tape(tape, params);
  if (grad_out.shape() != tape.logits.shape()) {
    throw ShapeError("grad_out " + shape_string(grad_out.shape()) + " does not match output " +
                     shape_string(tape.logits.shape()));
  }
  GradientSet<T> grads;
  BasicTensor<T> dlogits = scaled_tanh_backward(tape.logits, grad_out);
  auto lin = linear_backward(tape.fused, params.fusion_w, dlogits);
  grads.emplace("fusion.w", std::move(lin.params.at("w")));
  grads.emplace("fusion.b", std::move(lin.params.at("b")));

  const std::size_t batch = tape.fused.extent(0);
  const std::size_t ca = params.audio.blocks.back().conv2.out_channels;
  const std::size_t cv = params.visual.blocks.back().conv2.out_channels;
  BasicTensor<T> da({batch, ca});
  BasicTensor<T> dv({batch, cv});
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t j = 0; j < ca; ++j) da[n * ca + j] = lin.input[n * (ca + cv) + j];
    for (std::size_t j = 0; j < cv; ++j) dv[n * cv + j] = lin.input[n * (ca + cv) + ca + j];
  }
  stream_backward(tape.audio, params.audio, params.arch, da, grads);
  stream_backward(tape.visual, params.visual, params.arch, dv, grads);
  return grads;
}

// --- inference path ----------------------------------------------------------------

template <typename T>
BasicTensor<T> stream_forward(const StreamParams<T>& s, const BasicTensor<T>& x,
                              Shape* pre_gap_shape) {
  BasicTensor<T> h = relu(batchnorm_forward(conv_forward(x, s.stem_w, s.stem), s.stem_bn));
  h = maxpool(h, s.pool).output;
  for (const auto& block : s.blocks) h = residual_block_forward(h, block);
  if (pre_gap_shape) *pre_gap_shape = h.shape();
  return global_average_pool(h);
}

template <typename T>
BasicTensor<T> fusion_head(const BasicTensor<T>& features, const NetworkParams<T>& params) {
  return scaled_tanh(linear_forward(features, params.fusion_w, params.fusion_b));
}

template <typename T>
BasicTensor<T> forward_eval(const BasicTensor<T>& audio, const BasicTensor<T>& frames,
                            const NetworkParams<T>& params) {
  BasicTensor<T> fused =
      concat_columns(stream_forward(params.audio, audio), stream_forward(params.visual, frames));
  return fusion_head(fused, params);
}

Tensor audio_features(const Tensor& audio, const NetworkParams<float>& params) {
  const std::size_t n = audio.size();
  Tensor x({1, 1, std::max(n, kMinInferenceAudio)});
  const std::size_t offset = n < kMinInferenceAudio ? (kMinInferenceAudio - n) / 2 : 0;
  std::copy(audio.data().begin(), audio.data().end(), x.ptr() + offset);
  Tensor pooled = stream_forward(params.audio, x);
  return pooled.reshape({pooled.size()});
}

Tensor clip_features(const Clip& clip, const NetworkParams<float>& params,
                     const InferenceOptions& options) {
  if (clip.frame_count() == 0 || clip.sample_count() == 0) {
    throw DataError("cannot run inference on an empty clip");
  }
  const std::size_t stride = std::max<std::size_t>(1, options.frame_stride);
  const Tensor a = audio_features(clip.audio(), params);
  const std::size_t cv = params.arch.stream_features();
  std::vector<double> acc(cv, 0.0);
  std::size_t used = 0;
  for (std::size_t t = 0; t < clip.frame_count(); t += stride, ++used) {
    Tensor f = clip.frame(t);
    Tensor pooled = stream_forward(params.visual, f.reshape({1, 3, clip.height(), clip.width()}));
    for (std::size_t j = 0; j < cv; ++j) acc[j] += pooled[j];
  }
  Tensor out({a.size() + cv});
  std::copy(a.data().begin(), a.data().end(), out.ptr());
  for (std::size_t j = 0; j < cv; ++j) {
    out[a.size() + j] = static_cast<float>(acc[j] / static_cast<double>(used));
  }
  return out;
}

Tensor predict_clip(const Clip& clip, const NetworkParams<float>& params,
                    const InferenceOptions& options) {
  Tensor features = clip_features(clip, params, options);
  Tensor out = fusion_head(features.reshape({1, features.size()}), params);
  return out.reshape({out.size()});
}

TraitVector forward_infer(const Clip& clip, const NetworkParams<float>& params,
                          const InferenceOptions& options) {
  if (params.arch.outputs != kTraitCount) {
    throw std::invalid_argument("forward_infer needs a five-output head");
  }
  const Tensor out = predict_clip(clip, params, options);
  TraitVector v;
  for (std::size_t k = 0; k < kTraitCount; ++k) v[k] = out[k];
  return v;
}

#define DEEPIMP_INSTANTIATE(T)                                                                     \
  template struct NetworkParams<T>;                                                                \
  template NetworkParams<T> network_skeleton(const Architecture&);                                 \
  template BasicTensor<T> forward_train(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                        NetworkParams<T>&, NetworkTape<T>&);                       \
  template GradientSet<T> backward(const NetworkTape<T>&, const NetworkParams<T>&,                 \
                                   const BasicTensor<T>&);                                         \
  template BasicTensor<T> stream_forward(const StreamParams<T>&, const BasicTensor<T>&, Shape*);   \
  template BasicTensor<T> forward_eval(const BasicTensor<T>&, const BasicTensor<T>&,               \
                                       const NetworkParams<T>&);                                   \
  template BasicTensor<T> fusion_head(const BasicTensor<T>&, const NetworkParams<T>&);

DEEPIMP_INSTANTIATE(float)
DEEPIMP_INSTANTIATE(double)

#undef DEEPIMP_INSTANTIATE

template NetworkParams<double> NetworkParams<float>::cast<double>() const;
template NetworkParams<float> NetworkParams<double>::cast<float>() const;
template NetworkParams<float> NetworkParams<float>::cast<float>() const;

}  // namespace deepimp
