#include "deepimp/rnn_head.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "deepimp/archive.hpp"
#include "deepimp/train.hpp"

namespace deepimp {

template <typename T>
ParamRefs<T> RnnHeadParams<T>::trainable() {
  return {{"lstm1.w", &lstm1.w}, {"lstm1.b", &lstm1.b}, {"lstm2.w", &lstm2.w},
          {"lstm2.b", &lstm2.b}, {"out.w", &out_w},     {"out.b", &out_b}};
}

template <typename T>
std::vector<std::pair<std::string, const BasicTensor<T>*>> RnnHeadParams<T>::trainable() const {
  return {{"lstm1.w", &lstm1.w}, {"lstm1.b", &lstm1.b}, {"lstm2.w", &lstm2.w},
          {"lstm2.b", &lstm2.b}, {"out.w", &out_w},     {"out.b", &out_b}};
}

template <typename T>
void RnnHeadParams<T>::validate() const {
  const std::size_t h = lstm1.b.size() / 4;
  const bool ok = lstm1.b.rank() == 1 && lstm1.b.size() == 4 * h && h > 0 &&
                  lstm1.w.rank() == 2 && lstm1.w.extent(0) > h && lstm1.w.extent(1) == 4 * h &&
                  lstm2.w.shape() == Shape{2 * h, 4 * h} && lstm2.b.shape() == Shape{4 * h} &&
                  out_w.rank() == 2 && out_w.extent(0) == h && out_b.shape() == Shape{out_w.extent(1)};
  if (!ok) {
    throw ShapeError("inconsistent recurrent head shapes: lstm1.w " + shape_string(lstm1.w.shape()) +
                     ", lstm2.w " + shape_string(lstm2.w.shape()) + ", out.w " +
                     shape_string(out_w.shape()));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
}

template <typename T>
template <typename U>
RnnHeadParams<U> RnnHeadParams<T>::cast() const {
  RnnHeadParams<U> r;
  r.lstm1 = {lstm1.w.template cast<U>(), lstm1.b.template cast<U>()};
  r.lstm2 = {lstm2.w.template cast<U>(), lstm2.b.template cast<U>()};
  r.out_w = out_w.template cast<U>();
  r.out_b = out_b.template cast<U>();
  r.dropout = dropout;
  return r;
}

template <typename T>
RnnHeadParams<T> zero_rnn_head(std::size_t input, std::size_t hidden, std::size_t outputs,
                               double dropout) {
  RnnHeadParams<T> p;
  p.lstm1 = {BasicTensor<T>({input + hidden, 4 * hidden}), BasicTensor<T>({4 * hidden})};
  p.lstm2 = {BasicTensor<T>({2 * hidden, 4 * hidden}), BasicTensor<T>({4 * hidden})};
  p.out_w = BasicTensor<T>({hidden, outputs});
  p.out_b = BasicTensor<T>({outputs});
  p.dropout = dropout;
  p.validate();
  return p;
}

RnnHeadParams<float> build_rnn_head(std::size_t input, std::uint64_t seed, std::size_t hidden,
                                    std::size_t outputs, double dropout) {
  auto p = zero_rnn_head<float>(input, hidden, outputs, dropout);
  Rng rng(seed);
  const float bound = 1.0f / std::sqrt(static_cast<float>(hidden));
  std::uniform_real_distribution<float> uni(-bound, bound);
  for (auto* lstm : {&p.lstm1, &p.lstm2}) {
    for (auto& v : lstm->w.data()) v = uni(rng);
    for (std::size_t j = hidden; j < 2 * hidden; ++j) lstm->b[j] = 1.0f;
  }
  std::normal_distribution<float> he(0.0f, std::sqrt(2.0f / static_cast<float>(hidden)));
  for (auto& v : p.out_w.data()) v = he(rng);
  return p;
}

template <typename T>
RnnCarry<T> RnnCarry<T>::zeros(std::size_t batch, std::size_t hidden) {
  const Shape s{batch, hidden};
  return {{BasicTensor<T>(s), BasicTensor<T>(s)}, {BasicTensor<T>(s), BasicTensor<T>(s)}};
}

namespace {

// Inverted-dropout mask, or an empty (rank 0) tensor when nothing is dropped.
template <typename T>
BasicTensor<T> draw_mask(const Shape& shape, double rate, Mode mode, Rng* rng) {
  if (mode == Mode::eval || rate == 0.0) return {};
  if (!rng) throw std::invalid_argument("train-mode recurrent head needs a random generator");
  BasicTensor<T> m(shape);
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& v : m.data()) v = keep(*rng) ? scale : T(0);
  return m;
}

template <typename T>
BasicTensor<T> apply_mask(const BasicTensor<T>& x, const BasicTensor<T>& mask) {
  return mask.rank() == 0 ? x : mul(x, mask);
}

template <typename T>
void check_sequences(const std::vector<BasicTensor<T>>& seqs, std::size_t input) {
  if (seqs.empty()) throw std::invalid_argument("no sequences");
  const std::size_t steps = seqs.front().rank() == 2 ? seqs.front().extent(0) : 0;
  for (const auto& s : seqs) {
    if (s.rank() != 2 || s.extent(0) != steps || s.extent(1) != input) {
      throw ShapeError("sequence " + shape_string(s.shape()) + " does not match (" +
                       std::to_string(steps) + ", " + std::to_string(input) + ")");
    }
  }
}

template <typename T>
BasicTensor<T> step_input(const std::vector<BasicTensor<T>>& seqs, std::size_t t) {
  const std::size_t d = seqs.front().extent(1);
  BasicTensor<T> x({seqs.size(), d});
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    std::copy_n(seqs[b].ptr() + t * d, d, x.ptr() + b * d);
  }
  return x;
}

template <typename T>
void accumulate(GradientSet<T>& g, const std::string& name, const BasicTensor<T>& v) {
  auto it = g.find(name);
  if (it == g.end()) {
    g.emplace(name, v);
  } else {
    T* dst = it->second.ptr();
    for (std::size_t i = 0; i < v.size(); ++i) dst[i] += v[i];
  }
}

template <typename T>
struct StepCache {
  LstmStepCache<T> c1, c2;
  BasicTensor<T> mask1, mask2;
  BasicTensor<T> d2;  // dropped layer-2 output
  BasicTensor<T> z;   // pre-activation outputs
  BasicTensor<T> dy;  // dL/dy
};

}  // namespace

template <typename T>
BasicTensor<T> rnn_forward(const BasicTensor<T>& seq, const RnnHeadParams<T>& params, Mode mode,
                           Rng* rng) {
  params.validate();
  const std::vector<BasicTensor<T>> seqs{seq};
  check_sequences(seqs, params.input_size());
  const std::size_t steps = seq.extent(0), hidden = params.hidden_size(), k = params.outputs();
  if (steps == 0) throw ShapeError("empty feature sequence");
  BasicTensor<T> out({steps, k});
  RnnCarry<T> carry = RnnCarry<T>::zeros(1, hidden);
  for (std::size_t t = 0; t < steps; ++t) {
    carry.layer1 = lstm_step(step_input(seqs, t), carry.layer1, params.lstm1);
    const auto a1 = apply_mask(carry.layer1.h, draw_mask<T>({1, hidden}, params.dropout, mode, rng));
    carry.layer2 = lstm_step(a1, carry.layer2, params.lstm2);
    const auto d2 = apply_mask(carry.layer2.h, draw_mask<T>({1, hidden}, params.dropout, mode, rng));
    const auto y = scaled_tanh(linear_forward(d2, params.out_w, params.out_b));
    std::copy_n(y.ptr(), k, out.ptr() + t * k);
  }
  return out;
}

template <typename T>
RnnGradients<T> rnn_gradients(const std::vector<BasicTensor<T>>& seqs,
                              const std::vector<BasicTensor<T>>& targets,
                              const RnnHeadParams<T>& params, const RnnGradientOptions& options,
                              Rng* rng, const RnnCarry<T>* initial) {
  params.validate();
  check_sequences(seqs, params.input_size());
  const std::size_t batch = seqs.size(), steps = seqs.front().extent(0);
  const std::size_t hidden = params.hidden_size(), k = params.outputs();
  if (steps == 0) throw ShapeError("empty feature sequence");
  if (options.truncation < 1) throw std::invalid_argument("truncation must be >= 1");
  check_sequences(targets, k);
  if (targets.size() != batch || targets.front().extent(0) != steps) {
    throw ShapeError("one (steps, outputs) target per sequence required");
  }
  const double scale = options.loss_scale > 0.0
                           ? options.loss_scale
                           : 1.0 / static_cast<double>(batch * steps);
  const T dscale = static_cast<T>(scale / static_cast<double>(k));

  RnnGradients<T> result;
  result.carry = initial ? *initial : RnnCarry<T>::zeros(batch, hidden);
  const Shape state{batch, hidden};
  for (std::size_t w0 = 0; w0 < steps; w0 += options.truncation) {
    const std::size_t w1 = std::min(w0 + options.truncation, steps);
    std::vector<StepCache<T>> caches(w1 - w0);
    for (std::size_t t = w0; t < w1; ++t) {
      StepCache<T>& c = caches[t - w0];
      result.carry.layer1 = lstm_step(step_input(seqs, t), result.carry.layer1, params.lstm1, &c.c1);
      c.mask1 = draw_mask<T>(state, params.dropout, options.mode, rng);
      const auto a1 = apply_mask(result.carry.layer1.h, c.mask1);
      result.carry.layer2 = lstm_step(a1, result.carry.layer2, params.lstm2, &c.c2);
      c.mask2 = draw_mask<T>(state, params.dropout, options.mode, rng);
      c.d2 = apply_mask(result.carry.layer2.h, c.mask2);
      c.z = linear_forward(c.d2, params.out_w, params.out_b);
      const auto y = scaled_tanh(c.z);
      c.dy = BasicTensor<T>({batch, k});
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < k; ++j) {
          const T diff = y[b * k + j] - targets[b][t * k + j];
          result.loss += scale / static_cast<double>(k) * std::abs(static_cast<double>(diff));
          c.dy[b * k + j] = diff > T(0) ? dscale : (diff < T(0) ? -dscale : T(0));
        }
      }
    }
    BasicTensor<T> dh1(state), dc1(state), dh2(state), dc2(state);
    for (std::size_t i = caches.size(); i-- > 0;) {
      const StepCache<T>& c = caches[i];
      auto lin = linear_backward(c.d2, params.out_w, scaled_tanh_backward(c.z, c.dy));
      accumulate(result.grads, "out.w", lin.params.at("w"));
      accumulate(result.grads, "out.b", lin.params.at("b"));
      auto g2 = lstm_step_backward(c.c2, params.lstm2, add(apply_mask(lin.input, c.mask2), dh2), dc2);
      accumulate(result.grads, "lstm2.w", g2.w);
      accumulate(result.grads, "lstm2.b", g2.b);
      dh2 = std::move(g2.h_prev);
      dc2 = std::move(g2.c_prev);
      auto g1 = lstm_step_backward(c.c1, params.lstm1, add(apply_mask(g2.x, c.mask1), dh1), dc1);
      accumulate(result.grads, "lstm1.w", g1.w);
      accumulate(result.grads, "lstm1.b", g1.b);
      dh1 = std::move(g1.h_prev);
      dc1 = std::move(g1.c_prev);
    }
  }
  return result;
}

// --- features ------------------------------------------------------------------------

Tensor extract_features(const Clip& clip, const NetworkParams<float>& base) {
  const std::uint64_t samples = clip.sample_count(), frames = clip.frame_count();
  const std::uint64_t seconds = samples / kSampleRate;
  if (seconds < 1) {
    throw DataError("clip shorter than one second (" + std::to_string(samples) + " samples)");
  }
  // Frame i is shown at i * samples / (frames * rate) seconds.
  auto first_frame = [&](std::uint64_t t) {
    const std::uint64_t num = t * kSampleRate * frames;
    return std::min<std::uint64_t>(frames, (num + samples - 1) / samples);
  };
  const std::size_t width = base.arch.fusion_inputs();
  Tensor out({seconds, width});
  for (std::uint64_t t = 0; t < seconds; ++t) {
    const std::uint64_t fb = first_frame(t), fe = first_frame(t + 1);
    if (fb >= fe) throw DataError("second " + std::to_string(t) + " of the clip has no frames");
    const Clip window = clip.slice(t * kSampleRate, (t + 1) * kSampleRate, fb, fe);
    const Tensor row = clip_features(window, base);
    std::copy(row.data().begin(), row.data().end(), out.ptr() + t * width);
  }
  return out;
}

FeatureSet extract_feature_set(const Manifest& manifest, Split split,
                               const NetworkParams<float>& base, std::size_t threads) {
  const auto rows = manifest.rows_for(split);
  if (rows.empty()) throw DataError("split " + std::string(split_name(split)) + " is empty");
  FeatureSet set;
  set.clip_ids.resize(rows.size());
  set.features.resize(rows.size());
  set.labels.resize(rows.size());
  parallel_for(rows.size(), threads, [&](std::size_t i) {
    set.clip_ids[i] = rows[i].clip_id;
    set.labels[i] = rows[i].label;
    set.features[i] = extract_features(load_labeled_clip(manifest, rows[i]), base);
  });
  return set;
}

void save_feature_cache(const FeatureSet& set, const std::filesystem::path& path) {
  if (set.clip_ids.size() != set.features.size() ||
      (!set.labels.empty() && set.labels.size() != set.features.size())) {
    throw std::invalid_argument("feature set columns differ in length");
  }
  TensorArchive a;
  for (std::size_t i = 0; i < set.features.size(); ++i) {
    a.tensors.push_back({"feat." + set.clip_ids[i], set.features[i]});
    if (!set.labels.empty()) {
      const auto& v = set.labels[i].values;
      a.tensors.push_back({"label." + set.clip_ids[i], Tensor({kTraitCount}, {v.begin(), v.end()})});
    }
  }
  save_archive(a, path);
}

FeatureSet load_feature_cache(const std::filesystem::path& path) {
  const TensorArchive a = load_archive(path);
  FeatureSet set;
  std::map<std::string, TraitVector> labels;
  for (const auto& t : a.tensors) {
    if (t.name.starts_with("feat.")) {
      if (t.tensor.rank() != 2) throw DataError("feature tensor " + t.name + " is not a matrix");
      set.clip_ids.push_back(t.name.substr(5));
      set.features.push_back(t.tensor);
    } else if (t.name.starts_with("label.") && t.tensor.size() == kTraitCount) {
      TraitVector v;
      std::copy_n(t.tensor.ptr(), kTraitCount, v.values.begin());
      labels[t.name.substr(6)] = v;
    } else {
      throw DataError("unexpected tensor " + t.name + " in feature cache");
    }
  }
  if (!labels.empty()) {
    for (const auto& id : set.clip_ids) {
      auto it = labels.find(id);
      if (it == labels.end()) throw DataError("feature cache lacks a label for " + id);
      set.labels.push_back(it->second);
    }
  }
  return set;
}

// --- training ----------------------------------------------------------------------

namespace {

Tensor constant_targets(std::size_t steps, const TraitVector& label) {
  Tensor t({steps, kTraitCount});
  for (std::size_t s = 0; s < steps; ++s) std::copy_n(label.values.begin(), kTraitCount, t.ptr() + s * kTraitCount);
  return t;
}

void check_feature_set(const FeatureSet& data, const RnnHeadParams<float>& params) {
  if (data.features.empty()) throw DataError("no feature sequences");
  if (data.labels.size() != data.features.size()) throw DataError("feature sequences need labels");
  if (params.outputs() != kTraitCount) throw std::invalid_argument("recurrent head needs five outputs");
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    const Tensor& f = data.features[i];
    if (f.rank() != 2 || f.extent(1) != params.input_size()) {
      throw ShapeError("features of " + (i < data.clip_ids.size() ? data.clip_ids[i] : std::to_string(i)) +
                       " have shape " + shape_string(f.shape()) + ", head expects width " +
                       std::to_string(params.input_size()));
    }
  }
}

}  // namespace

RnnTrainResult train_rnn(const FeatureSet& data, RnnHeadParams<float> params,
                         const RnnTrainConfig& config) {
  params.validate();
  check_feature_set(data, params);
  if (config.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (config.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");

  RnnTrainResult result;
  AdamState<float> adam;
  adam.hyper = config.adam;
  Rng rng(config.seed);
  std::vector<std::size_t> order(data.features.size());
  for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t step_total = 0;
    for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
      const std::size_t last = std::min(first + config.batch_size, order.size());
      std::map<std::size_t, std::vector<std::size_t>> groups;
      std::size_t batch_steps = 0;
      for (std::size_t i = first; i < last; ++i) {
        const std::size_t steps = data.features[order[i]].extent(0);
        groups[steps].push_back(order[i]);
        batch_steps += steps;
      }
      GradientSet<float> grads;
      double batch_loss = 0.0;
      for (const auto& [steps, members] : groups) {
        std::vector<Tensor> seqs, targets;
        for (std::size_t m : members) {
          seqs.push_back(data.features[m]);
          targets.push_back(constant_targets(steps, data.labels[m]));
        }
        RnnGradientOptions opts;
        opts.truncation = config.truncation;
        opts.mode = Mode::train;
        opts.loss_scale = 1.0 / static_cast<double>(batch_steps);
        auto g = rnn_gradients(seqs, targets, params, opts, &rng);
        batch_loss += g.loss;
        for (const auto& [name, t] : g.grads) accumulate(grads, name, t);
      }
      if (!std::isfinite(batch_loss)) {
        throw NumericError("non-finite recurrent head loss in epoch " + std::to_string(epoch));
      }
      adam_step(params.trainable(), grads, adam);
      loss_sum += batch_loss * static_cast<double>(batch_steps);
      step_total += batch_steps;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(step_total));
  }
  result.params = std::move(params);
  return result;
}

double rnn_mae(const FeatureSet& data, const RnnHeadParams<float>& params) {
  check_feature_set(data, params);
  double err = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    const Tensor y = rnn_forward(data.features[i], params, Mode::eval);
    for (std::size_t s = 0; s < y.extent(0); ++s) {
      for (std::size_t k = 0; k < kTraitCount; ++k) {
        err += std::abs(static_cast<double>(y[s * kTraitCount + k]) - data.labels[i][k]);
      }
    }
    count += y.size();
  }
  return err / static_cast<double>(count);
}

TraitVector predict_rnn(const Tensor& features, const RnnHeadParams<float>& head) {
  if (head.outputs() != kTraitCount) throw std::invalid_argument("recurrent head needs five outputs");
  const Tensor y = rnn_forward(features, head, Mode::eval);
  const std::size_t steps = y.extent(0);
  TraitVector v;
  for (std::size_t k = 0; k < kTraitCount; ++k) {
    double sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) sum += y[s * kTraitCount + k];
    v[k] = static_cast<float>(sum / static_cast<double>(steps));
  }
  return v;
}

TraitVector predict_rnn(const Clip& clip, const NetworkParams<float>& base,
                        const RnnHeadParams<float>& head) {
  return predict_rnn(extract_features(clip, base), head);
}

void save_rnn_head(const RnnHeadParams<float>& head, const std::filesystem::path& path) {
  head.validate();
  TensorArchive a;
  for (const auto& [name, t] : head.trainable()) a.tensors.push_back({name, *t});
  a.tensors.push_back({"dropout", Tensor({}, {static_cast<float>(head.dropout)})});
  save_archive(a, path);
}

RnnHeadParams<float> load_rnn_head(const std::filesystem::path& path) {
  const TensorArchive a = load_archive(path);
  RnnHeadParams<float> head;
  for (const auto& [name, t] : head.trainable()) {
    const Tensor* src = a.find(name);
    if (!src) throw ArchiveError(ArchiveError::Code::manifest_mismatch, "recurrent head lacks " + name);
    *t = *src;
  }
  const Tensor* d = a.find("dropout");
  if (!d || d->size() != 1) throw ArchiveError(ArchiveError::Code::manifest_mismatch, "recurrent head lacks dropout");
  head.dropout = (*d)[0];
  if (a.tensors.size() != 7) throw ArchiveError(ArchiveError::Code::manifest_mismatch, "unexpected tensors in recurrent head");
  try {
    head.validate();
  } catch (const std::invalid_argument& e) {
    throw ArchiveError(ArchiveError::Code::manifest_mismatch, e.what());
  }
  return head;
}

#define DEEPIMP_INSTANTIATE(T)                                                                     \
  template struct RnnHeadParams<T>;                                                                \
  template struct RnnCarry<T>;                                                                     \
  template RnnHeadParams<T> zero_rnn_head(std::size_t, std::size_t, std::size_t, double);         \
  template BasicTensor<T> rnn_forward(const BasicTensor<T>&, const RnnHeadParams<T>&, Mode, Rng*); \
  template RnnGradients<T> rnn_gradients(const std::vector<BasicTensor<T>>&,                       \
                                         const std::vector<BasicTensor<T>>&,                       \
                                         const RnnHeadParams<T>&, const RnnGradientOptions&, Rng*, \
                                         const RnnCarry<T>*);

DEEPIMP_INSTANTIATE(float)
DEEPIMP_INSTANTIATE(double)

#undef DEEPIMP_INSTANTIATE

template RnnHeadParams<double> RnnHeadParams<float>::cast<double>() const;
template RnnHeadParams<float> RnnHeadParams<double>::cast<float>() const;

}  // namespace deepimp
