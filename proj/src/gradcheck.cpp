#include "deepimp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "deepimp/data.hpp"
#include "deepimp/layers.hpp"
#include "deepimp/model.hpp"
#include "deepimp/rnn_head.hpp"

namespace deepimp {

double relative_error(const TensorD& a, const TensorD& n) {
  if (a.shape() != n.shape()) {
    throw ShapeError("relative error of " + shape_string(a.shape()) + " and " + shape_string(n.shape()));
  }
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - n[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(n[i])});
  }
  return scale == 0.0 ? 0.0 : diff / scale;
}

double finite_difference_error(TensorD& param, const TensorD& analytic,
                               const std::function<double()>& loss, double h,
                               const std::vector<std::size_t>& indices) {
  if (param.shape() != analytic.shape()) {
    throw ShapeError("gradient " + shape_string(analytic.shape()) + " for parameter " +
                     shape_string(param.shape()));
  }
  std::vector<std::size_t> idx = indices;
  if (idx.empty()) {
    idx.resize(param.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }
  TensorD a({idx.size()}), n({idx.size()});
  for (std::size_t j = 0; j < idx.size(); ++j) {
    double& v = param[idx[j]];
    const double saved = v;
    v = saved + h;
    const double up = loss();
    v = saved - h;
    const double down = loss();
    v = saved;
    n[j] = (up - down) / (2.0 * h);
    a[j] = analytic[idx[j]];
  }
  return relative_error(a, n);
}

namespace {

TensorD random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  TensorD t(shape);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

double dot(const TensorD& a, const TensorD& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct Check {
  Rng& rng;
  double h;
  double worst = 0.0;

  void operator()(TensorD& param, const TensorD& analytic, const std::function<double()>& loss,
                  const std::vector<std::size_t>& indices = {}) {
    worst = std::max(worst, finite_difference_error(param, analytic, loss, h, indices));
  }
};

void randomize_bn(BatchNormState<double>& s, Rng& rng) {
  std::uniform_real_distribution<double> g(0.5, 1.5), b(-0.5, 0.5);
  for (auto& v : s.gamma.data()) v = g(rng);
  for (auto& v : s.beta.data()) v = b(rng);
}

double check_conv(const ConvSpec& spec, const Shape& input, Rng& rng, double h) {
  Check check{rng, h};
  TensorD x = random_tensor(input, rng);
  TensorD w = random_tensor(spec.weight_shape(), rng, 0.5);
  TensorD b = random_tensor({spec.out_channels}, rng);
  const TensorD r = random_tensor(spec.output_shape(input), rng);
  auto loss = [&] { return dot(conv_forward(x, w, b, spec), r); };
  const auto g = conv_backward(x, w, spec, r);
  check(x, g.input, loss);
  check(w, g.params.at("w"), loss);
  check(b, g.params.at("b"), loss);
  return check.worst;
}

double check_batchnorm(Rng& rng, double h) {
  Check check{rng, h};
  TensorD x = random_tensor({3, 4, 5}, rng);
  auto state = BatchNormState<double>::fresh(4);
  randomize_bn(state, rng);
  const TensorD r = random_tensor(x.shape(), rng);
  auto loss = [&] {
    auto s = state;
    return dot(batchnorm_forward(x, s, Mode::train), r);
  };
  const auto g = batchnorm_backward(x, state, r);
  check(x, g.input, loss);
  check(state.gamma, g.params.at("gamma"), loss);
  check(state.beta, g.params.at("beta"), loss);
  return check.worst;
}

double check_maxpool(Rng& rng, double h) {
  Check check{rng, h};
  const auto spec = PoolSpec::pool2d(3, 2, 1);
  TensorD x = random_tensor({2, 3, 9, 8}, rng);
  const TensorD r = random_tensor(spec.output_shape(x.shape()), rng);
  auto loss = [&] { return dot(maxpool(x, spec).output, r); };
  check(x, maxpool_backward(maxpool(x, spec), r), loss);
  const auto spec1 = PoolSpec::pool1d(9, 4, 4);
  TensorD x1 = random_tensor({2, 2, 37}, rng);
  const TensorD r1 = random_tensor(spec1.output_shape(x1.shape()), rng);
  auto loss1 = [&] { return dot(maxpool(x1, spec1).output, r1); };
  check(x1, maxpool_backward(maxpool(x1, spec1), r1), loss1);
  return check.worst;
}

double check_gap(Rng& rng, double h) {
  Check check{rng, h};
  TensorD x = random_tensor({2, 3, 4, 5}, rng);
  const TensorD r = random_tensor({2, 3}, rng);
  auto loss = [&] { return dot(global_average_pool(x), r); };
  check(x, global_average_pool_backward(x.shape(), r), loss);
  return check.worst;
}

double check_linear(Rng& rng, double h) {
  Check check{rng, h};
  TensorD x = random_tensor({3, 4}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({5}, rng);
  const TensorD r = random_tensor({3, 5}, rng);
  auto loss = [&] { return dot(linear_forward(x, w, b), r); };
  const auto g = linear_backward(x, w, r);
  check(x, g.input, loss);
  check(w, g.params.at("w"), loss);
  check(b, g.params.at("b"), loss);
  return check.worst;
}

double check_activation(bool tanh_kind, Rng& rng, double h) {
  Check check{rng, h};
  TensorD z = random_tensor({3, 4}, rng);
  const TensorD r = random_tensor({3, 4}, rng);
  if (tanh_kind) {
    auto loss = [&] { return dot(scaled_tanh(z), r); };
    check(z, scaled_tanh_backward(z, r), loss);
  } else {
    auto loss = [&] { return dot(relu(z), r); };
    check(z, relu_backward(z, r), loss);
  }
  return check.worst;
}

double check_residual(std::size_t rank, std::size_t in, std::size_t out, std::size_t stride,
                      Rng& rng, double h) {
  Check check{rng, h};
  auto p = ResidualBlockParams<double>::make(rank, in, out, 3, stride, 1);
  p.conv1_w = random_tensor(p.conv1.weight_shape(), rng, 0.5);
  p.conv2_w = random_tensor(p.conv2.weight_shape(), rng, 0.5);
  randomize_bn(p.bn1, rng);
  randomize_bn(p.bn2, rng);
  if (p.kind == ShortcutKind::projection) {
    p.shortcut_w = random_tensor(p.shortcut.weight_shape(), rng, 0.5);
    randomize_bn(p.shortcut_bn, rng);
  }
  const Shape input = rank == 1 ? Shape{2, in, 8} : Shape{2, in, 6, 5};
  TensorD x = random_tensor(input, rng);
  ResidualBlockTape<double> tape;
  auto copy = p;
  const TensorD y = residual_block_forward(x, copy, Mode::train, &tape);
  const TensorD r = random_tensor(y.shape(), rng);
  auto loss = [&] {
    auto q = p;
    return dot(residual_block_forward(x, q, Mode::train), r);
  };
  const auto g = residual_block_backward(tape, p, r);
  check(x, g.input, loss);
  check(p.conv1_w, g.params.at("conv1.w"), loss);
  check(p.bn1.gamma, g.params.at("bn1.gamma"), loss);
  check(p.bn1.beta, g.params.at("bn1.beta"), loss);
  check(p.conv2_w, g.params.at("conv2.w"), loss);
  check(p.bn2.gamma, g.params.at("bn2.gamma"), loss);
  check(p.bn2.beta, g.params.at("bn2.beta"), loss);
  if (p.kind == ShortcutKind::projection) {
    check(p.shortcut_w, g.params.at("shortcut.w"), loss);
    check(p.shortcut_bn.gamma, g.params.at("shortcut_bn.gamma"), loss);
    check(p.shortcut_bn.beta, g.params.at("shortcut_bn.beta"), loss);
  }
  return check.worst;
}

double check_lstm(Rng& rng, double h) {
  Check check{rng, h};
  LstmParams<double> p{random_tensor({7, 16}, rng, 0.5), random_tensor({16}, rng, 0.5)};
  TensorD x = random_tensor({2, 3}, rng);
  LstmState<double> prev{random_tensor({2, 4}, rng), random_tensor({2, 4}, rng)};
  const TensorD rh = random_tensor({2, 4}, rng), rc = random_tensor({2, 4}, rng);
  auto loss = [&] {
    const auto s = lstm_step(x, prev, p);
    return dot(s.h, rh) + dot(s.c, rc);
  };
  LstmStepCache<double> cache;
  lstm_step(x, prev, p, &cache);
  const auto g = lstm_step_backward(cache, p, rh, rc);
  check(x, g.x, loss);
  check(prev.h, g.h_prev, loss);
  check(prev.c, g.c_prev, loss);
  check(p.w, g.w, loss);
  check(p.b, g.b, loss);
  return check.worst;
}

double check_rnn_head(Rng& rng, double h) {
  Check check{rng, h};
  auto p = zero_rnn_head<double>(3, 4, 5, 0.0);
  for (auto& [name, t] : p.trainable()) *t = random_tensor(t->shape(), rng, 0.5);
  std::vector<TensorD> seqs{random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<TensorD> targets(2, TensorD({4, 5}));
  for (auto& t : targets)
    for (auto& v : t.data()) v = u(rng);
  RnnGradientOptions opts;
  auto loss = [&] { return rnn_gradients(seqs, targets, p, opts).loss; };
  const auto g = rnn_gradients(seqs, targets, p, opts);
  for (auto& [name, t] : p.trainable()) check(*t, g.grads.at(name), loss);
  return check.worst;
}

double check_network(const GradcheckOptions& o, Rng& rng) {
  Check check{rng, o.step};
  Architecture arch = Architecture::mini();
  arch.frame_crop = 16;
  NetworkParams<double> p = build_network(arch, o.seed).cast<double>();
  for (auto& [name, t] : p.trainable()) {
    if (name.ends_with("gamma") || name.ends_with("beta")) *t = random_tensor(t->shape(), rng, 0.2);
    if (name.ends_with("gamma"))
      for (auto& v : t->data()) v += 1.0;
  }
  p.fusion_b = random_tensor(p.fusion_b.shape(), rng, 0.1);
  const TensorD audio = random_tensor({4, 1, arch.audio_crop}, rng);
  const TensorD frames = random_tensor({4, 3, arch.frame_crop, arch.frame_crop}, rng);
  const TensorD r = random_tensor({4, arch.outputs}, rng);
  auto loss = [&] {
    auto q = p;
    NetworkTape<double> tape;
    return dot(forward_train(audio, frames, q, tape), r);
  };
  auto q = p;
  NetworkTape<double> tape;
  forward_train(audio, frames, q, tape);
  const auto grads = backward(tape, q, r);
  for (auto& [name, t] : p.trainable()) {
    std::vector<std::size_t> idx;
    if (o.network_samples && t->size() > o.network_samples) {
      std::uniform_int_distribution<std::size_t> pick(0, t->size() - 1);
      while (idx.size() < o.network_samples) {
        const std::size_t i = pick(rng);
        if (std::find(idx.begin(), idx.end(), i) == idx.end()) idx.push_back(i);
      }
    }
    check(*t, grads.at(name), loss, idx);
  }
  return check.worst;
}

}  // namespace

std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& o) {
  Rng rng(o.seed);
  const double h = o.step, th = o.layer_threshold;
  std::vector<GradcheckRow> rows;
  rows.push_back({"conv1d", check_conv(ConvSpec::conv1d(3, 4, 5, 2, 2), {2, 3, 11}, rng, h), th});
  rows.push_back({"conv2d", check_conv(ConvSpec::conv2d(2, 3, 3, 2, 1), {2, 2, 7, 6}, rng, h), th});
  rows.push_back({"batchnorm", check_batchnorm(rng, h), th});
  rows.push_back({"maxpool", check_maxpool(rng, h), th});
  rows.push_back({"global_average_pool", check_gap(rng, h), th});
  rows.push_back({"linear", check_linear(rng, h), th});
  rows.push_back({"relu", check_activation(false, rng, h), th});
  rows.push_back({"scaled_tanh", check_activation(true, rng, h), th});
  rows.push_back({"residual_identity_1d", check_residual(1, 3, 3, 1, rng, h), th});
  rows.push_back({"residual_projection_1d", check_residual(1, 2, 4, 2, rng, h), th});
  rows.push_back({"residual_identity_2d", check_residual(2, 3, 3, 1, rng, h), th});
  rows.push_back({"residual_projection_2d", check_residual(2, 2, 4, 2, rng, h), th});
  rows.push_back({"lstm", check_lstm(rng, h), th});
  rows.push_back({"rnn_head", check_rnn_head(rng, h), th});
  if (o.include_network) rows.push_back({"network_mini", check_network(o, rng), o.network_threshold});
  return rows;
}

std::string format_gradcheck(const std::vector<GradcheckRow>& rows) {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-24s %14s %10s  %s\n", "layer", "max_rel_error", "threshold", "result");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-24s %14.3e %10.1e  %s\n", r.layer.c_str(), r.max_relative_error,
                  r.threshold, r.pass() ? "PASS" : "FAIL");
    os << buf;
  }
  return os.str();
}

}  // namespace deepimp
