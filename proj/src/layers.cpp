#include "deepimp/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace deepimp {

std::size_t window_output_extent(std::size_t length, std::size_t kernel, std::size_t stride,
                                 std::size_t padding) {
  if (kernel == 0 || stride == 0) throw ShapeError("kernel and stride must be positive");
  if (length + 2 * padding < kernel) {
    throw ShapeError("padded extent " + std::to_string(length + 2 * padding) +
                     " is smaller than kernel " + std::to_string(kernel));
  }
  return (length + 2 * padding - kernel) / stride + 1;
}

// --- specs -------------------------------------------------------------------

ConvSpec ConvSpec::conv1d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  return ConvSpec{{kernel}, {stride}, {padding}, in, out};
}

ConvSpec ConvSpec::conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  return ConvSpec{{kernel, kernel}, {stride, stride}, {padding, padding}, in, out};
}

ConvSpec ConvSpec::conv2d(std::size_t in, std::size_t out, std::vector<std::size_t> kernel,
                          std::vector<std::size_t> stride, std::vector<std::size_t> padding) {
  ConvSpec spec{std::move(kernel), std::move(stride), std::move(padding), in, out};
  spec.validate();
  return spec;
}

void ConvSpec::validate() const {
  const std::size_t r = kernel.size();
  if ((r != 1 && r != 2) || stride.size() != r || padding.size() != r) {
    throw ShapeError("conv spec needs 1 or 2 spatial axes with matching kernel/stride/padding");
  }
  if (in_channels == 0 || out_channels == 0) throw ShapeError("conv channels must be positive");
  for (std::size_t i = 0; i < r; ++i) {
    if (kernel[i] == 0 || stride[i] == 0) throw ShapeError("kernel and stride must be positive");
  }
}

std::size_t ConvSpec::fan_in() const {
  std::size_t n = in_channels;
  for (auto k : kernel) n *= k;
  return n;
}

Shape ConvSpec::weight_shape() const {
  Shape s{out_channels, in_channels};
  s.insert(s.end(), kernel.begin(), kernel.end());
  return s;
}

Shape ConvSpec::output_shape(const Shape& input) const {
  validate();
  if (input.size() != 2 + spatial_rank()) {
    throw ShapeError("conv input " + shape_string(input) + " does not match a " +
                     std::to_string(spatial_rank()) + "D spec");
  }
  if (input[1] != in_channels) {
    throw ShapeError("conv input " + shape_string(input) + " has " + std::to_string(input[1]) +
                     " channels, spec expects " + std::to_string(in_channels));
  }
  Shape out{input[0], out_channels};
  for (std::size_t i = 0; i < spatial_rank(); ++i) {
    out.push_back(window_output_extent(input[2 + i], kernel[i], stride[i], padding[i]));
  }
  return out;
}

PoolSpec PoolSpec::pool1d(std::size_t kernel, std::size_t stride, std::size_t padding) {
  return PoolSpec{{kernel}, {stride}, {padding}};
}

PoolSpec PoolSpec::pool2d(std::size_t kernel, std::size_t stride, std::size_t padding) {
  return PoolSpec{{kernel, kernel}, {stride, stride}, {padding, padding}};
}

Shape PoolSpec::output_shape(const Shape& input) const {
  const std::size_t r = kernel.size();
  if ((r != 1 && r != 2) || stride.size() != r || padding.size() != r) {
    throw ShapeError("pool spec needs 1 or 2 spatial axes");
  }
  if (input.size() != 2 + r) {
    throw ShapeError("pool input " + shape_string(input) + " does not match a " +
                     std::to_string(r) + "D spec");
  }
  Shape out{input[0], input[1]};
  for (std::size_t i = 0; i < r; ++i) {
    if (padding[i] >= kernel[i]) throw ShapeError("pool padding must be smaller than kernel");
    out.push_back(window_output_extent(input[2 + i], kernel[i], stride[i], padding[i]));
  }
  return out;
}

template <typename T>
BatchNormState<T> BatchNormState<T>::fresh(std::size_t channels) {
  BatchNormState s;
  s.gamma = BasicTensor<T>({channels}, T(1));
  s.beta = BasicTensor<T>({channels}, T(0));
  s.running_mean = BasicTensor<T>({channels}, T(0));
  s.running_var = BasicTensor<T>({channels}, T(1));
  return s;
}

namespace {

// Every window op is evaluated on a 2D grid; a 1D axis becomes width with
// height 1.
struct Grid {
  std::size_t batch, channels;
  std::size_t ih, iw, kh, kw, sh, sw, ph, pw, oh, ow;
};

Grid make_grid(const Shape& in, const Shape& out, const std::vector<std::size_t>& kernel,
               const std::vector<std::size_t>& stride, const std::vector<std::size_t>& padding) {
  Grid g{};
  g.batch = in[0];
  g.channels = in[1];
  if (kernel.size() == 1) {
    g.ih = 1, g.iw = in[2], g.kh = 1, g.kw = kernel[0];
    g.sh = 1, g.sw = stride[0], g.ph = 0, g.pw = padding[0];
    g.oh = 1, g.ow = out[2];
  } else {
    g.ih = in[2], g.iw = in[3], g.kh = kernel[0], g.kw = kernel[1];
    g.sh = stride[0], g.sw = stride[1], g.ph = padding[0], g.pw = padding[1];
    g.oh = out[2], g.ow = out[3];
  }
  return g;
}

// cols: (C * kh * kw) x (oh * ow) for one batch element.
template <typename T>
void im2col(const T* x, const Grid& g, T* cols) {
  const std::size_t positions = g.oh * g.ow;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((c * g.kh + ky) * g.kw + kx) * positions;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.sh + ky) - static_cast<long>(g.ph);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.ih)) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = x + (c * g.ih + static_cast<std::size_t>(iy)) * g.iw;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.sw + kx) - static_cast<long>(g.pw);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.iw)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const Grid& g, T* dx) {
  const std::size_t positions = g.oh * g.ow;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * positions;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.sh + ky) - static_cast<long>(g.ph);
          if (iy < 0 || iy >= static_cast<long>(g.ih)) continue;
          T* dst = dx + (c * g.ih + static_cast<std::size_t>(iy)) * g.iw;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.sw + kx) - static_cast<long>(g.pw);
            if (ix >= 0 && ix < static_cast<long>(g.iw)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": expected " + shape_string(a) + ", got " +
                     shape_string(b));
  }
}

template <typename T>
void check_conv_weights(const BasicTensor<T>& w, const ConvSpec& spec) {
  require_same_shape(spec.weight_shape(), w.shape(), "conv weight shape");
}

template <typename T>
BasicTensor<T> conv_impl(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>* b,
                         const ConvSpec& spec) {
  const Shape out_shape = spec.output_shape(x.shape());
  check_conv_weights(w, spec);
  if (b && b->shape() != Shape{spec.out_channels}) {
    throw ShapeError("conv bias shape " + shape_string(b->shape()) + " does not match " +
                     std::to_string(spec.out_channels) + " output channels");
  }
  Grid g = make_grid(x.shape(), out_shape, spec.kernel, spec.stride, spec.padding);
  const std::size_t k = spec.fan_in();
  const std::size_t positions = g.oh * g.ow;
  const std::size_t in_stride = g.channels * g.ih * g.iw;
  const std::size_t out_stride = spec.out_channels * positions;

  BasicTensor<T> out(out_shape);
  std::vector<T> cols(k * positions);
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(x.ptr() + n * in_stride, g, cols.data());
    T* dst = out.ptr() + n * out_stride;
    gemm(false, false, spec.out_channels, positions, k, w.ptr(), cols.data(), dst, false);
    if (b) {
      for (std::size_t o = 0; o < spec.out_channels; ++o) {
        const T bias = (*b)[o];
        for (std::size_t p = 0; p < positions; ++p) dst[o * positions + p] += bias;
      }
    }
  }
  return out;
}

std::size_t trailing_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

template <typename T>
void check_bn(const BasicTensor<T>& x, const BatchNormState<T>& state) {
  if (x.rank() < 2) throw ShapeError("batchnorm input needs (batch, channels, ...), got " +
                                     shape_string(x.shape()));
  if (x.extent(1) != state.channels() || state.beta.size() != state.channels() ||
      state.running_mean.size() != state.channels() ||
      state.running_var.size() != state.channels()) {
    throw ShapeError("batchnorm channel mismatch: input " + shape_string(x.shape()) + ", state " +
                     std::to_string(state.channels()));
  }
}

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};

template <typename T>
ChannelStats batch_stats(const BasicTensor<T>& x) {
  const std::size_t batch = x.extent(0), channels = x.extent(1), spatial = trailing_size(x.shape());
  const double count = static_cast<double>(batch * spatial);
  ChannelStats s{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      const T* p = x.ptr() + (n * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) s.mean[c] += p[i];
    }
  for (auto& m : s.mean) m /= count;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      const T* p = x.ptr() + (n * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const double d = p[i] - s.mean[c];
        s.var[c] += d * d;
      }
    }
  for (auto& v : s.var) v /= count;
  return s;
}

template <typename T>
BasicTensor<T> normalize(const BasicTensor<T>& x, const BatchNormState<T>& state,
                         const std::vector<double>& mean, const std::vector<double>& var) {
  const std::size_t batch = x.extent(0), channels = x.extent(1), spatial = trailing_size(x.shape());
  BasicTensor<T> out(x.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    const double inv_std = 1.0 / std::sqrt(var[c] + state.epsilon);
    const double scale = static_cast<double>(state.gamma[c]) * inv_std;
    const double shift = static_cast<double>(state.beta[c]) - mean[c] * scale;
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        out[off + i] = static_cast<T>(static_cast<double>(x[off + i]) * scale + shift);
      }
    }
  }
  return out;
}

template <typename T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

}  // namespace

// --- convolution ---------------------------------------------------------------

template <typename T>
BasicTensor<T> conv_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                            const BasicTensor<T>& b, const ConvSpec& spec) {
  return conv_impl(x, w, &b, spec);
}

template <typename T>
BasicTensor<T> conv_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                            const ConvSpec& spec) {
  return conv_impl<T>(x, w, nullptr, spec);
}

template <typename T>
LayerGradients<T> conv_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                const ConvSpec& spec, const BasicTensor<T>& grad_out,
                                bool with_bias) {
  const Shape out_shape = spec.output_shape(x.shape());
  check_conv_weights(w, spec);
  require_same_shape(out_shape, grad_out.shape(), "conv grad_out shape");
  Grid g = make_grid(x.shape(), out_shape, spec.kernel, spec.stride, spec.padding);
  const std::size_t k = spec.fan_in();
  const std::size_t positions = g.oh * g.ow;
  const std::size_t in_stride = g.channels * g.ih * g.iw;
  const std::size_t out_stride = spec.out_channels * positions;

  LayerGradients<T> grads;
  BasicTensor<T> dw(w.shape());
  BasicTensor<T> db({spec.out_channels});
  grads.input = BasicTensor<T>(x.shape());
  std::vector<T> cols(k * positions);
  std::vector<T> dcols(k * positions);
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* dy = grad_out.ptr() + n * out_stride;
    im2col(x.ptr() + n * in_stride, g, cols.data());
    gemm(false, true, spec.out_channels, k, positions, dy, cols.data(), dw.ptr(), true);
    gemm(true, false, k, positions, spec.out_channels, w.ptr(), dy, dcols.data(), false);
    col2im(dcols.data(), g, grads.input.ptr() + n * in_stride);
    if (with_bias) {
      for (std::size_t o = 0; o < spec.out_channels; ++o) {
        T acc = T(0);
        for (std::size_t p = 0; p < positions; ++p) acc += dy[o * positions + p];
        db[o] += acc;
      }
    }
  }
  grads.params.emplace("w", std::move(dw));
  if (with_bias) grads.params.emplace("b", std::move(db));
  return grads;
}

// --- batch normalization -------------------------------------------------------

template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& x, BatchNormState<T>& state, Mode mode) {
  if (mode == Mode::eval) return batchnorm_forward(x, static_cast<const BatchNormState<T>&>(state));
  check_bn(x, state);
  const std::size_t count = x.extent(0) * trailing_size(x.shape());
  if (count < 2) {
    throw ShapeError("batchnorm train mode needs >= 2 elements per channel, input " +
                     shape_string(x.shape()));
  }
  const ChannelStats stats = batch_stats(x);
  BasicTensor<T> out = normalize(x, state, stats.mean, stats.var);
  const double m = state.momentum;
  const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
  for (std::size_t c = 0; c < state.channels(); ++c) {
    state.running_mean[c] =
        static_cast<T>(m * state.running_mean[c] + (1.0 - m) * stats.mean[c]);
    state.running_var[c] =
        static_cast<T>(m * state.running_var[c] + (1.0 - m) * stats.var[c] * unbias);
  }
  return out;
}

template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& x, const BatchNormState<T>& state) {
  check_bn(x, state);
  std::vector<double> mean(state.channels()), var(state.channels());
  for (std::size_t c = 0; c < state.channels(); ++c) {
    mean[c] = state.running_mean[c];
    var[c] = state.running_var[c];
  }
  return normalize(x, state, mean, var);
}

template <typename T>
LayerGradients<T> batchnorm_backward(const BasicTensor<T>& x, const BatchNormState<T>& state,
                                     const BasicTensor<T>& grad_out) {
  check_bn(x, state);
  require_same_shape(x.shape(), grad_out.shape(), "batchnorm grad_out shape");
  const std::size_t batch = x.extent(0), channels = x.extent(1), spatial = trailing_size(x.shape());
  const std::size_t count = batch * spatial;
  if (count < 2) throw ShapeError("batchnorm backward needs >= 2 elements per channel");
  const ChannelStats stats = batch_stats(x);

  LayerGradients<T> grads;
  BasicTensor<T> dgamma({channels});
  BasicTensor<T> dbeta({channels});
  grads.input = BasicTensor<T>(x.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    const double inv_std = 1.0 / std::sqrt(stats.var[c] + state.epsilon);
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const double xhat = (x[off + i] - stats.mean[c]) * inv_std;
        sum_dy += grad_out[off + i];
        sum_dy_xhat += grad_out[off + i] * xhat;
      }
    }
    dgamma[c] = static_cast<T>(sum_dy_xhat);
    dbeta[c] = static_cast<T>(sum_dy);
    const double g = state.gamma[c];
    const double scale = g * inv_std / static_cast<double>(count);
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const double xhat = (x[off + i] - stats.mean[c]) * inv_std;
        grads.input[off + i] = static_cast<T>(
            scale * (static_cast<double>(count) * grad_out[off + i] - sum_dy - xhat * sum_dy_xhat));
      }
    }
  }
  grads.params.emplace("gamma", std::move(dgamma));
  grads.params.emplace("beta", std::move(dbeta));
  return grads;
}

// --- pooling -------------------------------------------------------------------

template <typename T>
MaxPoolResult<T> maxpool(const BasicTensor<T>& x, const PoolSpec& spec) {
  const Shape out_shape = spec.output_shape(x.shape());
  Grid g = make_grid(x.shape(), out_shape, spec.kernel, spec.stride, spec.padding);
  MaxPoolResult<T> r{BasicTensor<T>(out_shape), std::vector<std::size_t>(shape_size(out_shape)),
                     x.shape()};
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < g.batch * g.channels; ++plane) {
    const std::size_t base = plane * g.ih * g.iw;
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const long iy = static_cast<long>(oy * g.sh + ky) - static_cast<long>(g.ph);
          if (iy < 0 || iy >= static_cast<long>(g.ih)) continue;
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const long ix = static_cast<long>(ox * g.sw + kx) - static_cast<long>(g.pw);
            if (ix < 0 || ix >= static_cast<long>(g.iw)) continue;
            const std::size_t idx = base + static_cast<std::size_t>(iy) * g.iw +
                                    static_cast<std::size_t>(ix);
            if (!found || x[idx] > best) {
              best = x[idx];
              best_idx = idx;
              found = true;
            }
          }
        }
        r.output[o] = best;
        r.argmax[o] = best_idx;
      }
    }
  }
  return r;
}

template <typename T>
BasicTensor<T> maxpool_backward(const MaxPoolResult<T>& pooled, const BasicTensor<T>& grad_out) {
  require_same_shape(pooled.output.shape(), grad_out.shape(), "maxpool grad_out shape");
  BasicTensor<T> dx(pooled.input_shape);
  for (std::size_t o = 0; o < grad_out.size(); ++o) dx[pooled.argmax[o]] += grad_out[o];
  return dx;
}

template <typename T>
BasicTensor<T> global_average_pool(const BasicTensor<T>& x) {
  if (x.rank() < 3) {
    throw ShapeError("global average pool needs (batch, channels, spatial...), got " +
                     shape_string(x.shape()));
  }
  const std::size_t rows = x.extent(0) * x.extent(1), spatial = trailing_size(x.shape());
  BasicTensor<T> out({x.extent(0), x.extent(1)});
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    const T* p = x.ptr() + r * spatial;
    for (std::size_t i = 0; i < spatial; ++i) acc += p[i];
    out[r] = static_cast<T>(acc / static_cast<double>(spatial));
  }
  return out;
}

template <typename T>
BasicTensor<T> global_average_pool_backward(const Shape& input_shape,
                                            const BasicTensor<T>& grad_out) {
  if (input_shape.size() < 3) throw ShapeError("global average pool input shape too small");
  require_same_shape(Shape{input_shape[0], input_shape[1]}, grad_out.shape(),
                     "global average pool grad_out shape");
  const std::size_t spatial = trailing_size(input_shape);
  BasicTensor<T> dx(input_shape);
  const T scale = T(1) / static_cast<T>(spatial);
  for (std::size_t r = 0; r < grad_out.size(); ++r) {
    T* p = dx.ptr() + r * spatial;
    std::fill(p, p + spatial, grad_out[r] * scale);
  }
  return dx;
}

// --- dense ---------------------------------------------------------------------

template <typename T>
BasicTensor<T> linear_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                              const BasicTensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.extent(1) != w.extent(0) || b.rank() != 1 ||
      b.extent(0) != w.extent(1)) {
    throw ShapeError("linear shape mismatch: x " + shape_string(x.shape()) + ", w " +
                     shape_string(w.shape()) + ", b " + shape_string(b.shape()));
  }
  BasicTensor<T> out = matmul(x, w);
  const std::size_t k = w.extent(1);
  for (std::size_t r = 0; r < x.extent(0); ++r)
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] += b[j];
  return out;
}

template <typename T>
LayerGradients<T> linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                  const BasicTensor<T>& grad_out) {
  if (x.rank() != 2 || w.rank() != 2 || x.extent(1) != w.extent(0)) {
    throw ShapeError("linear shape mismatch: x " + shape_string(x.shape()) + ", w " +
                     shape_string(w.shape()));
  }
  require_same_shape(Shape{x.extent(0), w.extent(1)}, grad_out.shape(), "linear grad_out shape");
  const std::size_t batch = x.extent(0), d = x.extent(1), k = w.extent(1);
  LayerGradients<T> grads;
  BasicTensor<T> dw({d, k});
  gemm(true, false, d, k, batch, x.ptr(), grad_out.ptr(), dw.ptr(), false);
  BasicTensor<T> db({k});
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t j = 0; j < k; ++j) db[j] += grad_out[r * k + j];
  grads.input = BasicTensor<T>({batch, d});
  gemm(false, true, batch, d, k, grad_out.ptr(), w.ptr(), grads.input.ptr(), false);
  grads.params.emplace("w", std::move(dw));
  grads.params.emplace("b", std::move(db));
  return grads;
}

// --- activations ---------------------------------------------------------------

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return elementwise(ElementwiseOp::max0, x);
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) {
  require_same_shape(x.shape(), grad_out.shape(), "relu grad_out shape");
  BasicTensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return dx;
}

template <typename T>
BasicTensor<T> scaled_tanh(const BasicTensor<T>& z) {
  BasicTensor<T> out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = (std::tanh(z[i]) + T(1)) / T(2);
  return out;
}

template <typename T>
BasicTensor<T> scaled_tanh_backward(const BasicTensor<T>& z, const BasicTensor<T>& grad_out) {
  require_same_shape(z.shape(), grad_out.shape(), "scaled_tanh grad_out shape");
  BasicTensor<T> dz(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const T t = std::tanh(z[i]);
    dz[i] = grad_out[i] * (T(1) - t * t) / T(2);
  }
  return dz;
}

// --- residual block ------------------------------------------------------------

template <typename T>
ResidualBlockParams<T> ResidualBlockParams<T>::make(std::size_t spatial_rank,
                                                    std::size_t in_channels,
                                                    std::size_t out_channels, std::size_t kernel,
                                                    std::size_t stride, std::size_t padding) {
  auto spec = [&](std::size_t in, std::size_t out, std::size_t k, std::size_t s, std::size_t p) {
    return spatial_rank == 1 ? ConvSpec::conv1d(in, out, k, s, p)
                             : ConvSpec::conv2d(in, out, k, s, p);
  };
  ResidualBlockParams p;
  p.kind = (in_channels == out_channels && stride == 1) ? ShortcutKind::identity
                                                        : ShortcutKind::projection;
  p.conv1 = spec(in_channels, out_channels, kernel, stride, padding);
  p.conv2 = spec(out_channels, out_channels, kernel, 1, padding);
  p.conv1_w = BasicTensor<T>(p.conv1.weight_shape());
  p.conv2_w = BasicTensor<T>(p.conv2.weight_shape());
  p.bn1 = BatchNormState<T>::fresh(out_channels);
  p.bn2 = BatchNormState<T>::fresh(out_channels);
  if (p.kind == ShortcutKind::projection) {
    p.shortcut = spec(in_channels, out_channels, 1, stride, 0);
    p.shortcut_w = BasicTensor<T>(p.shortcut.weight_shape());
    p.shortcut_bn = BatchNormState<T>::fresh(out_channels);
  }
  return p;
}

template <typename T>
void ResidualBlockParams<T>::validate() const {
  if (kind == ShortcutKind::identity) {
    const bool unit_stride =
        std::all_of(conv1.stride.begin(), conv1.stride.end(), [](std::size_t s) { return s == 1; });
    if (conv1.in_channels != conv2.out_channels || !unit_stride) {
      throw ShapeError("identity shortcut requires equal channels and unit stride");
    }
  }
  if (conv1.out_channels != conv2.in_channels) {
    throw ShapeError("residual block convolutions disagree on channel count");
  }
}

namespace {

template <typename T>
BasicTensor<T> run_bn(const BasicTensor<T>& x, BatchNormState<T>& s, Mode mode) {
  return batchnorm_forward(x, s, mode);
}

template <typename T>
BasicTensor<T> run_bn(const BasicTensor<T>& x, const BatchNormState<T>& s, Mode) {
  return batchnorm_forward(x, s);
}

template <typename T, typename Params>
BasicTensor<T> block_forward(const BasicTensor<T>& x, Params& p, Mode mode,
                             ResidualBlockTape<T>* tape) {
  p.validate();
  BasicTensor<T> c1 = conv_forward(x, p.conv1_w, p.conv1);
  BasicTensor<T> a1 = relu(run_bn(c1, p.bn1, mode));
  BasicTensor<T> c2 = conv_forward(a1, p.conv2_w, p.conv2);
  BasicTensor<T> main = run_bn(c2, p.bn2, mode);
  BasicTensor<T> sc;
  BasicTensor<T> shortcut_conv;
  if (p.kind == ShortcutKind::projection) {
    shortcut_conv = conv_forward(x, p.shortcut_w, p.shortcut);
    sc = run_bn(shortcut_conv, p.shortcut_bn, mode);
  } else {
    sc = x;
  }
  BasicTensor<T> sum = add(main, sc);
  BasicTensor<T> out = relu(sum);
  if (tape) {
    tape->x = x;
    tape->conv1_out = std::move(c1);
    tape->act1 = std::move(a1);
    tape->conv2_out = std::move(c2);
    tape->shortcut_conv_out = std::move(shortcut_conv);
    tape->sum = std::move(sum);
  }
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> residual_block_forward(const BasicTensor<T>& x, ResidualBlockParams<T>& params,
                                      Mode mode, ResidualBlockTape<T>* tape) {
  return block_forward(x, params, mode, tape);
}

template <typename T>
BasicTensor<T> residual_block_forward(const BasicTensor<T>& x,
                                      const ResidualBlockParams<T>& params) {
  return block_forward<T>(x, params, Mode::eval, nullptr);
}

template <typename T>
LayerGradients<T> residual_block_backward(const ResidualBlockTape<T>& tape,
                                          const ResidualBlockParams<T>& p,
                                          const BasicTensor<T>& grad_out) {
  LayerGradients<T> grads;
  BasicTensor<T> dsum = relu_backward(tape.sum, grad_out);

  auto bn2 = batchnorm_backward(tape.conv2_out, p.bn2, dsum);
  auto conv2 = conv_backward(tape.act1, p.conv2_w, p.conv2, bn2.input, false);
  // act1 > 0 exactly where the BN output was positive.
  BasicTensor<T> dbn1_out = relu_backward(tape.act1, conv2.input);
  auto bn1 = batchnorm_backward(tape.conv1_out, p.bn1, dbn1_out);
  auto conv1 = conv_backward(tape.x, p.conv1_w, p.conv1, bn1.input, false);

  grads.input = std::move(conv1.input);
  if (p.kind == ShortcutKind::projection) {
    auto sbn = batchnorm_backward(tape.shortcut_conv_out, p.shortcut_bn, dsum);
    auto sconv = conv_backward(tape.x, p.shortcut_w, p.shortcut, sbn.input, false);
    grads.input = add(grads.input, sconv.input);
    grads.params.emplace("shortcut.w", std::move(sconv.params.at("w")));
    grads.params.emplace("shortcut_bn.gamma", std::move(sbn.params.at("gamma")));
    grads.params.emplace("shortcut_bn.beta", std::move(sbn.params.at("beta")));
  } else {
    grads.input = add(grads.input, dsum);
  }
  grads.params.emplace("conv1.w", std::move(conv1.params.at("w")));
  grads.params.emplace("bn1.gamma", std::move(bn1.params.at("gamma")));
  grads.params.emplace("bn1.beta", std::move(bn1.params.at("beta")));
  grads.params.emplace("conv2.w", std::move(conv2.params.at("w")));
  grads.params.emplace("bn2.gamma", std::move(bn2.params.at("gamma")));
  grads.params.emplace("bn2.beta", std::move(bn2.params.at("beta")));
  return grads;
}

// --- LSTM ------------------------------------------------------------------------

template <typename T>
LstmState<T> lstm_step(const BasicTensor<T>& x, const LstmState<T>& prev,
                       const LstmParams<T>& params, LstmStepCache<T>* cache) {
  const std::size_t hidden = params.hidden_size();
  if (params.b.rank() != 1 || params.b.size() % 4 != 0 || params.w.rank() != 2 ||
      params.w.extent(1) != 4 * hidden || params.w.extent(0) <= hidden) {
    throw ShapeError("lstm parameter shapes inconsistent: w " + shape_string(params.w.shape()) +
                     ", b " + shape_string(params.b.shape()));
  }
  if (x.rank() != 2 || x.extent(1) != params.input_size()) {
    throw ShapeError("lstm input " + shape_string(x.shape()) + " expects width " +
                     std::to_string(params.input_size()));
  }
  const std::size_t batch = x.extent(0);
  const Shape state_shape{batch, hidden};
  require_same_shape(state_shape, prev.h.shape(), "lstm h_prev shape");
  require_same_shape(state_shape, prev.c.shape(), "lstm c_prev shape");

  BasicTensor<T> xh = concat_columns(x, prev.h);
  BasicTensor<T> gates = linear_forward(xh, params.w, params.b);
  LstmState<T> next{BasicTensor<T>(state_shape), BasicTensor<T>(state_shape)};
  BasicTensor<T> tanh_c(state_shape);
  for (std::size_t n = 0; n < batch; ++n) {
    T* z = gates.ptr() + n * 4 * hidden;
    for (std::size_t j = 0; j < hidden; ++j) {
      z[j] = sigmoid(z[j]);
      z[hidden + j] = sigmoid(z[hidden + j]);
      z[2 * hidden + j] = std::tanh(z[2 * hidden + j]);
      z[3 * hidden + j] = sigmoid(z[3 * hidden + j]);
      const std::size_t s = n * hidden + j;
      next.c[s] = z[hidden + j] * prev.c[s] + z[j] * z[2 * hidden + j];
      tanh_c[s] = std::tanh(next.c[s]);
      next.h[s] = z[3 * hidden + j] * tanh_c[s];
    }
  }
  if (cache) {
    cache->xh = std::move(xh);
    cache->gates = std::move(gates);
    cache->c_prev = prev.c;
    cache->c = next.c;
    cache->tanh_c = std::move(tanh_c);
  }
  return next;
}

template <typename T>
LstmStepGradients<T> lstm_step_backward(const LstmStepCache<T>& cache,
                                        const LstmParams<T>& params, const BasicTensor<T>& dh,
                                        const BasicTensor<T>& dc) {
  const std::size_t hidden = params.hidden_size(), input = params.input_size();
  require_same_shape(cache.c.shape(), dh.shape(), "lstm dh shape");
  require_same_shape(cache.c.shape(), dc.shape(), "lstm dc shape");
  const std::size_t batch = dh.extent(0);

  BasicTensor<T> dz({batch, 4 * hidden});
  LstmStepGradients<T> g;
  g.c_prev = BasicTensor<T>({batch, hidden});
  for (std::size_t n = 0; n < batch; ++n) {
    const T* z = cache.gates.ptr() + n * 4 * hidden;
    T* d = dz.ptr() + n * 4 * hidden;
    for (std::size_t j = 0; j < hidden; ++j) {
      const std::size_t s = n * hidden + j;
      const T i = z[j], f = z[hidden + j], gg = z[2 * hidden + j], o = z[3 * hidden + j];
      const T tc = cache.tanh_c[s];
      const T dct = dc[s] + dh[s] * o * (T(1) - tc * tc);
      d[j] = dct * gg * i * (T(1) - i);
      d[hidden + j] = dct * cache.c_prev[s] * f * (T(1) - f);
      d[2 * hidden + j] = dct * i * (T(1) - gg * gg);
      d[3 * hidden + j] = dh[s] * tc * o * (T(1) - o);
      g.c_prev[s] = dct * f;
    }
  }
  auto lin = linear_backward(cache.xh, params.w, dz);
  g.w = std::move(lin.params.at("w"));
  g.b = std::move(lin.params.at("b"));
  g.x = BasicTensor<T>({batch, input});
  g.h_prev = BasicTensor<T>({batch, hidden});
  for (std::size_t n = 0; n < batch; ++n) {
    const T* src = lin.input.ptr() + n * (input + hidden);
    std::copy_n(src, input, g.x.ptr() + n * input);
    std::copy_n(src + input, hidden, g.h_prev.ptr() + n * hidden);
  }
  return g;
}

#define DEEPIMP_INSTANTIATE(T)                                                                    \
  template struct BatchNormState<T>;                                                              \
  template struct ResidualBlockParams<T>;                                                         \
  template BasicTensor<T> conv_forward(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                       const BasicTensor<T>&, const ConvSpec&);                   \
  template BasicTensor<T> conv_forward(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                       const ConvSpec&);                                          \
  template LayerGradients<T> conv_backward(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                           const ConvSpec&, const BasicTensor<T>&, bool);         \
  template BasicTensor<T> batchnorm_forward(const BasicTensor<T>&, BatchNormState<T>&, Mode);     \
  template BasicTensor<T> batchnorm_forward(const BasicTensor<T>&, const BatchNormState<T>&);     \
  template LayerGradients<T> batchnorm_backward(const BasicTensor<T>&, const BatchNormState<T>&,  \
                                                const BasicTensor<T>&);                           \
  template MaxPoolResult<T> maxpool(const BasicTensor<T>&, const PoolSpec&);                      \
  template BasicTensor<T> maxpool_backward(const MaxPoolResult<T>&, const BasicTensor<T>&);       \
  template BasicTensor<T> global_average_pool(const BasicTensor<T>&);                             \
  template BasicTensor<T> global_average_pool_backward(const Shape&, const BasicTensor<T>&);      \
  template BasicTensor<T> linear_forward(const BasicTensor<T>&, const BasicTensor<T>&,            \
                                         const BasicTensor<T>&);                                  \
  template LayerGradients<T> linear_backward(const BasicTensor<T>&, const BasicTensor<T>&,        \
                                             const BasicTensor<T>&);                              \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                            \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> scaled_tanh(const BasicTensor<T>&);                                     \
  template BasicTensor<T> scaled_tanh_backward(const BasicTensor<T>&, const BasicTensor<T>&);     \
  template BasicTensor<T> residual_block_forward(const BasicTensor<T>&, ResidualBlockParams<T>&,  \
                                                 Mode, ResidualBlockTape<T>*);                    \
  template BasicTensor<T> residual_block_forward(const BasicTensor<T>&,                           \
                                                 const ResidualBlockParams<T>&);                  \
  template LayerGradients<T> residual_block_backward(                                             \
      const ResidualBlockTape<T>&, const ResidualBlockParams<T>&, const BasicTensor<T>&);         \
  template LstmState<T> lstm_step(const BasicTensor<T>&, const LstmState<T>&,                     \
                                  const LstmParams<T>&, LstmStepCache<T>*);                       \
  template LstmStepGradients<T> lstm_step_backward(const LstmStepCache<T>&, const LstmParams<T>&, \
                                                   const BasicTensor<T>&, const BasicTensor<T>&);

DEEPIMP_INSTANTIATE(float)
DEEPIMP_INSTANTIATE(double)

#undef DEEPIMP_INSTANTIATE

}  // namespace deepimp
