#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "deepimp/tensor.hpp"

namespace deepimp {

enum class Mode { train, eval };

// Sliding-window geometry for one spatial axis: floor((L + 2p - k) / s) + 1.
// Throws ShapeError when the padded extent is smaller than the kernel.
std::size_t window_output_extent(std::size_t length, std::size_t kernel, std::size_t stride,
                                 std::size_t padding);

// Convolution geometry. One entry per spatial axis: a single entry for the
// auditory (1D) stream, two for the visual (2D) stream.
struct ConvSpec {
  std::vector<std::size_t> kernel;
  std::vector<std::size_t> stride;
  std::vector<std::size_t> padding;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;

  static ConvSpec conv1d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                         std::size_t padding);
  static ConvSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                         std::size_t padding);
  static ConvSpec conv2d(std::size_t in, std::size_t out, std::vector<std::size_t> kernel,
                         std::vector<std::size_t> stride, std::vector<std::size_t> padding);

  std::size_t spatial_rank() const { return kernel.size(); }
  std::size_t fan_in() const;
  Shape weight_shape() const;
  // `input` is (batch, channels, spatial...).
  Shape output_shape(const Shape& input) const;
  void validate() const;
};

// Pooling geometry; padded cells behave as -infinity.
struct PoolSpec {
  std::vector<std::size_t> kernel;
  std::vector<std::size_t> stride;
  std::vector<std::size_t> padding;

  static PoolSpec pool1d(std::size_t kernel, std::size_t stride, std::size_t padding);
  static PoolSpec pool2d(std::size_t kernel, std::size_t stride, std::size_t padding);

  std::size_t spatial_rank() const { return kernel.size(); }
  Shape output_shape(const Shape& input) const;
};

template <typename T>
struct BatchNormState {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  double momentum = 0.9;
  double epsilon = 1e-5;

  // gamma = 1, beta = 0, running mean 0, running variance 1.
  static BatchNormState fresh(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
};

// Parameter gradients keyed by parameter name plus the gradient with respect
// to the layer input.
template <typename T>
struct LayerGradients {
  std::map<std::string, BasicTensor<T>> params;
  BasicTensor<T> input;
};

// --- convolution -----------------------------------------------------------

// Cross-correlation with zero padding. x: (B, C_in, spatial...),
// w: (C_out, C_in, kernel...), b: (C_out).
template <typename T>
BasicTensor<T> conv_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                            const BasicTensor<T>& b, const ConvSpec& spec);
template <typename T>
BasicTensor<T> conv_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                            const ConvSpec& spec);

// Gradients "w", "b" (only when with_bias) and the input gradient.
template <typename T>
LayerGradients<T> conv_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                const ConvSpec& spec, const BasicTensor<T>& grad_out,
                                bool with_bias = true);

// --- batch normalization ---------------------------------------------------

// Normalizes per channel over the batch and spatial axes of x (B, C, ...).
// Train mode uses batch statistics and updates the running statistics;
// eval mode reads the running statistics and leaves `state` untouched.
template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& x, BatchNormState<T>& state, Mode mode);
template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& x, const BatchNormState<T>& state);

// Gradient of the train-mode transform ("gamma", "beta", input), including
// the dependence of the batch statistics on x.
template <typename T>
LayerGradients<T> batchnorm_backward(const BasicTensor<T>& x, const BatchNormState<T>& state,
                                     const BasicTensor<T>& grad_out);

// --- pooling ---------------------------------------------------------------

template <typename T>
struct MaxPoolResult {
  BasicTensor<T> output;
  // Flat input index selected for each output element. Ties resolve to the
  // lowest index.
  std::vector<std::size_t> argmax;
  Shape input_shape;
};

template <typename T>
MaxPoolResult<T> maxpool(const BasicTensor<T>& x, const PoolSpec& spec);
template <typename T>
BasicTensor<T> maxpool_backward(const MaxPoolResult<T>& pooled, const BasicTensor<T>& grad_out);

// Mean over every axis after the channel axis: (B, C, ...) -> (B, C).
template <typename T>
BasicTensor<T> global_average_pool(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> global_average_pool_backward(const Shape& input_shape,
                                            const BasicTensor<T>& grad_out);

// --- dense -------------------------------------------------------------------

// x (B, D) * w (D, K) + b (K).
template <typename T>
BasicTensor<T> linear_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                              const BasicTensor<T>& b);
template <typename T>
LayerGradients<T> linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                  const BasicTensor<T>& grad_out);

// --- activations -------------------------------------------------------------

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);
// Gradient passes where the pre-activation x > 0.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out);

// (tanh(z) + 1) / 2, maps onto (0, 1).
template <typename T>
BasicTensor<T> scaled_tanh(const BasicTensor<T>& z);
template <typename T>
BasicTensor<T> scaled_tanh_backward(const BasicTensor<T>& z, const BasicTensor<T>& grad_out);

// --- residual block ----------------------------------------------------------

enum class ShortcutKind { identity, projection };

// conv -> BN -> ReLU -> conv -> BN, plus shortcut, then ReLU. The projection
// shortcut is a single-tap convolution with the block stride followed by BN.
template <typename T>
struct ResidualBlockParams {
  ShortcutKind kind = ShortcutKind::identity;
  ConvSpec conv1;
  ConvSpec conv2;
  ConvSpec shortcut;  // projection only
  BasicTensor<T> conv1_w;
  BatchNormState<T> bn1;
  BasicTensor<T> conv2_w;
  BatchNormState<T> bn2;
  BasicTensor<T> shortcut_w;  // projection only
  BatchNormState<T> shortcut_bn;

  // Specs for a block over `spatial_rank` axes with a cubic kernel of side
  // `kernel`; projection when the channel count or stride changes.
  static ResidualBlockParams make(std::size_t spatial_rank, std::size_t in_channels,
                                  std::size_t out_channels, std::size_t kernel,
                                  std::size_t stride, std::size_t padding);
  void validate() const;
};

template <typename T>
struct ResidualBlockTape {
  BasicTensor<T> x;
  BasicTensor<T> conv1_out;
  BasicTensor<T> act1;
  BasicTensor<T> conv2_out;
  BasicTensor<T> shortcut_conv_out;  // projection only
  BasicTensor<T> sum;
};

// `tape` may be null (inference). BN statistics are updated in train mode.
template <typename T>
BasicTensor<T> residual_block_forward(const BasicTensor<T>& x, ResidualBlockParams<T>& params,
                                      Mode mode, ResidualBlockTape<T>* tape = nullptr);
template <typename T>
BasicTensor<T> residual_block_forward(const BasicTensor<T>& x,
                                      const ResidualBlockParams<T>& params);

// Keys: conv1.w, bn1.gamma, bn1.beta, conv2.w, bn2.gamma, bn2.beta and, for
// projection blocks, shortcut.w, shortcut_bn.gamma, shortcut_bn.beta.
template <typename T>
LayerGradients<T> residual_block_backward(const ResidualBlockTape<T>& tape,
                                          const ResidualBlockParams<T>& params,
                                          const BasicTensor<T>& grad_out);

// --- LSTM --------------------------------------------------------------------

// Gates are computed as [x, h_prev] * w + b with w of shape (D + H, 4H) and
// column blocks ordered input, forget, candidate, output.
template <typename T>
struct LstmParams {
  BasicTensor<T> w;
  BasicTensor<T> b;

  std::size_t hidden_size() const { return b.size() / 4; }
  std::size_t input_size() const { return w.extent(0) - hidden_size(); }
};

template <typename T>
struct LstmStepCache {
  BasicTensor<T> xh;     // (B, D + H) concatenated input
  BasicTensor<T> gates;  // (B, 4H) post-activation i, f, g, o
  BasicTensor<T> c_prev;
  BasicTensor<T> c;
  BasicTensor<T> tanh_c;
};

template <typename T>
struct LstmState {
  BasicTensor<T> h;
  BasicTensor<T> c;
};

template <typename T>
LstmState<T> lstm_step(const BasicTensor<T>& x, const LstmState<T>& prev,
                       const LstmParams<T>& params, LstmStepCache<T>* cache = nullptr);

template <typename T>
struct LstmStepGradients {
  BasicTensor<T> w;
  BasicTensor<T> b;
  BasicTensor<T> x;
  BasicTensor<T> h_prev;
  BasicTensor<T> c_prev;
};

// dh, dc: gradients flowing into h_t and c_t.
template <typename T>
LstmStepGradients<T> lstm_step_backward(const LstmStepCache<T>& cache,
                                        const LstmParams<T>& params, const BasicTensor<T>& dh,
                                        const BasicTensor<T>& dc);

}  // namespace deepimp
