#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "deepimp/model.hpp"
#include "deepimp/tensor.hpp"

namespace deepimp {

struct AdamHyper {
  double alpha = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  std::map<std::string, BasicTensor<T>> m;
  std::map<std::string, BasicTensor<T>> v;
};

// Bias-corrected Adam. Moments are created lazily, zero-initialized, with the
// shape of their parameter. Every parameter must have a finite gradient;
// otherwise nothing is updated and NumericError names the parameter.
template <typename T>
void adam_step(const ParamRefs<T>& params, const GradientSet<T>& grads, AdamState<T>& state);

// Convenience overload that also invalidates outstanding tapes.
template <typename T>
void adam_step(NetworkParams<T>& params, const GradientSet<T>& grads, AdamState<T>& state);

// Step learning-rate schedule: initial / 10^floor(epoch / period).
struct LrSchedule {
  double initial_alpha = 2e-4;
  double decay_factor = 10.0;
  std::uint32_t period = 300;

  double alpha_for_epoch(std::uint32_t epoch) const;
};

double alpha_for_epoch(std::uint32_t epoch);

template <typename T>
struct LossResult {
  double loss = 0.0;
  BasicTensor<T> grad;
};

// Mean absolute error over every entry; subgradient sign(pred - target) / n
// with sign(0) = 0.
template <typename T>
LossResult<T> mae_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target);

}  // namespace deepimp
