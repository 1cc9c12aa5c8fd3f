#include "deepimp/optim.hpp"

#include <cmath>

namespace deepimp {

template <typename T>
void adam_step(const ParamRefs<T>& params, const GradientSet<T>& grads, AdamState<T>& state) {
  for (const auto& [name, tensor] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument("missing gradient for " + name);
    if (it->second.shape() != tensor->shape()) {
      throw ShapeError("gradient for " + name + " has shape " + shape_string(it->second.shape()) +
                       ", parameter " + shape_string(tensor->shape()));
    }
    if (!all_finite(it->second)) throw NumericError("non-finite gradient for " + name);
  }

  const AdamHyper& h = state.hyper;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (const auto& [name, tensor] : params) {
    const BasicTensor<T>& g = grads.at(name);
    auto& m = state.m.try_emplace(name, tensor->shape()).first->second;
    auto& v = state.v.try_emplace(name, tensor->shape()).first->second;
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      const double gi = g[i];
      const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * gi;
      const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double m_hat = mi / c1;
      const double v_hat = vi / c2;
      (*tensor)[i] =
          static_cast<T>(static_cast<double>((*tensor)[i]) - h.alpha * m_hat / (std::sqrt(v_hat) + h.epsilon));
    }
  }
}

template <typename T>
void adam_step(NetworkParams<T>& params, const GradientSet<T>& grads, AdamState<T>& state) {
  adam_step(params.trainable(), grads, state);
  ++params.version;
}

double LrSchedule::alpha_for_epoch(std::uint32_t epoch) const {
  return initial_alpha / std::pow(decay_factor, static_cast<double>(epoch / period));
}

double alpha_for_epoch(std::uint32_t epoch) { return LrSchedule{}.alpha_for_epoch(epoch); }

template <typename T>
LossResult<T> mae_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mae_loss shape mismatch: " + shape_string(pred.shape()) + " vs " +
                     shape_string(target.shape()));
  }
  const double n = static_cast<double>(pred.size());
  LossResult<T> r{0.0, BasicTensor<T>(pred.shape())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    r.loss += std::abs(d);
    r.grad[i] = static_cast<T>((d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0) / n);
  }
  r.loss /= n;
  return r;
}

#define DEEPIMP_INSTANTIATE(T)                                                             \
  template void adam_step(const ParamRefs<T>&, const GradientSet<T>&, AdamState<T>&);      \
  template void adam_step(NetworkParams<T>&, const GradientSet<T>&, AdamState<T>&);        \
  template LossResult<T> mae_loss(const BasicTensor<T>&, const BasicTensor<T>&);

DEEPIMP_INSTANTIATE(float)
DEEPIMP_INSTANTIATE(double)

#undef DEEPIMP_INSTANTIATE

}  // namespace deepimp
