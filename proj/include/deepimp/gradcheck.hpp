#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "deepimp/tensor.hpp"

namespace deepimp {

// ||a - n||_inf / max(||a||_inf, ||n||_inf); 0 when both vanish.
double relative_error(const TensorD& analytic, const TensorD& numeric);

// Central differences of `loss` with respect to `param`, restricted to
// `indices` (all entries when empty). Returns the relative error against the
// same entries of `analytic`.
double finite_difference_error(TensorD& param, const TensorD& analytic,
                               const std::function<double()>& loss, double h,
                               const std::vector<std::size_t>& indices = {});

struct GradcheckRow {
  std::string layer;
  double max_relative_error = 0.0;
  double threshold = 0.0;
  bool pass() const { return max_relative_error <= threshold; }
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-5;
  double layer_threshold = 1e-5;
  double network_threshold = 1e-4;
  // Entries checked per network tensor (layer checks use every entry).
  std::size_t network_samples = 4;
  bool include_network = true;
};

// Every layer primitive on small random shapes, then the miniature network
// (frame crop 16, batch 4), all in 64-bit.
std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& options = {});
std::string format_gradcheck(const std::vector<GradcheckRow>& rows);

}  // namespace deepimp
