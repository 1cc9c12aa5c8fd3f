#include <doctest.h>

#include <cmath>
#include <limits>

#include "deepimp/errors.hpp"
#include "deepimp/optim.hpp"
#include "support.hpp"

using namespace deepimp;

TEST_CASE("Adam matches a scalar reference over 100 steps") {
  std::mt19937_64 rng(11);
  TensorD w = testing::random_tensor<double>({3, 2}, rng);
  TensorD b = testing::random_tensor<double>({2}, rng);
  std::vector<double> rw(w.data().begin(), w.data().end()), rb(b.data().begin(), b.data().end());
  std::vector<double> mw(6, 0.0), vw(6, 0.0), mb(2, 0.0), vb(2, 0.0);

  AdamState<double> state;
  const double a = 2e-4, b1 = 0.5, b2 = 0.999, eps = 1e-8;
  auto reference = [&](std::vector<double>& p, std::vector<double>& m, std::vector<double>& v,
                       const std::vector<double>& g, int t) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
      p[i] -= a * mh / (std::sqrt(vh) + eps);
    }
  };

  for (int t = 1; t <= 100; ++t) {
    // Gradient of sum(sin(3p)) keeps the sign pattern moving.
    GradientSet<double> grads;
    TensorD gw(w.shape()), gb(b.shape());
    std::vector<double> ew(6), eb(2);
    for (std::size_t i = 0; i < 6; ++i) ew[i] = gw[i] = 3.0 * std::cos(3.0 * w[i]);
    for (std::size_t i = 0; i < 2; ++i) eb[i] = gb[i] = 3.0 * std::cos(3.0 * b[i]);
    grads["w"] = gw;
    grads["b"] = gb;
    adam_step<double>({{"w", &w}, {"b", &b}}, grads, state);
    reference(rw, mw, vw, ew, t);
    reference(rb, mb, vb, eb, t);
  }
  CHECK(state.step == 100);
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(w[i] - rw[i]) <= 1e-10);
  for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(b[i] - rb[i]) <= 1e-10);
  CHECK(state.m.at("w").shape() == w.shape());
  CHECK(state.v.at("b").shape() == b.shape());
}

TEST_CASE("non-finite gradients abort the step without touching parameters") {
  TensorD w({2}, {1.0, 2.0});
  TensorD b({1}, {3.0});
  AdamState<double> state;
  GradientSet<double> grads{{"w", TensorD({2}, {0.1, 0.2})},
                            {"b", TensorD({1}, {std::numeric_limits<double>::quiet_NaN()})}};
  try {
    adam_step<double>({{"w", &w}, {"b", &b}}, grads, state);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find('b') != std::string::npos);
  }
  CHECK(w == TensorD({2}, {1.0, 2.0}));
  CHECK(b == TensorD({1}, {3.0}));
  CHECK(state.step == 0);
}

TEST_CASE("adam_step on a network bumps its version") {
  auto p = build_network(Architecture::mini(), 1);
  GradientSet<float> grads;
  for (auto& [name, t] : p.trainable()) grads[name] = Tensor(t->shape(), 0.01f);
  const auto before = p.version;
  const Tensor w0 = p.fusion_w;
  AdamState<float> state;
  adam_step(p, grads, state);
  CHECK(p.version == before + 1);
  // First step moves every entry by alpha (m/sqrt(v) = 1 after bias correction).
  for (std::size_t i = 0; i < w0.size(); ++i) CHECK(w0[i] - p.fusion_w[i] == doctest::Approx(2e-4).epsilon(1e-3));
}

TEST_CASE("step schedule") {
  CHECK(alpha_for_epoch(0) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(alpha_for_epoch(299) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(alpha_for_epoch(300) == doctest::Approx(2e-5).epsilon(1e-12));
  CHECK(alpha_for_epoch(600) == doctest::Approx(2e-6).epsilon(1e-12));
  CHECK(alpha_for_epoch(899) == doctest::Approx(2e-6).epsilon(1e-12));
  LrSchedule s;
  s.period = 10;
  CHECK(s.alpha_for_epoch(25) == doctest::Approx(2e-6).epsilon(1e-12));
}

TEST_CASE("MAE loss value and subgradient") {
  const TensorD pred({2, 2}, {0.5, 0.2, 0.9, 0.4});
  const TensorD target({2, 2}, {0.5, 0.6, 0.1, 0.3});
  const auto r = mae_loss(pred, target);
  CHECK(r.loss == doctest::Approx((0.0 + 0.4 + 0.8 + 0.1) / 4.0).epsilon(1e-14));
  CHECK(r.grad == TensorD({2, 2}, {0.0, -0.25, 0.25, 0.25}));
  CHECK_THROWS_AS(mae_loss(pred, TensorD({4})), ShapeError);
}
