#include <doctest.h>

#include <cmath>
#include <limits>

#include "deepimp/errors.hpp"
#include "deepimp/tensor.hpp"
#include "support.hpp"

using namespace deepimp;

namespace {

// c[i][j] = sum_p A[i][p] B[p][j] with explicit index maps for the transposes.
std::vector<double> naive_gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
                               const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta ? a[p * m + i] : a[i * k + p];
        const double bv = tb ? b[j * k + p] : b[p * n + j];
        c[i * n + j] += av * bv;
      }
  return c;
}

}  // namespace

TEST_CASE("default tensor is a rank-0 zero scalar") {
  Tensor t;
  CHECK(t.rank() == 0);
  CHECK(t.size() == 1);
  CHECK(t[0] == 0.0f);
}

TEST_CASE("construction validates extents and payload length") {
  CHECK_THROWS_AS(Tensor({2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
  Tensor t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.extent(1) == 3);
  CHECK_THROWS(t.extent(2));
  for (float v : t.data()) CHECK(v == 1.5f);
}

TEST_CASE("at() indexes row-major and rejects out-of-range indices") {
  Tensor t({2, 3, 4});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i);
  CHECK(t.at({1, 2, 3}) == 23.0f);
  CHECK(t.at({0, 1, 0}) == 4.0f);
  CHECK_THROWS(t.at({2, 0, 0}));
  CHECK_THROWS(t.at({0, 0}));
}

TEST_CASE("reshape keeps data and checks the element count") {
  Tensor t({2, 6});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i);
  const Tensor r = t.reshape({3, 4});
  CHECK(r.shape() == Shape{3, 4});
  CHECK(std::equal(r.data().begin(), r.data().end(), t.data().begin()));
  CHECK_THROWS_AS(t.reshape({5, 2}), ShapeError);
}

TEST_CASE("elementwise ops match scalar loops; scalar broadcast only") {
  std::mt19937_64 rng(1);
  const Tensor a = testing::random_tensor({3, 4}, rng), b = testing::random_tensor({3, 4}, rng);
  const Tensor s = add(a, b), d = sub(a, b), m = mul(a, b);
  const Tensor r = elementwise(ElementwiseOp::max0, a), th = elementwise(ElementwiseOp::tanh, a);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(s[i] == a[i] + b[i]);
    CHECK(d[i] == a[i] - b[i]);
    CHECK(m[i] == a[i] * b[i]);
    CHECK(r[i] == (a[i] > 0 ? a[i] : 0.0f));
    CHECK(th[i] == doctest::Approx(std::tanh(a[i])));
  }
  const Tensor two({}, {2.0f});
  const Tensor scaled = mul(a, two);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(scaled[i] == 2.0f * a[i]);

  const Tensor wrong({4, 3});
  try {
    add(a, wrong);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(3, 4)") != std::string::npos);
    CHECK(msg.find("(4, 3)") != std::string::npos);
  }
}

TEST_CASE("reduce_mean over axis subsets matches direct loops") {
  std::mt19937_64 rng(2);
  const TensorD x = testing::random_tensor<double>({2, 3, 4}, rng);

  const TensorD m1 = reduce_mean(x, {1});
  CHECK(m1.shape() == Shape{2, 4});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < 3; ++j) s += x.at({i, j, k});
      CHECK(m1.at({i, k}) == doctest::Approx(s / 3.0).epsilon(1e-14));
    }

  const TensorD m02 = reduce_mean(x, {0, 2});
  CHECK(m02.shape() == Shape{3});
  for (std::size_t j = 0; j < 3; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t k = 0; k < 4; ++k) s += x.at({i, j, k});
    CHECK(m02[j] == doctest::Approx(s / 8.0).epsilon(1e-14));
  }

  CHECK(reduce_mean(x, {}) == x);
  const TensorD all = reduce_mean(x, {0, 1, 2});
  CHECK(all.rank() == 0);
  double s = 0.0;
  for (double v : x.data()) s += v;
  CHECK(all[0] == doctest::Approx(s / 24.0).epsilon(1e-14));
  CHECK_THROWS_AS(reduce_mean(x, {3}), ShapeError);
}

TEST_CASE("gemm matches a naive triple loop for every transpose combination") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d;
  const std::size_t m = 5, n = 7, k = 19;
  std::vector<double> a(m * k), b(k * n);
  for (auto& v : a) v = d(rng);
  for (auto& v : b) v = d(rng);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      const auto want = naive_gemm(ta, tb, m, n, k, a, b);
      std::vector<double> c(m * n, 1.0);
      gemm(ta, tb, m, n, k, a.data(), b.data(), c.data(), false);
      for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-12));
      std::vector<double> acc(m * n, 1.0);
      gemm(ta, tb, m, n, k, a.data(), b.data(), acc.data(), true);
      for (std::size_t i = 0; i < c.size(); ++i) CHECK(acc[i] == doctest::Approx(want[i] + 1.0).epsilon(1e-12));
    }
}

TEST_CASE("gemm propagates NaN from zero-times-NaN products") {
  const std::vector<float> a{0.0f, 1.0f};
  const std::vector<float> b{std::numeric_limits<float>::quiet_NaN(), 2.0f};
  float c = 0.0f;
  gemm(false, false, 1, 1, 2, a.data(), b.data(), &c, false);
  CHECK(std::isnan(c));
}

TEST_CASE("matmul, transpose and concat_columns") {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b({3, 2}, {7, 8, 9, 10, 11, 12});
  CHECK(matmul(a, b) == Tensor({2, 2}, {58, 64, 139, 154}));
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK(transpose(a) == Tensor({3, 2}, {1, 4, 2, 5, 3, 6}));
  const Tensor c({2, 1}, {9, 10});
  CHECK(concat_columns(a, c) == Tensor({2, 4}, {1, 2, 3, 9, 4, 5, 6, 10}));
  CHECK_THROWS_AS(concat_columns(a, b), ShapeError);
}

TEST_CASE("all_finite and cast") {
  Tensor t({3}, {1.0f, 2.0f, 3.0f});
  CHECK(all_finite(t));
  t[1] = std::numeric_limits<float>::infinity();
  CHECK_FALSE(all_finite(t));
  t[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(all_finite(t));
  const TensorD d = Tensor({2}, {0.5f, -1.25f}).cast<double>();
  CHECK(d == TensorD({2}, {0.5, -1.25}));
}
