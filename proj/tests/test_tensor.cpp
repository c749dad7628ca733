#include <gtest/gtest.h>

#include "made/random.hpp"
#include "made/tensor.hpp"

using namespace made;

namespace {

std::vector<double> randn(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST(Tensor, ShapeAndFactories) {
  Tensor t = Tensor::zeros({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(Tensor::full({2}, 1.5)[1], 1.5);
  EXPECT_EQ(Tensor::identity(3).at(2, 2), 1.0);
  EXPECT_EQ(Tensor::identity(3).at(0, 2), 0.0);
  EXPECT_EQ(Tensor::scalar(4.0).item(), 4.0);
  EXPECT_EQ(Tensor::matrix({{1, 2}, {3, 4}}).at(1, 0), 3.0);
}

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), DimensionError);
  EXPECT_THROW(Tensor::zeros({2}).item(), DimensionError);
}

TEST(Tensor, FinitenessAndEquality) {
  Tensor a = Tensor::vector({1.0, 2.0});
  EXPECT_TRUE(a.all_finite());
  Tensor b = a;
  EXPECT_EQ(a, b);
  b[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(b.all_finite());
  EXPECT_FALSE(a == Tensor::vector({1.0, 2.0, 3.0}));
}

TEST(Kernels, GemmVariantsMatchNaiveProducts) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(9), k = 1 + rng.uniform_index(9), p = 1 + rng.uniform_index(9);
    const auto a = randn(rng, n * k), b = randn(rng, k * p), bt = randn(rng, p * k), at = randn(rng, k * n);
    std::vector<double> c(n * p), want(n * p, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p; ++j)
        for (std::size_t q = 0; q < k; ++q) want[i * p + j] += a[i * k + q] * b[q * p + j];
    kernel::gemm_nn(a.data(), b.data(), c.data(), n, k, p, false);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], want[i], 1e-12);

    // A[n,k]·Bt[p,k]^T
    std::vector<double> c2(n * p), want2(n * p, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p; ++j)
        for (std::size_t q = 0; q < k; ++q) want2[i * p + j] += a[i * k + q] * bt[j * k + q];
    kernel::gemm_nt(a.data(), bt.data(), c2.data(), n, k, p, false);
    for (std::size_t i = 0; i < c2.size(); ++i) EXPECT_NEAR(c2[i], want2[i], 1e-12);

    // At[k,n]^T·B[k,p]
    std::vector<double> c3(n * p), want3(n * p, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p; ++j)
        for (std::size_t q = 0; q < k; ++q) want3[i * p + j] += at[q * n + i] * b[q * p + j];
    kernel::gemm_tn(at.data(), b.data(), c3.data(), k, n, p, false);
    for (std::size_t i = 0; i < c3.size(); ++i) EXPECT_NEAR(c3[i], want3[i], 1e-12);
  }
}

TEST(Kernels, AccumulateAddsIntoOutput) {
  const std::vector<double> a = {1, 2}, b = {3, 4};
  std::vector<double> c = {10.0};
  kernel::gemm_nn(a.data(), b.data(), c.data(), 1, 2, 1, true);
  EXPECT_EQ(c[0], 21.0);
  kernel::gemm_nt(a.data(), b.data(), c.data(), 1, 2, 1, true);
  EXPECT_EQ(c[0], 32.0);
}

TEST(Kernels, DotHandlesRemainders) {
  for (std::size_t n = 0; n < 11; ++n) {
    std::vector<double> x(n), y(n);
    double want = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(i + 1);
      y[i] = 0.5 * static_cast<double>(i);
      want += x[i] * y[i];
    }
    EXPECT_DOUBLE_EQ(kernel::dot(x.data(), y.data(), n), want);
  }
}

TEST(Rng, DeterministicAndRestorable) {
  Rng a(42), b(42);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(a.next(), b.next());
  const std::string s = a.state();
  const auto x = a.uniform_index(1000);
  Rng c;
  c.set_state(s);
  EXPECT_EQ(c.uniform_index(1000), x);
  EXPECT_THROW(c.set_state("not a state"), std::invalid_argument);
}

TEST(Rng, UniformIndexStaysInRange) {
  Rng r(1);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 5000; ++i) ++counts[r.uniform_index(5)];
  for (int c : counts) EXPECT_GT(c, 800);
  EXPECT_EQ(r.uniform_index(1), 0u);
  for (int i = 0; i < 100; ++i) {
    const double u = r.uniform01();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}
