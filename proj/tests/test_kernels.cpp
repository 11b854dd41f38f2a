#include <gtest/gtest.h>

#include <cstring>
#include <vector>

#include "sawnet/kernels.hpp"
#include "sawnet/rng.hpp"

using namespace sawnet;

namespace {

template <typename T>
std::vector<T> random_values(std::size_t n, Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(uniform(rng, -1, 1));
  return v;
}

// Triple loop in long double.
template <typename T>
std::vector<long double> naive_gemm(std::size_t m, std::size_t n, std::size_t k, const std::vector<T>& a,
                                    const std::vector<T>& b, bool a_transposed) {
  std::vector<long double> c(m * n, 0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p)
        c[i * n + j] += (long double)(a_transposed ? a[p * m + i] : a[i * k + p]) * b[p * n + j];
  return c;
}

struct GemmShape {
  std::size_t m, n, k;
};

const std::vector<GemmShape> kShapes{{1, 1, 1}, {3, 5, 7}, {17, 9, 33}, {64, 64, 64}, {130, 7, 129}, {5, 300, 2}};

}  // namespace

TEST(Gemm, MatchesLongDoubleLoop) {
  Rng rng = make_rng(1);
  for (auto [m, n, k] : kShapes) {
    auto a = random_values<double>(m * k, rng);
    auto b = random_values<double>(k * n, rng);
    std::vector<double> c(m * n);
    kernels::gemm(m, n, k, a.data(), k, b.data(), n, c.data(), n, false);
    auto want = naive_gemm(m, n, k, a, b, false);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], (double)want[i], 1e-12 * k);
  }
}

TEST(Gemm, TransposedMatchesLongDoubleLoop) {
  Rng rng = make_rng(2);
  for (auto [m, n, k] : kShapes) {
    auto a = random_values<double>(k * m, rng);
    auto b = random_values<double>(k * n, rng);
    std::vector<double> c(m * n);
    kernels::gemm_tn(m, n, k, a.data(), m, b.data(), n, c.data(), n, false);
    auto want = naive_gemm(m, n, k, a, b, true);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], (double)want[i], 1e-12 * k);
  }
}

TEST(Gemm, AccumulateAdds) {
  Rng rng = make_rng(3);
  const std::size_t m = 6, n = 5, k = 4;
  auto a = random_values<double>(m * k, rng);
  auto b = random_values<double>(k * n, rng);
  std::vector<double> c(m * n, 1.0), fresh(m * n);
  kernels::gemm(m, n, k, a.data(), k, b.data(), n, c.data(), n, true);
  kernels::gemm(m, n, k, a.data(), k, b.data(), n, fresh.data(), n, false);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], fresh[i] + 1.0, 1e-14);
}

TEST(Gemm, ParallelIsBitExactWithReference) {
  Rng rng = make_rng(4);
  for (auto [m, n, k] : kShapes) {
    auto a = random_values<float>(m * k, rng);
    auto b = random_values<float>(k * n, rng);
    std::vector<float> par(m * n), ref(m * n), par_t(m * n), ref_t(m * n);
    kernels::gemm(m, n, k, a.data(), k, b.data(), n, par.data(), n, false);
    kernels::reference::gemm(m, n, k, a.data(), k, b.data(), n, ref.data(), n, false);
    EXPECT_EQ(std::memcmp(par.data(), ref.data(), par.size() * sizeof(float)), 0);
    auto at = random_values<float>(k * m, rng);
    kernels::gemm_tn(m, n, k, at.data(), m, b.data(), n, par_t.data(), n, false);
    kernels::reference::gemm_tn(m, n, k, at.data(), m, b.data(), n, ref_t.data(), n, false);
    EXPECT_EQ(std::memcmp(par_t.data(), ref_t.data(), par_t.size() * sizeof(float)), 0);
  }
}

TEST(Transpose, RoundTrip) {
  Rng rng = make_rng(5);
  auto a = random_values<double>(7 * 11, rng);
  std::vector<double> t(a.size()), back(a.size());
  kernels::transpose(7, 11, a.data(), t.data());
  EXPECT_EQ(t[3 * 7 + 2], a[2 * 11 + 3]);
  kernels::transpose(11, 7, t.data(), back.data());
  EXPECT_EQ(back, a);
}

TEST(KnnKernel, ParallelMatchesReference) {
  Rng rng = make_rng(6);
  for (std::size_t n : {2u, 9u, 64u, 257u}) {
    for (std::size_t dim : {1u, 3u, 13u}) {
      auto pts = random_values<double>(n * dim, rng);
      const std::size_t k = std::min<std::size_t>(n - 1, 20);
      std::vector<std::int32_t> par(n * k), ref(n * k);
      kernels::knn(pts.data(), n, dim, k, par.data());
      kernels::reference::knn(pts.data(), n, dim, k, ref.data());
      EXPECT_EQ(par, ref) << "n=" << n << " dim=" << dim;
    }
  }
}
