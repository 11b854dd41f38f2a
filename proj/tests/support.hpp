#pragma once

#include <algorithm>
#include <cstring>
#include <numeric>
#include <vector>

#include "sawnet/rng.hpp"
#include "sawnet/tensor.hpp"

namespace sawnet::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(uniform(rng, lo, hi));
  return t;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

// out[b, i, ...] = x[b, perm[i], ...] over axis 1.
template <typename T>
Tensor<T> permute_axis1(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t b = x.dim(0), n = x.dim(1), inner = x.size() / (b * n);
  Tensor<T> out(x.shape());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(x.raw() + (bi * n + perm[i]) * inner, inner, out.raw() + (bi * n + i) * inner);
  return out;
}

template <typename T>
bool same_bits(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.raw(), b.raw(), a.size() * sizeof(T)) == 0;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace sawnet::testing
