#include "sawnet/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <utility>
#include <vector>

#include <malloc.h>
#include <omp.h>

namespace sawnet::kernels {
namespace {

// Forward and backward passes allocate and free many multi-megabyte
// tensors. Keep freed blocks in the heap instead of handing them back to the
// kernel and faulting them in again on the next allocation.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();

// Work below this many multiply-adds stays on the calling thread.
constexpr std::size_t kParallelThreshold = 1 << 15;

// 256-bit vectors through the GCC/Clang vector extension. Lane-wise + and *
// round exactly like the scalar ops, so tiles agree bit-for-bit with a plain
// triple loop summing in p order.
template <typename T>
struct Simd {
  static constexpr std::size_t lanes = 32 / sizeof(T);
  typedef T type __attribute__((vector_size(32)));
  static type load(const T* p) {
    type v;
    std::memcpy(&v, p, sizeof v);
    return v;
  }
  static void store(T* p, type v) { std::memcpy(p, &v, sizeof v); }
};

// R x (NV vectors) tile of C: c[r][w] (+)= sum_p a(r, p) * b[p][w], with
// a(r, p) = a[r * ars + p * aps].
template <std::size_t R, std::size_t NV, typename T>
inline void gemm_tile(std::size_t k, const T* a, std::size_t ars, std::size_t aps, const T* b, std::size_t ldb,
                      T* c, std::size_t ldc, bool accumulate) {
  using S = Simd<T>;
  using V = typename S::type;
  V acc[R][NV];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t v = 0; v < NV; ++v) acc[r][v] = accumulate ? S::load(c + r * ldc + v * S::lanes) : V{};
  for (std::size_t p = 0; p < k; ++p) {
    V bv[NV];
    for (std::size_t v = 0; v < NV; ++v) bv[v] = S::load(b + p * ldb + v * S::lanes);
    for (std::size_t r = 0; r < R; ++r) {
      const V s = V{} + a[r * ars + p * aps];
      for (std::size_t v = 0; v < NV; ++v) acc[r][v] += s * bv[v];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t v = 0; v < NV; ++v) S::store(c + r * ldc + v * S::lanes, acc[r][v]);
}

// Single column of an R-row tile.
template <std::size_t R, typename T>
inline void gemm_column(std::size_t k, const T* a, std::size_t ars, std::size_t aps, const T* b, std::size_t ldb,
                        T* c, std::size_t ldc, bool accumulate) {
  T acc[R];
  for (std::size_t r = 0; r < R; ++r) acc[r] = accumulate ? c[r * ldc] : T{0};
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t r = 0; r < R; ++r) acc[r] += a[r * ars + p * aps] * b[p * ldb];
  for (std::size_t r = 0; r < R; ++r) c[r * ldc] = acc[r];
}

// R consecutive output rows, split into register-sized column blocks.
template <std::size_t R, typename T>
inline void gemm_rows(std::size_t n, std::size_t k, const T* a, std::size_t ars, std::size_t aps, const T* b,
                      std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  constexpr std::size_t L = Simd<T>::lanes;
  std::size_t j = 0;
  for (; j + 2 * L <= n; j += 2 * L) gemm_tile<R, 2>(k, a, ars, aps, b + j, ldb, c + j, ldc, accumulate);
  if (j + L <= n) gemm_tile<R, 1>(k, a, ars, aps, b + j, ldb, c + j, ldc, accumulate), j += L;
  for (; j < n; ++j) gemm_column<R>(k, a, ars, aps, b + j, ldb, c + j, ldc, accumulate);
}

constexpr std::size_t kRowBlock = 4;

// Row block `blk` of C = A B (rows 4*blk .. 4*blk+3, fewer at the end).
template <typename T>
inline void gemm_block(std::size_t blk, std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
                       const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  const std::size_t i0 = blk * kRowBlock;
  if (i0 + kRowBlock <= m) {
    gemm_rows<kRowBlock>(n, k, a + i0 * lda, lda, 1, b, ldb, c + i0 * ldc, ldc, accumulate);
  } else {
    for (std::size_t i = i0; i < m; ++i) gemm_rows<1>(n, k, a + i * lda, lda, 1, b, ldb, c + i * ldc, ldc, accumulate);
  }
}

// Row block `blk` of C = A^T B over the reduction range [p0, p1). Visiting
// the range in chunks keeps the slice of B in cache; every element still sums
// in p order.
template <typename T>
inline void gemm_tn_block(std::size_t blk, std::size_t m, std::size_t n, std::size_t p0, std::size_t p1, const T* a,
                          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  const std::size_t i0 = blk * kRowBlock;
  const T* ap = a + p0 * lda;
  const T* bp = b + p0 * ldb;
  if (i0 + kRowBlock <= m) {
    gemm_rows<kRowBlock>(n, p1 - p0, ap + i0, 1, lda, bp, ldb, c + i0 * ldc, ldc, accumulate);
  } else {
    for (std::size_t i = i0; i < m; ++i) gemm_rows<1>(n, p1 - p0, ap + i, 1, lda, bp, ldb, c + i * ldc, ldc, accumulate);
  }
}

std::size_t row_blocks(std::size_t m) { return (m + kRowBlock - 1) / kRowBlock; }

constexpr std::size_t kReductionChunk = 256;

// Brute-force row used by the reference kernel: (distance, index) pairs,
// partially sorted so ties go to the lower index.
template <typename T>
inline void knn_row(std::size_t i, const T* points, std::size_t n, std::size_t dim, std::size_t k,
                    std::vector<std::pair<T, std::int32_t>>& scratch, std::int32_t* out) {
  scratch.clear();
  const T* xi = points + i * dim;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == i) continue;
    const T* xj = points + j * dim;
    T d = 0;
    for (std::size_t c = 0; c < dim; ++c) {
      const T diff = xi[c] - xj[c];
      d += diff * diff;
    }
    scratch.emplace_back(d, static_cast<std::int32_t>(j));
  }
  std::partial_sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k), scratch.end());
  for (std::size_t j = 0; j < k; ++j) out[i * k + j] = scratch[j].second;
}

// Same distances, accumulated channel by channel in the same order but
// vectorised over candidates (columns of the transposed cloud), then a
// running sorted top-k. Candidates arrive by increasing index, so a tie
// never displaces an earlier entry.
template <typename T>
inline void knn_row_fast(std::size_t i, const T* points, const T* columns, std::size_t n, std::size_t dim,
                         std::size_t k, T* dist, std::pair<T, std::int32_t>* best, std::int32_t* out) {
  std::fill(dist, dist + n, T{0});
  const T* xi = points + i * dim;
  for (std::size_t c = 0; c < dim; ++c) {
    const T v = xi[c];
    const T* col = columns + c * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T diff = v - col[j];
      dist[j] += diff * diff;
    }
  }
  std::size_t filled = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == i) continue;
    const T d = dist[j];
    if (filled == k && !(d < best[k - 1].first)) continue;
    std::size_t pos = filled < k ? filled++ : k - 1;
    while (pos > 0 && d < best[pos - 1].first) {
      best[pos] = best[pos - 1];
      --pos;
    }
    best[pos] = {d, static_cast<std::int32_t>(j)};
  }
  for (std::size_t j = 0; j < k; ++j) out[i * k + j] = best[j].second;
}

}  // namespace

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  const std::size_t blocks = row_blocks(m);
  const bool par = m * n * k >= kParallelThreshold && blocks > 1;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t blk = 0; blk < blocks; ++blk) gemm_block(blk, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
             std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  const std::size_t blocks = row_blocks(m);
  const bool par = m * n * k >= kParallelThreshold && blocks > 1;
#pragma omp parallel if (par)
  for (std::size_t p0 = 0; p0 < k || p0 == 0; p0 += kReductionChunk) {
    const std::size_t p1 = std::min(k, p0 + kReductionChunk);
    const bool acc = accumulate || p0 > 0;
    // static schedule: each thread keeps the same rows for every chunk
#pragma omp for schedule(static) nowait
    for (std::size_t blk = 0; blk < blocks; ++blk) gemm_tn_block(blk, m, n, p0, p1, a, lda, b, ldb, c, ldc, acc);
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
}

template <typename T>
void knn(const T* points, std::size_t n, std::size_t dim, std::size_t k, std::int32_t* out) {
  std::vector<T> columns(n * dim);
  transpose(n, dim, points, columns.data());
  const bool par = n * n * dim >= kParallelThreshold;
#pragma omp parallel if (par)
  {
    std::vector<T> dist(n);
    std::vector<std::pair<T, std::int32_t>> best(k);
#pragma omp for schedule(static)
    for (std::size_t i = 0; i < n; ++i)
      knn_row_fast(i, points, columns.data(), n, dim, k, dist.data(), best.data(), out);
  }
}

namespace reference {

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  for (std::size_t blk = 0; blk < row_blocks(m); ++blk) gemm_block(blk, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
             std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  for (std::size_t blk = 0; blk < row_blocks(m); ++blk) gemm_tn_block(blk, m, n, 0, k, a, lda, b, ldb, c, ldc, accumulate);
}

template <typename T>
void knn(const T* points, std::size_t n, std::size_t dim, std::size_t k, std::int32_t* out) {
  std::vector<std::pair<T, std::int32_t>> scratch;
  scratch.reserve(n);
  for (std::size_t i = 0; i < n; ++i) knn_row(i, points, n, dim, k, scratch, out);
}

}  // namespace reference

int max_threads() { return omp_get_max_threads(); }

#define SAWNET_INSTANTIATE_KERNELS(T)                                                           \
  template void gemm<T>(std::size_t, std::size_t, std::size_t, const T*, std::size_t, const T*, \
                        std::size_t, T*, std::size_t, bool);                                    \
  template void gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*, std::size_t,        \
                           const T*, std::size_t, T*, std::size_t, bool);                       \
  template void transpose<T>(std::size_t, std::size_t, const T*, T*);                           \
  template void knn<T>(const T*, std::size_t, std::size_t, std::size_t, std::int32_t*);         \
  template void reference::gemm<T>(std::size_t, std::size_t, std::size_t, const T*,             \
                                   std::size_t, const T*, std::size_t, T*, std::size_t, bool);  \
  template void reference::gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*,          \
                                      std::size_t, const T*, std::size_t, T*, std::size_t,      \
                                      bool);                                                    \
  template void reference::knn<T>(const T*, std::size_t, std::size_t, std::size_t, std::int32_t*);

SAWNET_INSTANTIATE_KERNELS(float)
SAWNET_INSTANTIATE_KERNELS(double)

}  // namespace sawnet::kernels
