#pragma once

#include <cstddef>
#include <cstdint>

// Compute kernels. The default namespace holds the OpenMP-parallel versions;
// `reference` holds serial versions of the same arithmetic kept for testing
// and benchmarking. Every output element sees the same sequence of floating
// point operations in both, so results agree bit-exactly for any thread count.
// The parallel gemm_tn walks the reduction in cache-sized chunks and the
// parallel knn vectorises distances over a transposed copy of the cloud.
namespace sawnet::kernels {

// C[m x n] = A[m x k] * B[k x n]   (C += ... when accumulate).
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

// C[m x n] = A^T * B where A is stored k x m   (C += ... when accumulate).
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
             std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

// out[cols x rows] = in[rows x cols]^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out);

// k nearest neighbours of every point in one cloud (points: n x dim),
// self excluded, ordered by (squared distance, index). out: n x k.
template <typename T>
void knn(const T* points, std::size_t n, std::size_t dim, std::size_t k, std::int32_t* out);

namespace reference {

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
             std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

template <typename T>
void knn(const T* points, std::size_t n, std::size_t dim, std::size_t k, std::int32_t* out);

}  // namespace reference

// Number of OpenMP threads the parallel kernels will use.
int max_threads();

}  // namespace sawnet::kernels
