#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sawnet/rng.hpp"
#include "sawnet/tape.hpp"
#include "sawnet/tensor.hpp"

// Differentiable tensor operations. Every op reads its inputs from the tape,
// computes the forward value, and records a backward rule.
namespace sawnet {

enum class Mode { train, eval };

// Batched matrix product over the last two axes; leading (batch) extents
// broadcast numpy-style.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

// Elementwise; shapes must match exactly.
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T s);

// Reductions to a rank-0 scalar.
template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> mean(Var<T> a);

template <typename T>
Var<T> relu(Var<T> x);

// y[..., o] = sum_i x[..., i] w[i, o] + b[o]; bias may be an invalid Var.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b);

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  return concat(std::span<const Var<T>>(parts), axis);
}

template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end);

template <typename T>
struct MaxResult {
  Var<T> values;
  IndexTensor argmax;
};

// Max along `axis` (the axis is dropped). Ties go to the lowest index; the
// backward pass routes each output gradient to its winner only.
template <typename T>
MaxResult<T> reduce_max(Var<T> x, std::size_t axis);

// Inverted dropout. Identity in eval mode or when rate == 0.
template <typename T>
Var<T> dropout(Var<T> x, double rate, Mode mode, Rng& rng);

// [B, M] -> [B, n, M], each row repeated n times.
template <typename T>
Var<T> broadcast_rows(Var<T> x, std::size_t n);

}  // namespace sawnet
