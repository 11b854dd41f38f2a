#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

#include "sawnet/error.hpp"
#include "sawnet/tensor.hpp"

// Central-difference gradient oracle. Independent of the tape: it only ever
// evaluates the function.
namespace sawnet {

template <typename T>
Tensor<T> finite_diff(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T step) {
  if (!(step > T{0})) throw ContractError("finite_diff step must be positive");
  Tensor<T> grad(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = x[i];
    probe[i] = orig + step;
    const T fp = f(probe);
    probe[i] = orig - step;
    const T fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm)))
      throw NumericError("finite_diff: non-finite function value at element " + std::to_string(i));
    grad[i] = (fp - fm) / (2 * step);
  }
  return grad;
}

// Function value plus the signature of every discrete choice made while
// computing it (see Tape::note_branch).
template <typename T>
struct Probe {
  T value;
  std::uint64_t signature;
};

// Finite differences for piecewise-smooth functions. Where the central
// stencil would straddle a kink (the branch signature at x+h or x-h differs
// from the one at x) the step is halved; if a clean central stencil is not
// found, a one-sided difference on a side that stays in x's piece is used.
// Elements where neither side stays in x's piece are reported in `unresolved`.
template <typename T>
struct PiecewiseGradient {
  Tensor<T> grad;
  std::size_t one_sided = 0;
  std::size_t unresolved = 0;
};

// With `extrapolate`, a clean stencil at h is refined with one at h/2 from
// the same piece: (4 D(h/2) - D(h)) / 3 cancels the h^2 error term.
template <typename T>
PiecewiseGradient<T> finite_diff_piecewise(const std::function<Probe<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                                           T step, int max_halvings = 4, bool extrapolate = false) {
  if (!(step > T{0})) throw ContractError("finite_diff step must be positive");
  PiecewiseGradient<T> out{Tensor<T>(x.shape())};
  Tensor<T> probe = x;
  const Probe<T> base = f(x);
  auto eval = [&](std::size_t i, T v) {
    probe[i] = v;
    Probe<T> p = f(probe);
    if (!std::isfinite(static_cast<double>(p.value)))
      throw NumericError("finite_diff: non-finite function value at element " + std::to_string(i));
    return p;
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = x[i];
    T h = step;
    bool done = false;
    for (int attempt = 0; attempt <= max_halvings && !done; ++attempt, h /= 2) {
      const Probe<T> fp = eval(i, orig + h);
      const Probe<T> fm = eval(i, orig - h);
      const bool plus_ok = fp.signature == base.signature;
      const bool minus_ok = fm.signature == base.signature;
      if (plus_ok && minus_ok) {
        out.grad[i] = (fp.value - fm.value) / (2 * h);
        if (extrapolate) {
          const Probe<T> hp = eval(i, orig + h / 2);
          const Probe<T> hm = eval(i, orig - h / 2);
          if (hp.signature == base.signature && hm.signature == base.signature)
            out.grad[i] = (4 * ((hp.value - hm.value) / h) - out.grad[i]) / 3;
        }
        done = true;
      } else if (attempt == max_halvings) {
        if (plus_ok) {
          out.grad[i] = (fp.value - base.value) / h;
          ++out.one_sided;
          done = true;
        } else if (minus_ok) {
          out.grad[i] = (base.value - fm.value) / h;
          ++out.one_sided;
          done = true;
        }
      }
    }
    if (!done) {
      out.grad[i] = T{0};
      ++out.unresolved;
    }
    probe[i] = orig;
  }
  return out;
}

}  // namespace sawnet
