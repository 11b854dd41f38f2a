#include "sawnet/ops.hpp"

#include <algorithm>
#include <cstring>
#include <memory>

#include "sawnet/kernels.hpp"

namespace sawnet {
namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.raw();
  const T* s = src.raw();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() < 2 || bv.rank() < 2)
    throw DimensionError("matmul needs rank >= 2 operands, got " + to_string(av.shape()) + " x " +
                         to_string(bv.shape()));
  const std::size_t m = av.shape()[av.rank() - 2], p = av.shape()[av.rank() - 1];
  const std::size_t p2 = bv.shape()[bv.rank() - 2], q = bv.shape()[bv.rank() - 1];
  if (p != p2)
    throw DimensionError("matmul inner extents differ: " + to_string(av.shape()) + " x " +
                         to_string(bv.shape()));

  Shape abatch(av.shape().begin(), av.shape().end() - 2);
  Shape bbatch(bv.shape().begin(), bv.shape().end() - 2);
  const std::size_t rank = std::max(abatch.size(), bbatch.size());
  abatch.insert(abatch.begin(), rank - abatch.size(), 1);
  bbatch.insert(bbatch.begin(), rank - bbatch.size(), 1);
  Shape batch(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (abatch[i] != bbatch[i] && abatch[i] != 1 && bbatch[i] != 1)
      throw DimensionError("matmul batch extents not broadcastable: " + to_string(av.shape()) +
                           " x " + to_string(bv.shape()));
    batch[i] = std::max(abatch[i], bbatch[i]);
  }
  const std::size_t nbatch = element_count(batch);

  // Flat block offsets of a and b for every broadcast batch index.
  auto offsets = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(nbatch);
  for (std::size_t flat = 0; flat < nbatch; ++flat) {
    std::size_t rem = flat, ai = 0, bi = 0, astride = 1, bstride = 1;
    for (std::size_t d = rank; d-- > 0;) {
      const std::size_t idx = rem % batch[d];
      rem /= batch[d];
      ai += (abatch[d] == 1 ? 0 : idx) * astride;
      bi += (bbatch[d] == 1 ? 0 : idx) * bstride;
      astride *= abatch[d];
      bstride *= bbatch[d];
    }
    (*offsets)[flat] = {ai * m * p, bi * p * q};
  }

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(q);
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < nbatch; ++i)
    kernels::gemm(m, q, p, av.raw() + (*offsets)[i].first, p, bv.raw() + (*offsets)[i].second, q,
                  out.raw() + i * m * q, q, false);

  Tape<T>& tape = a.tape();
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib},
                     [&tape, ia, ib, offsets, m, p, q](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       const auto& av = tape.value(ia);
                       const auto& bv = tape.value(ib);
                       std::vector<T> bt(p * q);
                       for (std::size_t i = 0; i < offsets->size(); ++i) {
                         const auto [ao, bo] = (*offsets)[i];
                         const T* gi = g.raw() + i * m * q;
                         if (gin[0]) {
                           kernels::transpose(p, q, bv.raw() + bo, bt.data());
                           kernels::gemm(m, p, q, gi, q, bt.data(), p, gin[0]->raw() + ao, p, true);
                         }
                         if (gin[1])
                           kernels::gemm_tn(p, q, m, av.raw() + ao, p, gi, q, gin[1]->raw() + bo, q, true);
                       }
                     });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same_shape("add", av, bv);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                           if (gin[0]) add_into(*gin[0], g);
                           if (gin[1]) add_into(*gin[1], g);
                         });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same_shape("sub", av, bv);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape().record(std::move(out), {a.id(), b.id()},
                         [](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                           if (gin[0]) add_into(*gin[0], g);
                           if (gin[1])
                             for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
                         });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same_shape("mul", av, bv);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tape<T>& tape = a.tape();
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib},
                     [&tape, ia, ib](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       const auto& av = tape.value(ia);
                       const auto& bv = tape.value(ib);
                       if (gin[0])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * bv[i];
                       if (gin[1])
                         for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * av[i];
                     });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return a.tape().record(std::move(out), {a.id()},
                         [s](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * s;
                         });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  T acc = 0;
  for (auto v : av.data()) acc += v;
  return a.tape().record(Tensor<T>::scalar(acc), {a.id()},
                         [](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                           const T gv = g[0];
                           for (auto& v : gin[0]->data()) v += gv;
                         });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T{1} / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> relu(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  Tape<T>& tape = x.tape();
  const T* src = xv.raw();
  T* dst = out.raw();
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] > T{0} ? src[i] : T{0};
  if (tape.tracks_branches()) {
    std::uint64_t h = 0;
    for (std::size_t i = 0; i < n; ++i) h = h * 0x100000001b3ULL + (src[i] > T{0} ? 1u : 2u);
    tape.note_branch(h);
  }
  const NodeId ix = x.id();
  return tape.record(std::move(out), {ix},
                     [&tape, ix](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       const T* xs = tape.value(ix).raw();
                       const T* gs = g.raw();
                       T* d = gin[0]->raw();
                       for (std::size_t i = 0, n = g.size(); i < n; ++i) d[i] += xs[i] > T{0} ? gs[i] : T{0};
                     });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (wv.rank() != 2 || xv.rank() < 1 || xv.shape().back() != wv.shape()[0])
    throw DimensionError("linear: input " + to_string(xv.shape()) + " does not match weight " +
                         to_string(wv.shape()));
  const std::size_t cin = wv.shape()[0], cout = wv.shape()[1];
  const std::size_t rows = xv.size() / cin;
  Shape out_shape = xv.shape();
  out_shape.back() = cout;
  Tensor<T> out(out_shape);
  const bool has_bias = b.valid();
  if (has_bias) {
    const auto& bv = b.value();
    if (bv.rank() != 1 || bv.shape()[0] != cout)
      throw DimensionError("linear: bias " + to_string(bv.shape()) + " vs output width " +
                           std::to_string(cout));
    for (std::size_t r = 0; r < rows; ++r) std::memcpy(out.raw() + r * cout, bv.raw(), cout * sizeof(T));
  }
  kernels::gemm(rows, cout, cin, xv.raw(), cin, wv.raw(), cout, out.raw(), cout, has_bias);

  Tape<T>& tape = x.tape();
  const NodeId ix = x.id(), iw = w.id();
  std::vector<NodeId> inputs{ix, iw};
  if (has_bias) inputs.push_back(b.id());
  return tape.record(std::move(out), std::move(inputs),
                     [&tape, ix, iw, rows, cin, cout](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       const auto& xv = tape.value(ix);
                       const auto& wv = tape.value(iw);
                       if (gin[0]) {
                         std::vector<T> wt(cin * cout);
                         kernels::transpose(cin, cout, wv.raw(), wt.data());
                         kernels::gemm(rows, cin, cout, g.raw(), cout, wt.data(), cin, gin[0]->raw(), cin, true);
                       }
                       if (gin[1]) kernels::gemm_tn(cin, cout, rows, xv.raw(), cin, g.raw(), cout, gin[1]->raw(), cout, true);
                       if (gin.size() > 2 && gin[2]) {
                         T* gb = gin[2]->raw();
                         for (std::size_t r = 0; r < rows; ++r) {
                           const T* gr = g.raw() + r * cout;
                           for (std::size_t o = 0; o < cout; ++o) gb[o] += gr[o];
                         }
                       }
                     });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  const auto& xv = x.value();
  if (element_count(shape) != xv.size())
    throw DimensionError("reshape " + to_string(xv.shape()) + " -> " + to_string(shape));
  return x.tape().record(xv.reshaped(std::move(shape)), {x.id()},
                         [](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                           T* d = gin[0]->raw();
                           for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                         });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size())
    throw DimensionError("concat axis " + std::to_string(axis) + " out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw DimensionError("concat: " + to_string(s) + " incompatible with " + to_string(first));
    out_shape[axis] += s[axis];
  }
  const AxisSplit os = split_at(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<NodeId> ids;
  auto widths = std::make_shared<std::vector<std::size_t>>();
  std::size_t at = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    const std::size_t w = pv.shape()[axis] * os.inner;
    for (std::size_t o = 0; o < os.outer; ++o)
      std::memcpy(out.raw() + o * os.extent * os.inner + at, pv.raw() + o * w, w * sizeof(T));
    at += w;
    ids.push_back(p.id());
    widths->push_back(w);
  }
  Tape<T>& tape = parts[0].tape();
  return tape.record(std::move(out), std::move(ids),
                     [os, widths](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                       std::size_t at = 0;
                       for (std::size_t k = 0; k < gin.size(); ++k) {
                         const std::size_t w = (*widths)[k];
                         if (gin[k])
                           for (std::size_t o = 0; o < os.outer; ++o) {
                             const T* src = g.raw() + o * os.extent * os.inner + at;
                             T* dst = gin[k]->raw() + o * w;
                             for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
                           }
                         at += w;
                       }
                     });
}

template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  if (axis >= xv.rank() || begin >= end || end > xv.shape()[axis])
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + to_string(xv.shape()));
  const AxisSplit is = split_at(xv.shape(), axis);
  Shape out_shape = xv.shape();
  out_shape[axis] = end - begin;
  Tensor<T> out(out_shape);
  const std::size_t w = (end - begin) * is.inner, off = begin * is.inner;
  for (std::size_t o = 0; o < is.outer; ++o)
    std::memcpy(out.raw() + o * w, xv.raw() + o * is.extent * is.inner + off, w * sizeof(T));
  return x.tape().record(std::move(out), {x.id()},
                         [is, w, off](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                           for (std::size_t o = 0; o < is.outer; ++o) {
                             T* dst = gin[0]->raw() + o * is.extent * is.inner + off;
                             const T* src = g.raw() + o * w;
                             for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
                           }
                         });
}

template <typename T>
MaxResult<T> reduce_max(Var<T> x, std::size_t axis) {
  const auto& xv = x.value();
  if (axis >= xv.rank())
    throw DimensionError("reduce_max axis " + std::to_string(axis) + " out of range for " +
                         to_string(xv.shape()));
  const AxisSplit s = split_at(xv.shape(), axis);
  Shape out_shape = xv.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(out_shape);
  IndexTensor arg(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const T* base = xv.raw() + o * s.extent * s.inner;
    T* ov = out.raw() + o * s.inner;
    std::int64_t* oa = arg.raw() + o * s.inner;
    std::copy(base, base + s.inner, ov);
    std::fill(oa, oa + s.inner, 0);
    for (std::size_t e = 1; e < s.extent; ++e) {
      const T* row = base + e * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i)
        if (row[i] > ov[i]) {
          ov[i] = row[i];
          oa[i] = static_cast<std::int64_t>(e);
        }
    }
  }
  Tape<T>& tape = x.tape();
  if (tape.tracks_branches()) {
    std::uint64_t h = 0;
    for (auto a : arg.data()) h = h * 0x100000001b3ULL + static_cast<std::uint64_t>(a) + 1;
    tape.note_branch(h);
  }
  auto winners = std::make_shared<IndexTensor>(arg);
  Var<T> values = tape.record(std::move(out), {x.id()},
                              [s, winners](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                                T* dst = gin[0]->raw();
                                const std::int64_t* w = winners->raw();
                                for (std::size_t o = 0; o < s.outer; ++o)
                                  for (std::size_t i = 0; i < s.inner; ++i) {
                                    const std::size_t slot = o * s.inner + i;
                                    dst[(o * s.extent + static_cast<std::size_t>(w[slot])) * s.inner + i] += g[slot];
                                  }
                              });
  return {values, std::move(arg)};
}

template <typename T>
Var<T> dropout(Var<T> x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::eval || rate == 0.0) return x;
  const auto& xv = x.value();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(xv.size());
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = uniform01(rng) < rate ? T{0} : keep_scale;
    out[i] = xv[i] * (*mask)[i];
  }
  return x.tape().record(std::move(out), {x.id()},
                         [mask](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * (*mask)[i];
                         });
}

template <typename T>
Var<T> broadcast_rows(Var<T> x, std::size_t n) {
  const auto& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("broadcast_rows needs [B, M], got " + to_string(xv.shape()));
  const std::size_t b = xv.shape()[0], m = xv.shape()[1];
  Tensor<T> out({b, n, m});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t r = 0; r < n; ++r) std::memcpy(out.raw() + (i * n + r) * m, xv.raw() + i * m, m * sizeof(T));
  return x.tape().record(std::move(out), {x.id()},
                         [b, n, m](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                           for (std::size_t i = 0; i < b; ++i)
                             for (std::size_t r = 0; r < n; ++r) {
                               const T* src = g.raw() + (i * n + r) * m;
                               T* dst = gin[0]->raw() + i * m;
                               for (std::size_t c = 0; c < m; ++c) dst[c] += src[c];
                             }
                         });
}

#define SAWNET_INSTANTIATE_OPS(T)                                                    \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                         \
  template Var<T> add<T>(Var<T>, Var<T>);                                            \
  template Var<T> sub<T>(Var<T>, Var<T>);                                            \
  template Var<T> mul<T>(Var<T>, Var<T>);                                            \
  template Var<T> scale<T>(Var<T>, T);                                               \
  template Var<T> sum<T>(Var<T>);                                                    \
  template Var<T> mean<T>(Var<T>);                                                   \
  template Var<T> relu<T>(Var<T>);                                                   \
  template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                                 \
  template Var<T> reshape<T>(Var<T>, Shape);                                         \
  template Var<T> concat<T>(std::span<const Var<T>>, std::size_t);                   \
  template Var<T> slice<T>(Var<T>, std::size_t, std::size_t, std::size_t);           \
  template MaxResult<T> reduce_max<T>(Var<T>, std::size_t);                          \
  template Var<T> dropout<T>(Var<T>, double, Mode, Rng&);                            \
  template Var<T> broadcast_rows<T>(Var<T>, std::size_t);

SAWNET_INSTANTIATE_OPS(float)
SAWNET_INSTANTIATE_OPS(double)

}  // namespace sawnet
