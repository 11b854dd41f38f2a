#include "sawnet/graph.hpp"

#include <cstring>
#include <memory>

#include "sawnet/kernels.hpp"

namespace sawnet {
namespace {

template <typename T>
NeighborGraph knn_with(const Tensor<T>& features, std::size_t k,
                       void (*kernel)(const T*, std::size_t, std::size_t, std::size_t, std::int32_t*)) {
  if (features.rank() != 3) throw DimensionError("knn needs [B, N, C] features, got " + to_string(features.shape()));
  const std::size_t b = features.shape()[0], n = features.shape()[1], c = features.shape()[2];
  if (k < 1 || n <= k)
    throw ConfigError("knn needs N > k >= 1, got N=" + std::to_string(n) + " k=" + std::to_string(k));
  NeighborGraph g{b, n, k, c, std::vector<std::int32_t>(b * n * k)};
  for (std::size_t i = 0; i < b; ++i) kernel(features.raw() + i * n * c, n, c, k, g.indices.data() + i * n * k);
  return g;
}

void check_graph(const Shape& s, const NeighborGraph& g, const char* op) {
  if (s.size() != 3 || s[0] != g.batch || s[1] != g.points)
    throw DimensionError(std::string(op) + ": input " + to_string(s) + " does not match graph over " +
                         std::to_string(g.batch) + "x" + std::to_string(g.points) + " points");
  if (g.indices.size() != g.batch * g.points * g.k)
    throw CorruptionError(std::string(op) + ": neighbour table has wrong length");
  for (auto idx : g.indices)
    if (idx < 0 || static_cast<std::size_t>(idx) >= g.points)
      throw CorruptionError(std::string(op) + ": neighbour index " + std::to_string(idx) + " out of range [0," +
                            std::to_string(g.points) + ")");
}

// out[b,i,j,:] = center[b,i,:] + other[b,n(b,i,j),:]
template <typename T>
Var<T> edge_combine(Var<T> center, Var<T> other, const NeighborGraph& graph) {
  const auto& cv = center.value();
  const auto& ov = other.value();
  check_graph(cv.shape(), graph, "edge_combine");
  if (ov.shape() != cv.shape())
    throw DimensionError("edge_combine: " + to_string(cv.shape()) + " vs " + to_string(ov.shape()));
  const std::size_t b = graph.batch, n = graph.points, k = graph.k, m = cv.shape()[2];
  Tensor<T> out({b, n, k, m});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t i = 0; i < n; ++i) {
      const T* c = cv.raw() + (bi * n + i) * m;
      for (std::size_t j = 0; j < k; ++j) {
        const T* o = ov.raw() + (bi * n + static_cast<std::size_t>(graph.at(bi, i, j))) * m;
        T* dst = out.raw() + ((bi * n + i) * k + j) * m;
        for (std::size_t c2 = 0; c2 < m; ++c2) dst[c2] = c[c2] + o[c2];
      }
    }
  auto table = std::make_shared<std::vector<std::int32_t>>(graph.indices);
  return center.tape().record(std::move(out), {center.id(), other.id()},
                              [table, b, n, k, m](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                                for (std::size_t bi = 0; bi < b; ++bi)
                                  for (std::size_t i = 0; i < n; ++i)
                                    for (std::size_t j = 0; j < k; ++j) {
                                      const T* src = g.raw() + ((bi * n + i) * k + j) * m;
                                      if (gin[0]) {
                                        T* dc = gin[0]->raw() + (bi * n + i) * m;
                                        for (std::size_t c = 0; c < m; ++c) dc[c] += src[c];
                                      }
                                      if (gin[1]) {
                                        const auto nb = static_cast<std::size_t>((*table)[(bi * n + i) * k + j]);
                                        T* dot = gin[1]->raw() + (bi * n + nb) * m;
                                        for (std::size_t c = 0; c < m; ++c) dot[c] += src[c];
                                      }
                                    }
                              });
}

}  // namespace

std::uint64_t NeighborGraph::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto i : indices) h = (h ^ static_cast<std::uint32_t>(i)) * 0x100000001b3ULL;
  return h;
}

template <typename T>
NeighborGraph knn(const Tensor<T>& features, std::size_t k) {
  return knn_with<T>(features, k, &kernels::knn<T>);
}

template <typename T>
NeighborGraph knn_reference(const Tensor<T>& features, std::size_t k) {
  return knn_with<T>(features, k, &kernels::reference::knn<T>);
}

template <typename T>
Var<T> edge_features(Var<T> x, const NeighborGraph& graph) {
  const auto& xv = x.value();
  check_graph(xv.shape(), graph, "edge_features");
  const std::size_t b = graph.batch, n = graph.points, k = graph.k, c = xv.shape()[2];
  Tensor<T> out({b, n, k, 2 * c});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t i = 0; i < n; ++i) {
      const T* xi = xv.raw() + (bi * n + i) * c;
      for (std::size_t j = 0; j < k; ++j) {
        const T* xj = xv.raw() + (bi * n + static_cast<std::size_t>(graph.at(bi, i, j))) * c;
        T* dst = out.raw() + ((bi * n + i) * k + j) * 2 * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
          dst[ch] = xi[ch];
          dst[c + ch] = xj[ch] - xi[ch];
        }
      }
    }
  auto table = std::make_shared<std::vector<std::int32_t>>(graph.indices);
  return x.tape().record(std::move(out), {x.id()},
                         [table, b, n, k, c](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                           T* dx = gin[0]->raw();
                           for (std::size_t bi = 0; bi < b; ++bi)
                             for (std::size_t i = 0; i < n; ++i) {
                               T* di = dx + (bi * n + i) * c;
                               for (std::size_t j = 0; j < k; ++j) {
                                 const auto nb = static_cast<std::size_t>((*table)[(bi * n + i) * k + j]);
                                 T* dj = dx + (bi * n + nb) * c;
                                 const T* src = g.raw() + ((bi * n + i) * k + j) * 2 * c;
                                 for (std::size_t ch = 0; ch < c; ++ch) {
                                   di[ch] += src[ch] - src[c + ch];
                                   dj[ch] += src[c + ch];
                                 }
                               }
                             }
                         });
}

template <typename T>
Var<T> edge_linear(Var<T> x, const NeighborGraph& graph, Var<T> weight, Var<T> bias) {
  const auto& xv = x.value();
  check_graph(xv.shape(), graph, "edge_linear");
  const std::size_t c = xv.shape()[2];
  if (weight.value().rank() != 2 || weight.shape()[0] != 2 * c)
    throw DimensionError("edge_linear: weight " + to_string(weight.shape()) + " needs " + std::to_string(2 * c) +
                         " rows for input " + to_string(xv.shape()));
  Var<T> w_center = slice(weight, 0, 0, c);
  Var<T> w_offset = slice(weight, 0, c, 2 * c);
  Var<T> center = linear(x, sub(w_center, w_offset), bias);
  Var<T> other = linear(x, w_offset, Var<T>());
  return edge_combine(center, other, graph);
}

template <typename T>
Var<T> neighbor_max(Var<T> e) {
  if (e.value().rank() != 4) throw DimensionError("neighbor_max needs [B, N, k, M], got " + to_string(e.shape()));
  return reduce_max(e, 2).values;
}

#define SAWNET_INSTANTIATE_GRAPH(T)                                                  \
  template NeighborGraph knn<T>(const Tensor<T>&, std::size_t);                      \
  template NeighborGraph knn_reference<T>(const Tensor<T>&, std::size_t);            \
  template Var<T> edge_features<T>(Var<T>, const NeighborGraph&);                    \
  template Var<T> edge_linear<T>(Var<T>, const NeighborGraph&, Var<T>, Var<T>);      \
  template Var<T> neighbor_max<T>(Var<T>);

SAWNET_INSTANTIATE_GRAPH(float)
SAWNET_INSTANTIATE_GRAPH(double)

}  // namespace sawnet
