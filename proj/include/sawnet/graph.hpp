#pragma once

#include <cstdint>
#include <vector>

#include "sawnet/ops.hpp"
#include "sawnet/tensor.hpp"

namespace sawnet {

// k-nearest-neighbour table over a batch of clouds, computed in whatever
// feature space the features live in.
struct NeighborGraph {
  std::size_t batch = 0;
  std::size_t points = 0;
  std::size_t k = 0;
  std::size_t space_dim = 0;
  std::vector<std::int32_t> indices;  // [batch, points, k]

  std::int32_t at(std::size_t b, std::size_t i, std::size_t j) const { return indices[(b * points + i) * k + j]; }
  std::uint64_t hash() const;
};

// Squared Euclidean distance over the full feature vector; self excluded;
// ties broken by lower index. Requires points > k >= 1.
template <typename T>
NeighborGraph knn(const Tensor<T>& features, std::size_t k);

// Same contract on the serial reference kernel.
template <typename T>
NeighborGraph knn_reference(const Tensor<T>& features, std::size_t k);

// [B, N, C] -> [B, N, k, 2C] with slot (i, j) = [x_i | x_{n(i,j)} - x_i].
template <typename T>
Var<T> edge_features(Var<T> x, const NeighborGraph& graph);

// shared_mlp(edge_features(x, graph)) without materialising the edge
// tensor: with W = [W_c ; W_o] split by rows,
//   [x_i | x_j - x_i] W + b = x_i (W_c - W_o) + b + x_j W_o,
// so both projections run per point and only the sum is per edge.
template <typename T>
Var<T> edge_linear(Var<T> x, const NeighborGraph& graph, Var<T> weight, Var<T> bias);

// Max over the neighbour axis: [B, N, k, M] -> [B, N, M].
template <typename T>
Var<T> neighbor_max(Var<T> e);

}  // namespace sawnet
