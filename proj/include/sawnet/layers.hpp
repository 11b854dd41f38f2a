#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sawnet/ops.hpp"
#include "sawnet/rng.hpp"
#include "sawnet/tape.hpp"

namespace sawnet {

enum class TensorRole { parameter, buffer };

// Visitor over the named tensors of a model. Parameters are trained;
// buffers (batch-norm running statistics) are only persisted.
template <typename T>
using TensorVisitor = std::function<void(const std::string& name, Tensor<T>& tensor, TensorRole role)>;

// State shared by one forward pass: the tape, the mode, the dropout stream,
// and the parameter tensors bound as leaves so far.
template <typename T>
class Context {
 public:
  Context(Tape<T>& tape, Mode mode, Rng& rng) : tape_(tape), mode_(mode), rng_(rng) {}

  Tape<T>& tape() noexcept { return tape_; }
  Mode mode() const noexcept { return mode_; }
  Rng& rng() noexcept { return rng_; }

  // Leaf for a parameter tensor; the same tensor always maps to the same leaf.
  Var<T> bind(Tensor<T>& param) {
    auto it = bound_.find(&param);
    if (it != bound_.end()) return Var<T>(&tape_, it->second);
    Var<T> v = tape_.leaf(param);
    bound_.emplace(&param, v.id());
    order_.emplace_back(&param, v.id());
    return v;
  }

  Var<T> input(Tensor<T> value) { return tape_.constant(std::move(value)); }

  // Bound parameters in binding order.
  const std::vector<std::pair<Tensor<T>*, NodeId>>& bindings() const noexcept { return order_; }

 private:
  Tape<T>& tape_;
  Mode mode_;
  Rng& rng_;
  std::unordered_map<const Tensor<T>*, NodeId> bound_;
  std::vector<std::pair<Tensor<T>*, NodeId>> order_;
};

// Glorot-uniform bound sqrt(6 / (fan_in + fan_out)).
double glorot_limit(std::size_t fan_in, std::size_t fan_out);

template <typename T>
Tensor<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

// Pointwise affine map C_in -> C_out shared by every point (and neighbour slot).
template <typename T>
struct SharedMlpParams {
  Tensor<T> weight;  // [C_in, C_out]
  Tensor<T> bias;    // [C_out]

  static SharedMlpParams glorot(std::size_t cin, std::size_t cout, Rng& rng);
  std::size_t in_width() const { return weight.shape()[0]; }
  std::size_t out_width() const { return weight.shape()[1]; }
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
};

template <typename T>
using DenseParams = SharedMlpParams<T>;

template <typename T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T decay = T(0.7);
  T epsilon = T(1e-5);

  static BatchNormState make(std::size_t channels, double decay = 0.7, double epsilon = 1e-5);
  std::size_t channels() const { return gamma.size(); }
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
};

// g independent blocks; the block-diagonal assembly is the equivalent
// shared-MLP weight.
template <typename T>
struct GroupedMlpParams {
  std::size_t groups = 1;
  Tensor<T> weight;  // [g, C_in/g, C_out/g]
  Tensor<T> bias;    // [C_out]

  static GroupedMlpParams glorot(std::size_t cin, std::size_t cout, std::size_t groups, Rng& rng);
  std::size_t in_width() const { return groups * weight.shape()[1]; }
  std::size_t out_width() const { return groups * weight.shape()[2]; }
  Tensor<T> block_diagonal() const;
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
};

// Stage 1: one affine map per point position (not permutation-equivariant);
// stage 2: a shared MLP over the stage-1 outputs.
template <typename T>
struct DepthwiseMlpParams {
  Tensor<T> point_weight;  // [N, C_in, C_mid]
  Tensor<T> point_bias;    // [C_mid]
  SharedMlpParams<T> mix;  // C_mid -> C_out

  static DepthwiseMlpParams glorot(std::size_t points, std::size_t cin, std::size_t cmid, std::size_t cout,
                                   Rng& rng);
  std::size_t points() const { return point_weight.shape()[0]; }
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
};

template <typename T>
Var<T> shared_mlp(Context<T>& ctx, Var<T> x, SharedMlpParams<T>& p);

template <typename T>
Var<T> dense(Context<T>& ctx, Var<T> x, DenseParams<T>& p) {
  return shared_mlp(ctx, x, p);
}

// Normalizes over every axis but the last (channel) axis. Train mode uses
// batch statistics and folds them into the running averages; eval mode uses
// the running averages and leaves the state untouched.
template <typename T>
Var<T> batch_norm(Context<T>& ctx, Var<T> x, BatchNormState<T>& s);

template <typename T>
Var<T> dropout(Context<T>& ctx, Var<T> x, double rate) {
  return dropout(x, rate, ctx.mode(), ctx.rng());
}

template <typename T>
Var<T> grouped_shared_mlp(Context<T>& ctx, Var<T> x, GroupedMlpParams<T>& p);

template <typename T>
Var<T> depthwise_shared_mlp(Context<T>& ctx, Var<T> x, DepthwiseMlpParams<T>& p);

}  // namespace sawnet
