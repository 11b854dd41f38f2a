#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sawnet/error.hpp"
#include "sawnet/rng.hpp"
#include "sawnet/tensor.hpp"

namespace sawnet {

using NodeId = std::size_t;

template <typename T>
class Tape;

// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, NodeId id) : tape_(tape), id_(id) {}

  NodeId id() const noexcept { return id_; }
  Tape<T>& tape() const noexcept { return *tape_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  NodeId id_ = 0;
};

// Leaf id -> dLoss/dLeaf.
template <typename T>
using GradientMap = std::map<NodeId, Tensor<T>>;

// Records one forward pass. Each entry keeps its output value (the saved
// activation) and a rule that adds its contribution to the input gradients.
// Tapes are single-use: backward() may run once, after which the tape is
// spent and should be dropped.
template <typename T>
class Tape {
 public:
  // grad_in[i] is the accumulator for input i, or nullptr when that input
  // does not need a gradient. Rules must accumulate (+=), never assign:
  // the same node may appear as several inputs.
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, std::span<Tensor<T>* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value) { return push(std::move(value), {}, nullptr, true, true); }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, nullptr, false, false); }

  Var<T> record(Tensor<T> value, std::vector<NodeId> inputs, BackwardFn backward) {
    bool needs = false;
    for (auto in : inputs) needs = needs || nodes_.at(in).requires_grad;
    if (!needs) backward = nullptr;
    return push(std::move(value), std::move(inputs), std::move(backward), needs, false);
  }

  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  bool is_leaf(NodeId id) const { return id < nodes_.size() && nodes_[id].is_leaf; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  // Branch tracking folds every data-dependent discrete choice (ReLU masks,
  // max winners, neighbour tables) into one signature so finite-difference
  // checks can tell when a perturbation crossed a kink.
  void set_branch_tracking(bool on) noexcept { track_branches_ = on; }
  bool tracks_branches() const noexcept { return track_branches_; }
  void note_branch(std::uint64_t h) noexcept { signature_ = splitmix64(signature_ ^ h); }
  std::uint64_t branch_signature() const noexcept { return signature_; }

  GradientMap<T> backward(Var<T> loss, std::span<const NodeId> leaves) {
    if (consumed_) throw ContractError("backward called twice on the same tape");
    if (&loss.tape() != this || loss.id() >= nodes_.size())
      throw ContractError("loss was not recorded on this tape");
    const auto& lv = nodes_[loss.id()].value;
    if (lv.rank() != 0)
      throw ContractError("backward needs a rank-0 loss, got shape " + to_string(lv.shape()));
    for (auto leaf_id : leaves)
      if (!is_leaf(leaf_id))
        throw UnknownLeafError("node " + std::to_string(leaf_id) + " is not a leaf of this tape");

    std::vector<std::optional<Tensor<T>>> grads(loss.id() + 1);
    grads[loss.id()] = Tensor<T>::scalar(T{1});
    std::vector<Tensor<T>*> ptrs;
    for (NodeId id = loss.id() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!grads[id] || !node.backward) continue;
      ptrs.clear();
      for (auto in : node.inputs) {
        if (!nodes_[in].requires_grad) {
          ptrs.push_back(nullptr);
          continue;
        }
        if (!grads[in]) grads[in].emplace(nodes_[in].value.shape());
        ptrs.push_back(&*grads[in]);
      }
      node.backward(*grads[id], ptrs);
      node.backward = nullptr;
      grads[id].reset();
    }
    consumed_ = true;

    GradientMap<T> out;
    for (auto leaf_id : leaves) {
      if (leaf_id < grads.size() && grads[leaf_id])
        out.insert_or_assign(leaf_id, std::move(*grads[leaf_id]));
      else
        out.insert_or_assign(leaf_id, Tensor<T>(nodes_[leaf_id].value.shape()));
      if (leaf_id < grads.size()) grads[leaf_id].reset();
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  Var<T> push(Tensor<T> value, std::vector<NodeId> inputs, BackwardFn backward, bool requires_grad,
              bool is_leaf) {
#ifndef NDEBUG
    if (!value.all_finite())
      throw NumericError("non-finite value produced at tape entry " + std::to_string(nodes_.size()) +
                         " (shape " + to_string(value.shape()) + ")");
#endif
    if (consumed_) throw ContractError("recording on a tape after backward");
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), requires_grad, is_leaf});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
  bool track_branches_ = false;
  std::uint64_t signature_ = 0;
};

}  // namespace sawnet
