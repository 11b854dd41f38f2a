#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sawnet/graph.hpp"
#include "sawnet/layers.hpp"

namespace sawnet {

enum class Task { classify, segment };

enum class Variant {
  sawnet,                        // residual global + local branches combined per layer
  combine_at_end,                // parallel global-only and local-only trunks, pooled then joined
  combine_per_layer_no_residual, // per-layer [G:L] without any identity additions
  pointnet_shared,               // plain shared-MLP point embeddings
  pointnet_grouped,
  pointnet_depthwise,
  pointnet_residual,
};

std::string to_string(Task t);
std::string to_string(Variant v);
Task parse_task(const std::string& s);
Variant parse_variant(const std::string& s);
const std::vector<Variant>& all_variants();

// Channels [0, edgeconv_dims) drive the edge-convolution branch of the first
// layer; all shared_dims channels feed the shared-MLP branch.
struct ChannelSplit {
  std::size_t edgeconv_dims = 3;
  std::size_t shared_dims = 9;
};

struct TransformerConfig {
  bool enabled = true;
  std::vector<std::size_t> widths{64, 128, 1024};
  std::vector<std::size_t> head{512, 256};
};

struct ModelConfig {
  Task task = Task::classify;
  Variant variant = Variant::sawnet;
  std::size_t input_channels = 3;
  std::optional<ChannelSplit> channel_split;
  std::size_t k = 20;
  TransformerConfig transformer;
  std::vector<std::size_t> trunk{64, 64, 128, 256};
  std::size_t aggregate_width = 1024;
  std::vector<std::size_t> head{512, 256};
  std::vector<std::size_t> segment_head{512, 256, 128};
  std::size_t num_classes = 40;
  std::size_t num_parts = 50;
  double dropout = 0.5;
  double bn_decay = 0.7;
  double bn_epsilon = 1e-5;
  bool post_add_activation = true;
  std::size_t groups = 4;
  std::size_t num_points = 1024;  // only the depthwise variant depends on it

  void validate() const;
  // Width the edge-convolution branch of the first layer sees.
  std::size_t edge_input_width() const { return channel_split ? channel_split->edgeconv_dims : input_channels; }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct SawLayerSpec {
  std::size_t in_width = 3;      // input width of the shared-MLP branch
  std::size_t edge_width = 3;    // leading input channels the edge-conv branch uses
  std::size_t branch_width = 64; // M; the layer emits 2M channels
  std::size_t k = 20;
  bool post_add_activation = true;
  bool residual = true;
  std::size_t global_skip_width = 3;
  std::size_t local_skip_width = 3;
  double bn_decay = 0.7;
  double bn_epsilon = 1e-5;
};

// S1 = relu(BN1(h1(x))); S2 = BN2(h2(S1)); G = act(S2 + P(skip)).
template <typename T>
class RSharedMlpBlock {
 public:
  RSharedMlpBlock(std::size_t in_width, std::size_t width, std::size_t skip_width, bool residual,
                  bool post_add_activation, double bn_decay, double bn_epsilon, Rng& rng);

  Var<T> forward(Context<T>& ctx, Var<T> x, Var<T> skip);
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
  std::size_t width() const { return h2.out_width(); }

  SharedMlpParams<T> h1, h2;
  BatchNormState<T> bn1, bn2;
  std::optional<SharedMlpParams<T>> projection;
  bool residual;
  bool post_add_activation;
};

// E1 = relu(BN(e1(edges))); E2 = BN(e2(E1)); L = act(max_k(E2) + P(skip)),
// with edges built on a kNN graph recomputed from x on every call.
template <typename T>
class REdgeConvBlock {
 public:
  REdgeConvBlock(std::size_t in_width, std::size_t width, std::size_t skip_width, std::size_t k, bool residual,
                 bool post_add_activation, double bn_decay, double bn_epsilon, Rng& rng);

  Var<T> forward(Context<T>& ctx, Var<T> x, Var<T> skip);
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
  std::size_t width() const { return e2.out_width(); }

  SharedMlpParams<T> e1, e2;
  BatchNormState<T> bn1, bn2;
  std::optional<SharedMlpParams<T>> projection;
  std::size_t k;
  bool residual;
  bool post_add_activation;
  // Build the [B,N,k,2C] edge tensor explicitly instead of edge_linear.
  bool materialize_edges = false;
};

template <typename T>
class SawLayer {
 public:
  struct Output {
    Var<T> out;     // [G:L], 2M channels
    Var<T> global;  // G
    Var<T> local;   // L
  };

  SawLayer(const SawLayerSpec& spec, Rng& rng);

  Output forward(Context<T>& ctx, Var<T> x, Var<T> global_skip, Var<T> local_skip);
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
  const SawLayerSpec& spec() const { return spec_; }

  RSharedMlpBlock<T> global;
  REdgeConvBlock<T> local;

 private:
  SawLayerSpec spec_;
};

// Layer specs for a stack fed by `in_width` channels: layer 0 takes both
// skips from its input, layer l+1 takes G_l and L_l.
std::vector<SawLayerSpec> saw_stack_specs(std::size_t in_width, std::size_t edge_width,
                                          const std::vector<std::size_t>& widths, std::size_t k, bool residual,
                                          bool post_add_activation, double bn_decay, double bn_epsilon);

template <typename T>
std::vector<typename SawLayer<T>::Output> run_saw_stack(Context<T>& ctx, std::vector<SawLayer<T>>& layers, Var<T> x);

// Regresses a 3x3 matrix per cloud from SAW-Layer features and applies it to
// the xyz channels. The output layer starts at weight 0, bias = I.
template <typename T>
class TransformerNet {
 public:
  struct Output {
    Var<T> aligned;    // [B, N, C]
    Var<T> transform;  // [B, 3, 3]
  };

  TransformerNet(const TransformerConfig& cfg, std::size_t k, bool post_add_activation, double bn_decay,
                 double bn_epsilon, Rng& rng);

  Output forward(Context<T>& ctx, Var<T> points);
  void visit(const std::string& prefix, const TensorVisitor<T>& v);

  std::vector<SawLayer<T>> layers;
  std::vector<DenseParams<T>> head;
  std::vector<BatchNormState<T>> head_bn;
  DenseParams<T> out;
};

// One embedding layer of the PointNet-style baselines.
template <typename T>
struct PointEmbedding {
  enum class Kind { shared, grouped, depthwise, residual };
  Kind kind = Kind::shared;
  std::optional<SharedMlpParams<T>> shared;
  std::optional<GroupedMlpParams<T>> grouped;
  std::optional<DepthwiseMlpParams<T>> depthwise;
  std::optional<BatchNormState<T>> bn;
  std::optional<RSharedMlpBlock<T>> block;

  Var<T> forward(Context<T>& ctx, Var<T> x);
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
};

// shared MLP -> BN -> ReLU to the aggregate width, then max over points.
template <typename T>
struct Aggregator {
  SharedMlpParams<T> mlp;
  BatchNormState<T> bn;
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
};

template <typename T>
class Model {
 public:
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Logits [B, num_classes] or per-point scores [B, N, num_parts].
  Var<T> forward(Context<T>& ctx, Var<T> cloud);
  Var<T> classify_forward(Context<T>& ctx, Var<T> cloud);
  Var<T> segment_forward(Context<T>& ctx, Var<T> cloud);

  // Per-point feature groups before aggregation (one group per pooled vector).
  std::vector<Var<T>> trunk_features(Context<T>& ctx, Var<T> cloud);
  // Concatenated pooled vector, [B, groups * aggregate_width].
  Var<T> pool(Context<T>& ctx, const std::vector<Var<T>>& groups);

  void visit(const TensorVisitor<T>& v);
  std::size_t parameter_count();

  std::optional<TransformerNet<T>> transformer;
  std::vector<SawLayer<T>> saw_trunk;
  std::vector<RSharedMlpBlock<T>> global_trunk;
  std::vector<REdgeConvBlock<T>> local_trunk;
  std::vector<PointEmbedding<T>> point_trunk;
  std::vector<Aggregator<T>> aggregators;
  std::vector<SharedMlpParams<T>> head;
  std::vector<BatchNormState<T>> head_bn;
  SharedMlpParams<T> head_out;

 private:
  explicit Model(ModelConfig config) : config_(std::move(config)) {}
  Var<T> check_input(Var<T> cloud) const;

  ModelConfig config_;
};

}  // namespace sawnet
