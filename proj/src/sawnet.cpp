#include "sawnet/sawnet.hpp"

#include <algorithm>

namespace sawnet {

namespace {

const std::vector<std::pair<Variant, const char*>>& variant_names() {
  static const std::vector<std::pair<Variant, const char*>> names{
      {Variant::sawnet, "sawnet"},
      {Variant::combine_at_end, "combine_at_end"},
      {Variant::combine_per_layer_no_residual, "combine_per_layer_no_residual"},
      {Variant::pointnet_shared, "pointnet_shared"},
      {Variant::pointnet_grouped, "pointnet_grouped"},
      {Variant::pointnet_depthwise, "pointnet_depthwise"},
      {Variant::pointnet_residual, "pointnet_residual"},
  };
  return names;
}

template <typename T>
Var<T> maybe_relu(Var<T> x, bool on) {
  return on ? relu(x) : x;
}

}  // namespace

std::string to_string(Task t) { return t == Task::classify ? "classify" : "segment"; }

std::string to_string(Variant v) {
  for (const auto& [k, name] : variant_names())
    if (k == v) return name;
  return "unknown";
}

Task parse_task(const std::string& s) {
  if (s == "classify") return Task::classify;
  if (s == "segment") return Task::segment;
  throw ConfigError("unknown task '" + s + "' (expected classify or segment)");
}

Variant parse_variant(const std::string& s) {
  for (const auto& [k, name] : variant_names())
    if (s == name) return k;
  throw ConfigError("unknown model variant '" + s + "'");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = [] {
    std::vector<Variant> out;
    for (const auto& [k, name] : variant_names()) out.push_back(k);
    return out;
  }();
  return v;
}

void ModelConfig::validate() const {
  auto positive = [](const std::vector<std::size_t>& w, const char* what) {
    for (auto x : w)
      if (x == 0) throw ConfigError(std::string(what) + " widths must be positive");
  };
  if (input_channels < 3) throw ConfigError("model needs at least 3 input channels (xyz)");
  if (channel_split) {
    if (channel_split->shared_dims != input_channels)
      throw ConfigError("channel_split.shared_dims must equal input_channels");
    if (channel_split->edgeconv_dims < 1 || channel_split->edgeconv_dims > input_channels)
      throw ConfigError("channel_split.edgeconv_dims must lie in [1, input_channels]");
  }
  if (k < 1) throw ConfigError("k must be at least 1");
  if (trunk.empty()) throw ConfigError("trunk needs at least one layer");
  positive(trunk, "trunk");
  positive(transformer.widths, "transformer");
  positive(transformer.head, "transformer head");
  positive(head, "head");
  positive(segment_head, "segment head");
  if (transformer.enabled && transformer.widths.empty()) throw ConfigError("transformer needs at least one layer");
  if (aggregate_width == 0) throw ConfigError("aggregate_width must be positive");
  if (task == Task::classify && num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (task == Task::segment && num_parts < 2) throw ConfigError("num_parts must be at least 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!(bn_decay > 0.0 && bn_decay < 1.0)) throw ConfigError("bn_decay must lie in (0, 1)");
  if (!(bn_epsilon > 0.0)) throw ConfigError("bn_epsilon must be positive");
  if (variant == Variant::pointnet_grouped)
    for (std::size_t i = 1; i < trunk.size(); ++i)
      if (groups == 0 || trunk[i - 1] % groups != 0 || trunk[i] % groups != 0)
        throw ConfigError("groups=" + std::to_string(groups) + " must divide trunk widths " +
                          std::to_string(trunk[i - 1]) + " -> " + std::to_string(trunk[i]));
  if (variant == Variant::pointnet_depthwise && num_points == 0)
    throw ConfigError("depthwise variant needs num_points");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"task", to_string(c.task)},
      {"variant", to_string(c.variant)},
      {"input_channels", c.input_channels},
      {"k", c.k},
      {"transformer", {{"enabled", c.transformer.enabled}, {"widths", c.transformer.widths}, {"head", c.transformer.head}}},
      {"trunk", c.trunk},
      {"aggregate_width", c.aggregate_width},
      {"head", c.head},
      {"segment_head", c.segment_head},
      {"num_classes", c.num_classes},
      {"num_parts", c.num_parts},
      {"dropout", c.dropout},
      {"bn_decay", c.bn_decay},
      {"bn_epsilon", c.bn_epsilon},
      {"post_add_activation", c.post_add_activation},
      {"groups", c.groups},
      {"num_points", c.num_points},
  };
  if (c.channel_split)
    j["channel_split"] = {{"edgeconv_dims", c.channel_split->edgeconv_dims},
                          {"shared_dims", c.channel_split->shared_dims}};
  else
    j["channel_split"] = nullptr;
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::vector<std::string> known{
      "task",         "variant", "input_channels", "k",           "transformer", "trunk",
      "aggregate_width", "head", "segment_head", "num_classes", "num_parts",   "dropout",
      "bn_decay",     "bn_epsilon", "post_add_activation", "groups", "num_points", "channel_split"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("model." + key + ": unknown field");
  auto get = [&](const char* key, auto& dst) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(dst);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("model.") + key + ": " + e.what());
    }
  };
  std::string s;
  if (j.contains("task")) {
    get("task", s);
    c.task = parse_task(s);
  }
  if (j.contains("variant")) {
    get("variant", s);
    c.variant = parse_variant(s);
  }
  get("input_channels", c.input_channels);
  get("k", c.k);
  if (j.contains("transformer")) {
    const auto& t = j.at("transformer");
    try {
      if (t.contains("enabled")) t.at("enabled").get_to(c.transformer.enabled);
      if (t.contains("widths")) t.at("widths").get_to(c.transformer.widths);
      if (t.contains("head")) t.at("head").get_to(c.transformer.head);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("model.transformer: ") + e.what());
    }
  }
  get("trunk", c.trunk);
  get("aggregate_width", c.aggregate_width);
  get("head", c.head);
  get("segment_head", c.segment_head);
  get("num_classes", c.num_classes);
  get("num_parts", c.num_parts);
  get("dropout", c.dropout);
  get("bn_decay", c.bn_decay);
  get("bn_epsilon", c.bn_epsilon);
  get("post_add_activation", c.post_add_activation);
  get("groups", c.groups);
  get("num_points", c.num_points);
  if (j.contains("channel_split") && !j.at("channel_split").is_null()) {
    ChannelSplit cs;
    try {
      j.at("channel_split").at("edgeconv_dims").get_to(cs.edgeconv_dims);
      j.at("channel_split").at("shared_dims").get_to(cs.shared_dims);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("model.channel_split: ") + e.what());
    }
    c.channel_split = cs;
  }
}

// ---------------------------------------------------------------------------

template <typename T>
RSharedMlpBlock<T>::RSharedMlpBlock(std::size_t in_width, std::size_t width, std::size_t skip_width, bool residual,
                                    bool post_add_activation, double bn_decay, double bn_epsilon, Rng& rng)
    : h1(SharedMlpParams<T>::glorot(in_width, width, rng)),
      h2(SharedMlpParams<T>::glorot(width, width, rng)),
      bn1(BatchNormState<T>::make(width, bn_decay, bn_epsilon)),
      bn2(BatchNormState<T>::make(width, bn_decay, bn_epsilon)),
      residual(residual),
      post_add_activation(post_add_activation) {
  if (residual && skip_width != width) projection = SharedMlpParams<T>::glorot(skip_width, width, rng);
}

template <typename T>
Var<T> RSharedMlpBlock<T>::forward(Context<T>& ctx, Var<T> x, Var<T> skip) {
  Var<T> s1 = relu(batch_norm(ctx, shared_mlp(ctx, x, h1), bn1));
  Var<T> s2 = batch_norm(ctx, shared_mlp(ctx, s1, h2), bn2);
  if (residual) {
    if (skip.shape().back() != width() && !projection)
      throw ConfigError("residual skip of width " + std::to_string(skip.shape().back()) +
                        " needs a projection to " + std::to_string(width()));
    Var<T> identity = projection ? shared_mlp(ctx, skip, *projection) : skip;
    s2 = add(s2, identity);
  }
  return maybe_relu(s2, post_add_activation);
}

template <typename T>
void RSharedMlpBlock<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  h1.visit(prefix + ".h1", v);
  bn1.visit(prefix + ".bn1", v);
  h2.visit(prefix + ".h2", v);
  bn2.visit(prefix + ".bn2", v);
  if (projection) projection->visit(prefix + ".projection", v);
}

template <typename T>
REdgeConvBlock<T>::REdgeConvBlock(std::size_t in_width, std::size_t width, std::size_t skip_width, std::size_t k,
                                  bool residual, bool post_add_activation, double bn_decay, double bn_epsilon,
                                  Rng& rng)
    : e1(SharedMlpParams<T>::glorot(2 * in_width, width, rng)),
      e2(SharedMlpParams<T>::glorot(width, width, rng)),
      bn1(BatchNormState<T>::make(width, bn_decay, bn_epsilon)),
      bn2(BatchNormState<T>::make(width, bn_decay, bn_epsilon)),
      k(k),
      residual(residual),
      post_add_activation(post_add_activation) {
  if (residual && skip_width != width) projection = SharedMlpParams<T>::glorot(skip_width, width, rng);
}

template <typename T>
Var<T> REdgeConvBlock<T>::forward(Context<T>& ctx, Var<T> x, Var<T> skip) {
  const NeighborGraph graph = knn(x.value(), k);
  if (ctx.tape().tracks_branches()) ctx.tape().note_branch(graph.hash());
  Var<T> edges = materialize_edges ? shared_mlp(ctx, edge_features(x, graph), e1)
                                   : edge_linear(x, graph, ctx.bind(e1.weight), ctx.bind(e1.bias));
  Var<T> h1 = relu(batch_norm(ctx, edges, bn1));
  Var<T> h2 = batch_norm(ctx, shared_mlp(ctx, h1, e2), bn2);
  Var<T> pooled = neighbor_max(h2);
  if (residual) {
    if (skip.shape().back() != width() && !projection)
      throw ConfigError("residual skip of width " + std::to_string(skip.shape().back()) +
                        " needs a projection to " + std::to_string(width()));
    Var<T> identity = projection ? shared_mlp(ctx, skip, *projection) : skip;
    pooled = add(pooled, identity);
  }
  return maybe_relu(pooled, post_add_activation);
}

template <typename T>
void REdgeConvBlock<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  e1.visit(prefix + ".e1", v);
  bn1.visit(prefix + ".bn1", v);
  e2.visit(prefix + ".e2", v);
  bn2.visit(prefix + ".bn2", v);
  if (projection) projection->visit(prefix + ".projection", v);
}

template <typename T>
SawLayer<T>::SawLayer(const SawLayerSpec& s, Rng& rng)
    : global(s.in_width, s.branch_width, s.global_skip_width, s.residual, s.post_add_activation, s.bn_decay,
             s.bn_epsilon, rng),
      local(s.edge_width, s.branch_width, s.local_skip_width, s.k, s.residual, s.post_add_activation, s.bn_decay,
            s.bn_epsilon, rng),
      spec_(s) {}

template <typename T>
typename SawLayer<T>::Output SawLayer<T>::forward(Context<T>& ctx, Var<T> x, Var<T> global_skip, Var<T> local_skip) {
  if (x.value().rank() != 3 || x.shape()[2] != spec_.in_width)
    throw DimensionError("saw_layer: input " + to_string(x.shape()) + " vs width " + std::to_string(spec_.in_width));
  Var<T> local_in = spec_.edge_width < spec_.in_width ? slice(x, 2, 0, spec_.edge_width) : x;
  Var<T> g = global.forward(ctx, x, global_skip);
  Var<T> l = local.forward(ctx, local_in, local_skip);
  return {concat(std::vector<Var<T>>{g, l}, 2), g, l};
}

template <typename T>
void SawLayer<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  global.visit(prefix + ".global", v);
  local.visit(prefix + ".local", v);
}

std::vector<SawLayerSpec> saw_stack_specs(std::size_t in_width, std::size_t edge_width,
                                          const std::vector<std::size_t>& widths, std::size_t k, bool residual,
                                          bool post_add_activation, double bn_decay, double bn_epsilon) {
  std::vector<SawLayerSpec> specs;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    SawLayerSpec s;
    s.branch_width = widths[i];
    s.k = k;
    s.residual = residual;
    s.post_add_activation = post_add_activation;
    s.bn_decay = bn_decay;
    s.bn_epsilon = bn_epsilon;
    if (i == 0) {
      s.in_width = in_width;
      s.edge_width = edge_width;
      s.global_skip_width = in_width;
      s.local_skip_width = edge_width;
    } else {
      s.in_width = s.edge_width = 2 * widths[i - 1];
      s.global_skip_width = s.local_skip_width = widths[i - 1];
    }
    specs.push_back(s);
  }
  return specs;
}

template <typename T>
std::vector<typename SawLayer<T>::Output> run_saw_stack(Context<T>& ctx, std::vector<SawLayer<T>>& layers, Var<T> x) {
  std::vector<typename SawLayer<T>::Output> outs;
  Var<T> input = x;
  Var<T> gskip = x;
  Var<T> lskip = x;
  if (!layers.empty()) {
    const auto& s0 = layers.front().spec();
    if (s0.edge_width < s0.in_width) lskip = slice(x, 2, 0, s0.edge_width);
  }
  for (auto& layer : layers) {
    auto o = layer.forward(ctx, input, gskip, lskip);
    input = o.out;
    gskip = o.global;
    lskip = o.local;
    outs.push_back(o);
  }
  return outs;
}

template <typename T>
TransformerNet<T>::TransformerNet(const TransformerConfig& cfg, std::size_t k, bool post_add_activation,
                                  double bn_decay, double bn_epsilon, Rng& rng) {
  for (const auto& s : saw_stack_specs(3, 3, cfg.widths, k, true, post_add_activation, bn_decay, bn_epsilon))
    layers.emplace_back(s, rng);
  std::size_t width = 2 * cfg.widths.back();
  for (auto h : cfg.head) {
    head.push_back(DenseParams<T>::glorot(width, h, rng));
    head_bn.push_back(BatchNormState<T>::make(h, bn_decay, bn_epsilon));
    width = h;
  }
  out.weight = Tensor<T>({width, 9});
  out.bias = Tensor<T>({9}, std::vector<T>{1, 0, 0, 0, 1, 0, 0, 0, 1});
}

template <typename T>
typename TransformerNet<T>::Output TransformerNet<T>::forward(Context<T>& ctx, Var<T> points) {
  const Shape& s = points.shape();
  if (s.size() != 3 || s[2] < 3) throw DimensionError("transformer_net needs [B, N, >=3] points, got " + to_string(s));
  const std::size_t b = s[0], n = s[1], c = s[2];
  Var<T> xyz = c == 3 ? points : slice(points, 2, 0, 3);
  auto outs = run_saw_stack(ctx, layers, xyz);
  Var<T> h = reduce_max(outs.back().out, 1).values;
  for (std::size_t i = 0; i < head.size(); ++i) h = relu(batch_norm(ctx, dense(ctx, h, head[i]), head_bn[i]));
  Var<T> t = reshape(dense(ctx, h, out), {b, 3, 3});
  Var<T> aligned = matmul(xyz, t);
  if (c > 3) aligned = concat(std::vector<Var<T>>{aligned, slice(points, 2, 3, c)}, 2);
  (void)n;
  return {aligned, t};
}

template <typename T>
void TransformerNet<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + ".layers." + std::to_string(i), v);
  for (std::size_t i = 0; i < head.size(); ++i) {
    head[i].visit(prefix + ".head." + std::to_string(i), v);
    head_bn[i].visit(prefix + ".head_bn." + std::to_string(i), v);
  }
  out.visit(prefix + ".out", v);
}

template <typename T>
Var<T> PointEmbedding<T>::forward(Context<T>& ctx, Var<T> x) {
  switch (kind) {
    case Kind::shared:
      return relu(batch_norm(ctx, shared_mlp(ctx, x, *shared), *bn));
    case Kind::grouped:
      return relu(batch_norm(ctx, grouped_shared_mlp(ctx, x, *grouped), *bn));
    case Kind::depthwise:
      return relu(batch_norm(ctx, depthwise_shared_mlp(ctx, x, *depthwise), *bn));
    case Kind::residual:
      return block->forward(ctx, x, x);
  }
  throw ContractError("unreachable embedding kind");
}

template <typename T>
void PointEmbedding<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  if (shared) shared->visit(prefix + ".shared", v);
  if (grouped) grouped->visit(prefix + ".grouped", v);
  if (depthwise) depthwise->visit(prefix + ".depthwise", v);
  if (bn) bn->visit(prefix + ".bn", v);
  if (block) block->visit(prefix + ".block", v);
}

template <typename T>
void Aggregator<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  mlp.visit(prefix + ".mlp", v);
  bn.visit(prefix + ".bn", v);
}

template <typename T>
Model<T> Model<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m(config);
  const auto& c = m.config_;
  Rng rng = make_rng(seed, {0x6d6f64656cULL});
  const double dec = c.bn_decay, eps = c.bn_epsilon;
  if (c.transformer.enabled) m.transformer.emplace(c.transformer, c.k, c.post_add_activation, dec, eps, rng);

  std::vector<std::size_t> group_widths;
  switch (c.variant) {
    case Variant::sawnet:
    case Variant::combine_per_layer_no_residual: {
      const bool residual = c.variant == Variant::sawnet;
      std::size_t total = 0;
      for (const auto& s : saw_stack_specs(c.input_channels, c.edge_input_width(), c.trunk, c.k, residual,
                                           c.post_add_activation, dec, eps)) {
        m.saw_trunk.emplace_back(s, rng);
        total += 2 * s.branch_width;
      }
      group_widths.push_back(total);
      break;
    }
    case Variant::combine_at_end: {
      std::size_t gin = c.input_channels, lin = c.edge_input_width(), gtot = 0, ltot = 0;
      for (auto w : c.trunk) {
        m.global_trunk.emplace_back(gin, w, gin, false, c.post_add_activation, dec, eps, rng);
        m.local_trunk.emplace_back(lin, w, lin, c.k, false, c.post_add_activation, dec, eps, rng);
        gin = lin = w;
        gtot += w;
        ltot += w;
      }
      group_widths = {gtot, ltot};
      break;
    }
    default: {
      std::size_t in = c.input_channels, total = 0;
      for (std::size_t i = 0; i < c.trunk.size(); ++i) {
        const std::size_t w = c.trunk[i];
        PointEmbedding<T> e;
        if (c.variant == Variant::pointnet_residual) {
          e.kind = PointEmbedding<T>::Kind::residual;
          e.block.emplace(in, w, in, true, c.post_add_activation, dec, eps, rng);
        } else if (c.variant == Variant::pointnet_grouped && i > 0) {
          e.kind = PointEmbedding<T>::Kind::grouped;
          e.grouped = GroupedMlpParams<T>::glorot(in, w, c.groups, rng);
          e.bn = BatchNormState<T>::make(w, dec, eps);
        } else if (c.variant == Variant::pointnet_depthwise) {
          e.kind = PointEmbedding<T>::Kind::depthwise;
          e.depthwise = DepthwiseMlpParams<T>::glorot(c.num_points, in, in, w, rng);
          e.bn = BatchNormState<T>::make(w, dec, eps);
        } else {
          e.kind = PointEmbedding<T>::Kind::shared;
          e.shared = SharedMlpParams<T>::glorot(in, w, rng);
          e.bn = BatchNormState<T>::make(w, dec, eps);
        }
        m.point_trunk.push_back(std::move(e));
        in = w;
        total += w;
      }
      group_widths.push_back(total);
      break;
    }
  }

  for (auto w : group_widths)
    m.aggregators.push_back(
        {SharedMlpParams<T>::glorot(w, c.aggregate_width, rng), BatchNormState<T>::make(c.aggregate_width, dec, eps)});

  const std::size_t pooled = group_widths.size() * c.aggregate_width;
  if (c.task == Task::classify) {
    std::size_t width = pooled;
    for (auto h : c.head) {
      m.head.push_back(SharedMlpParams<T>::glorot(width, h, rng));
      m.head_bn.push_back(BatchNormState<T>::make(h, dec, eps));
      width = h;
    }
    m.head_out = SharedMlpParams<T>::glorot(width, c.num_classes, rng);
  } else {
    std::size_t width = pooled;
    for (auto w : group_widths) width += w;
    for (auto h : c.segment_head) {
      m.head.push_back(SharedMlpParams<T>::glorot(width, h, rng));
      m.head_bn.push_back(BatchNormState<T>::make(h, dec, eps));
      width = h;
    }
    m.head_out = SharedMlpParams<T>::glorot(width, c.num_parts, rng);
  }
  return m;
}

template <typename T>
Var<T> Model<T>::check_input(Var<T> cloud) const {
  const Shape& s = cloud.shape();
  if (s.size() != 3 || s[2] != config_.input_channels)
    throw DimensionError("model expects [B, N, " + std::to_string(config_.input_channels) + "] input, got " +
                         to_string(s));
  const bool uses_graph = transformer.has_value() || point_trunk.empty();
  if (uses_graph && s[1] <= config_.k)
    throw ConfigError("cloud has N=" + std::to_string(s[1]) + " points but k=" + std::to_string(config_.k) +
                      " neighbours need N > k");
  if (config_.variant == Variant::pointnet_depthwise && s[1] != config_.num_points)
    throw DimensionError("depthwise model built for " + std::to_string(config_.num_points) + " points, got " +
                         std::to_string(s[1]));
  return cloud;
}

template <typename T>
std::vector<Var<T>> Model<T>::trunk_features(Context<T>& ctx, Var<T> cloud) {
  Var<T> x = check_input(cloud);
  if (transformer) x = transformer->forward(ctx, x).aligned;

  std::vector<Var<T>> groups;
  switch (config_.variant) {
    case Variant::sawnet:
    case Variant::combine_per_layer_no_residual: {
      std::vector<Var<T>> outs;
      for (auto& o : run_saw_stack(ctx, saw_trunk, x)) outs.push_back(o.out);
      groups.push_back(outs.size() == 1 ? outs[0] : concat(outs, 2));
      break;
    }
    case Variant::combine_at_end: {
      std::vector<Var<T>> gouts, louts;
      Var<T> g = x;
      Var<T> l = config_.edge_input_width() < config_.input_channels ? slice(x, 2, 0, config_.edge_input_width()) : x;
      for (std::size_t i = 0; i < global_trunk.size(); ++i) {
        g = global_trunk[i].forward(ctx, g, g);
        l = local_trunk[i].forward(ctx, l, l);
        gouts.push_back(g);
        louts.push_back(l);
      }
      groups.push_back(gouts.size() == 1 ? gouts[0] : concat(gouts, 2));
      groups.push_back(louts.size() == 1 ? louts[0] : concat(louts, 2));
      break;
    }
    default: {
      std::vector<Var<T>> outs;
      Var<T> h = x;
      for (auto& e : point_trunk) {
        h = e.forward(ctx, h);
        outs.push_back(h);
      }
      groups.push_back(outs.size() == 1 ? outs[0] : concat(outs, 2));
      break;
    }
  }
  return groups;
}

template <typename T>
Var<T> Model<T>::pool(Context<T>& ctx, const std::vector<Var<T>>& groups) {
  std::vector<Var<T>> pooled;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    Var<T> a = relu(batch_norm(ctx, shared_mlp(ctx, groups[i], aggregators[i].mlp), aggregators[i].bn));
    pooled.push_back(reduce_max(a, 1).values);
  }
  return pooled.size() == 1 ? pooled[0] : concat(pooled, 1);
}

template <typename T>
Var<T> Model<T>::classify_forward(Context<T>& ctx, Var<T> cloud) {
  if (config_.task != Task::classify) throw ConfigError("classify_forward on a segmentation model");
  Var<T> h = pool(ctx, trunk_features(ctx, cloud));
  for (std::size_t i = 0; i < head.size(); ++i) {
    h = relu(batch_norm(ctx, dense(ctx, h, head[i]), head_bn[i]));
    h = dropout(ctx, h, config_.dropout);
  }
  return dense(ctx, h, head_out);
}

template <typename T>
Var<T> Model<T>::segment_forward(Context<T>& ctx, Var<T> cloud) {
  if (config_.task != Task::segment) throw ConfigError("segment_forward on a classification model");
  const std::size_t n = cloud.shape().at(1);
  auto groups = trunk_features(ctx, cloud);
  Var<T> global = pool(ctx, groups);
  std::vector<Var<T>> parts = groups;
  parts.push_back(broadcast_rows(global, n));
  Var<T> h = concat(parts, 2);
  for (std::size_t i = 0; i < head.size(); ++i) h = relu(batch_norm(ctx, shared_mlp(ctx, h, head[i]), head_bn[i]));
  return shared_mlp(ctx, h, head_out);
}

template <typename T>
Var<T> Model<T>::forward(Context<T>& ctx, Var<T> cloud) {
  return config_.task == Task::classify ? classify_forward(ctx, cloud) : segment_forward(ctx, cloud);
}

template <typename T>
void Model<T>::visit(const TensorVisitor<T>& v) {
  if (transformer) transformer->visit("transformer", v);
  for (std::size_t i = 0; i < saw_trunk.size(); ++i) saw_trunk[i].visit("trunk." + std::to_string(i), v);
  for (std::size_t i = 0; i < global_trunk.size(); ++i) global_trunk[i].visit("global_trunk." + std::to_string(i), v);
  for (std::size_t i = 0; i < local_trunk.size(); ++i) local_trunk[i].visit("local_trunk." + std::to_string(i), v);
  for (std::size_t i = 0; i < point_trunk.size(); ++i) point_trunk[i].visit("point_trunk." + std::to_string(i), v);
  for (std::size_t i = 0; i < aggregators.size(); ++i) aggregators[i].visit("aggregate." + std::to_string(i), v);
  for (std::size_t i = 0; i < head.size(); ++i) {
    head[i].visit("head." + std::to_string(i), v);
    head_bn[i].visit("head_bn." + std::to_string(i), v);
  }
  head_out.visit("head.out", v);
}

template <typename T>
std::size_t Model<T>::parameter_count() {
  std::size_t n = 0;
  visit([&](const std::string&, Tensor<T>& t, TensorRole role) {
    if (role == TensorRole::parameter) n += t.size();
  });
  return n;
}

#define SAWNET_INSTANTIATE_MODEL(T)                                                                          \
  template class RSharedMlpBlock<T>;                                                                         \
  template class REdgeConvBlock<T>;                                                                          \
  template class SawLayer<T>;                                                                                \
  template class TransformerNet<T>;                                                                          \
  template struct PointEmbedding<T>;                                                                         \
  template struct Aggregator<T>;                                                                             \
  template class Model<T>;                                                                                   \
  template std::vector<typename SawLayer<T>::Output> run_saw_stack<T>(Context<T>&, std::vector<SawLayer<T>>&, \
                                                                       Var<T>);

SAWNET_INSTANTIATE_MODEL(float)
SAWNET_INSTANTIATE_MODEL(double)

}  // namespace sawnet
