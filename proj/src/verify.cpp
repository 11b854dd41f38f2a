#include "sawnet/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <ostream>
#include <set>

#include "sawnet/finite_diff.hpp"
#include "sawnet/graph.hpp"
#include "sawnet/kernels.hpp"
#include "sawnet/train.hpp"

namespace sawnet::verify {
namespace fs = std::filesystem;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(uniform(rng, lo, hi));
  return t;
}

// Nudges every parameter off its initial value so zero- or one-initialized
// tensors (biases, BN affine, the transformer output) carry gradient.
template <typename Visitable>
void perturb(Visitable& obj, const std::string& prefix, Rng& rng, double amount = 0.3) {
  obj.visit(prefix, [&](const std::string&, Tensor<double>& t, TensorRole role) {
    if (role != TensorRole::parameter) return;
    for (auto& v : t.data()) v += uniform(rng, -amount, amount);
  });
}

template <typename Visitable>
NamedTensors parameters_of(Visitable& obj, const std::string& prefix) {
  NamedTensors out;
  obj.visit(prefix, [&](const std::string& name, Tensor<double>& t, TensorRole role) {
    if (role == TensorRole::parameter) out.emplace_back(name, &t);
  });
  return out;
}

CheckResult gradient_result(const std::string& name, const GradientCheck& g, std::size_t seeds) {
  CheckResult r;
  r.name = name;
  r.max_error = g.max_rel_error;
  r.tolerance = kGradientTolerance;
  r.passed = g.max_rel_error < kGradientTolerance && g.unresolved == 0;
  r.detail = std::to_string(g.elements) + " elements over " + std::to_string(seeds) + " seeds";
  if (!g.worst.empty()) r.detail += ", worst " + g.worst;
  if (g.one_sided) r.detail += ", " + std::to_string(g.one_sided) + " one-sided";
  if (g.unresolved) r.detail += ", " + std::to_string(g.unresolved) + " unresolved";
  return r;
}

void merge(GradientCheck& into, const GradientCheck& g) {
  if (g.max_rel_error >= into.max_rel_error) {
    into.max_rel_error = g.max_rel_error;
    into.worst = g.worst;
  }
  into.elements += g.elements;
  into.one_sided += g.one_sided;
  into.unresolved += g.unresolved;
}

// Builds a fresh layer, input and loss for one seed.
using LayerCase = std::function<GradientCheck(std::uint64_t seed)>;

NamedCheck layer_check(const std::string& name, std::size_t seeds, std::uint64_t base_seed, LayerCase run) {
  return {"gradient." + name, [=] {
            GradientCheck total;
            for (std::size_t s = 0; s < seeds; ++s) merge(total, run(base_seed + s));
            return gradient_result("gradient." + name, total, seeds);
          }};
}

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[uniform_index(rng, i)]);
  return p;
}

// Rows of a [B, N, C] tensor reordered within each item: out[b, i] = in[b, perm[i]].
template <typename T>
Tensor<T> permute_points(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t b = x.shape()[0], n = x.shape()[1], c = x.shape()[2];
  Tensor<T> out(x.shape());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(x.raw() + (bi * n + perm[i]) * c, c, out.raw() + (bi * n + i) * c);
  return out;
}

ModelConfig small_config(Task task) {
  ModelConfig c;
  c.task = task;
  c.k = 6;
  c.transformer.widths = {8, 16};
  c.transformer.head = {16};
  c.trunk = {8, 16};
  c.aggregate_width = 32;
  c.head = {16};
  c.segment_head = {16};
  c.num_classes = 4;
  c.num_parts = 4;
  return c;
}

// A few train-mode steps so batch-norm running statistics move off their
// initial values before eval-mode checks.
template <typename T>
void warm_up(Model<T>& model, std::size_t batch, std::size_t n, Rng& rng) {
  for (int step = 0; step < 3; ++step) {
    Tape<T> tape;
    Context<T> ctx(tape, Mode::train, rng);
    model.forward(ctx, ctx.input(random_tensor<T>({batch, n, model.config().input_channels}, rng)));
  }
}

template <typename T>
Tensor<T> eval_forward(Model<T>& model, const Tensor<T>& x) {
  Tape<T> tape;
  Rng rng(0);
  Context<T> ctx(tape, Mode::eval, rng);
  return model.forward(ctx, ctx.input(x)).value();
}

}  // namespace

bool Report::passed() const {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
}

Report run_checks(const std::vector<NamedCheck>& checks) {
  Report report;
  for (const auto& c : checks) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r = {};
      r.passed = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.name = c.name;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.results.push_back(std::move(r));
  }
  return report;
}

nlohmann::json to_json(const Report& r) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : r.results)
    checks.push_back({{"name", c.name},
                      {"passed", c.passed},
                      {"max_error", c.max_error},
                      {"tolerance", c.tolerance},
                      {"detail", c.detail}});
  return {{"passed", r.passed()}, {"checks", checks}};
}

void print_report(std::ostream& os, const Report& r) {
  std::size_t failed = 0;
  for (const auto& c : r.results) {
    char line[512];
    std::snprintf(line, sizeof line, "%-4s %-44s max_error %-11.3e tol %-9.1e %6.2fs  %s", c.passed ? "ok" : "FAIL",
                  c.name.c_str(), c.max_error, c.tolerance, c.seconds, c.detail.c_str());
    os << line << '\n';
    if (!c.passed) ++failed;
  }
  os << (failed ? std::to_string(failed) + " of " + std::to_string(r.results.size()) + " checks failed"
                : "all " + std::to_string(r.results.size()) + " checks passed")
     << '\n';
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

GradientCheck gradient_check(const LossFn& loss, const NamedTensors& tensors, std::uint64_t rng_seed, double step) {
  GradientCheck out;
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    tape.set_branch_tracking(true);
    Rng rng(rng_seed);
    Context<double> ctx(tape, Mode::train, rng);
    Var<double> l = loss(ctx);
    std::vector<NodeId> leaves;
    for (auto& [name, t] : tensors) leaves.push_back(ctx.bind(*t).id());
    auto grads = tape.backward(l, leaves);
    for (auto id : leaves) analytic.push_back(grads.at(id));
  }
  auto probe = [&]() -> Probe<double> {
    Tape<double> tape;
    tape.set_branch_tracking(true);
    Rng rng(rng_seed);
    Context<double> ctx(tape, Mode::train, rng);
    Var<double> l = loss(ctx);
    return {l.value().item(), tape.branch_signature()};
  };
  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    Tensor<double>& target = *tensors[ti].second;
    const Tensor<double> original = target;
    std::function<Probe<double>(const Tensor<double>&)> f = [&](const Tensor<double>& x) {
      target = x;
      return probe();
    };
    auto numeric = finite_diff_piecewise(f, original, step, 8, true);
    target = original;
    out.elements += original.size();
    out.one_sided += numeric.one_sided;
    out.unresolved += numeric.unresolved;
    for (std::size_t i = 0; i < original.size(); ++i) {
      const double e = relative_error(analytic[ti][i], numeric.grad[i]);
      if (e > out.max_rel_error || out.worst.empty()) {
        out.max_rel_error = std::max(out.max_rel_error, e);
        out.worst = tensors[ti].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

Var<double> probe_loss(Context<double>& ctx, Var<double> x, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x70726f6265});
  return sum(mul(x, ctx.input(random_tensor<double>(x.shape(), rng))));
}

std::vector<NamedCheck> layer_gradient_checks(std::size_t seeds, std::uint64_t base_seed) {
  std::vector<NamedCheck> checks;

  checks.push_back(layer_check("shared_mlp", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    auto p = SharedMlpParams<double>::glorot(3, 4, rng);
    perturb(p, "mlp", rng);
    Tensor<double> x = random_tensor<double>({2, 5, 3}, rng);
    NamedTensors ts = parameters_of(p, "mlp");
    ts.emplace_back("x", &x);
    return gradient_check([&](Context<double>& ctx) { return probe_loss(ctx, shared_mlp(ctx, ctx.bind(x), p), seed); },
                          ts, seed);
  }));

  checks.push_back(layer_check("dense_dropout", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    auto p = DenseParams<double>::glorot(6, 5, rng);
    perturb(p, "dense", rng);
    Tensor<double> x = random_tensor<double>({3, 6}, rng);
    NamedTensors ts = parameters_of(p, "dense");
    ts.emplace_back("x", &x);
    return gradient_check(
        [&](Context<double>& ctx) { return probe_loss(ctx, dropout(ctx, dense(ctx, ctx.bind(x), p), 0.5), seed); }, ts,
        seed);
  }));

  checks.push_back(layer_check("batch_norm", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    auto bn = BatchNormState<double>::make(4);
    perturb(bn, "bn", rng);
    Tensor<double> x = random_tensor<double>({2, 5, 4}, rng);
    NamedTensors ts = parameters_of(bn, "bn");
    ts.emplace_back("x", &x);
    return gradient_check([&](Context<double>& ctx) { return probe_loss(ctx, batch_norm(ctx, ctx.bind(x), bn), seed); },
                          ts, seed);
  }));

  checks.push_back(layer_check("relu", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> x = random_tensor<double>({4, 7}, rng);
    return gradient_check([&](Context<double>& ctx) { return probe_loss(ctx, relu(ctx.bind(x)), seed); },
                          {{"x", &x}}, seed);
  }));

  checks.push_back(layer_check("reduce_max", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> x = random_tensor<double>({2, 6, 3}, rng);
    return gradient_check([&](Context<double>& ctx) { return probe_loss(ctx, reduce_max(ctx.bind(x), 1).values, seed); },
                          {{"x", &x}}, seed);
  }));

  checks.push_back(layer_check("matmul", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> a = random_tensor<double>({2, 4, 3}, rng);
    Tensor<double> b = random_tensor<double>({2, 3, 3}, rng);
    return gradient_check(
        [&](Context<double>& ctx) { return probe_loss(ctx, matmul(ctx.bind(a), ctx.bind(b)), seed); },
        {{"a", &a}, {"b", &b}}, seed);
  }));

  checks.push_back(layer_check("reshape_concat_slice_broadcast", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> a = random_tensor<double>({2, 3, 4}, rng);
    Tensor<double> g = random_tensor<double>({2, 2}, rng);
    return gradient_check(
        [&](Context<double>& ctx) {
          Var<double> av = ctx.bind(a);
          Var<double> parts = concat(std::vector<Var<double>>{slice(av, 2, 1, 3), broadcast_rows(ctx.bind(g), 3)}, 2);
          return probe_loss(ctx, reshape(mul(parts, parts), {2, 12}), seed);
        },
        {{"a", &a}, {"g", &g}}, seed);
  }));

  checks.push_back(layer_check("grouped_shared_mlp", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    auto p = GroupedMlpParams<double>::glorot(8, 4, 2, rng);
    perturb(p, "grouped", rng);
    Tensor<double> x = random_tensor<double>({2, 5, 8}, rng);
    NamedTensors ts = parameters_of(p, "grouped");
    ts.emplace_back("x", &x);
    return gradient_check(
        [&](Context<double>& ctx) { return probe_loss(ctx, grouped_shared_mlp(ctx, ctx.bind(x), p), seed); }, ts, seed);
  }));

  checks.push_back(layer_check("depthwise_shared_mlp", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    auto p = DepthwiseMlpParams<double>::glorot(5, 3, 3, 4, rng);
    perturb(p, "depthwise", rng);
    Tensor<double> x = random_tensor<double>({2, 5, 3}, rng);
    NamedTensors ts = parameters_of(p, "depthwise");
    ts.emplace_back("x", &x);
    return gradient_check(
        [&](Context<double>& ctx) { return probe_loss(ctx, depthwise_shared_mlp(ctx, ctx.bind(x), p), seed); }, ts,
        seed);
  }));

  checks.push_back(layer_check("edge_features", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    auto p = SharedMlpParams<double>::glorot(6, 4, rng);
    perturb(p, "edge", rng);
    Tensor<double> x = random_tensor<double>({2, 8, 3}, rng);
    NamedTensors ts = parameters_of(p, "edge");
    ts.emplace_back("x", &x);
    return gradient_check(
        [&](Context<double>& ctx) {
          Var<double> xv = ctx.bind(x);
          NeighborGraph g = knn(xv.value(), 3);
          ctx.tape().note_branch(g.hash());
          return probe_loss(ctx, neighbor_max(shared_mlp(ctx, edge_features(xv, g), p)), seed);
        },
        ts, seed);
  }));

  checks.push_back(layer_check("edge_linear", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    auto p = SharedMlpParams<double>::glorot(6, 4, rng);
    perturb(p, "edge", rng);
    Tensor<double> x = random_tensor<double>({2, 8, 3}, rng);
    NamedTensors ts = parameters_of(p, "edge");
    ts.emplace_back("x", &x);
    return gradient_check(
        [&](Context<double>& ctx) {
          Var<double> xv = ctx.bind(x);
          NeighborGraph g = knn(xv.value(), 3);
          ctx.tape().note_branch(g.hash());
          return probe_loss(ctx, neighbor_max(edge_linear(xv, g, ctx.bind(p.weight), ctx.bind(p.bias))), seed);
        },
        ts, seed);
  }));

  checks.push_back(layer_check("cross_entropy", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> logits = random_tensor<double>({3, 4}, rng, -2, 2);
    Tensor<double> scores = random_tensor<double>({2, 5, 3}, rng, -2, 2);
    std::vector<std::int64_t> labels{0, 3, 1};
    std::vector<std::int64_t> parts{0, 1, 2, 2, 1, 0, 0, 1, 2, 1};
    return gradient_check(
        [&](Context<double>& ctx) {
          return add(cross_entropy(ctx.bind(logits), std::span<const std::int64_t>(labels)),
                     cross_entropy(ctx.bind(scores), std::span<const std::int64_t>(parts)));
        },
        {{"logits", &logits}, {"scores", &scores}}, seed);
  }));

  checks.push_back(layer_check("rshared_mlp_block", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    RSharedMlpBlock<double> block(3, 4, 3, true, true, 0.7, 1e-5, rng);
    perturb(block, "block", rng);
    Tensor<double> x = random_tensor<double>({2, 6, 3}, rng);
    NamedTensors ts = parameters_of(block, "block");
    ts.emplace_back("x", &x);
    return gradient_check(
        [&](Context<double>& ctx) {
          Var<double> xv = ctx.bind(x);
          return probe_loss(ctx, block.forward(ctx, xv, xv), seed);
        },
        ts, seed);
  }));

  checks.push_back(layer_check("redge_conv_block", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    REdgeConvBlock<double> block(3, 4, 3, 3, true, true, 0.7, 1e-5, rng);
    perturb(block, "block", rng);
    Tensor<double> x = random_tensor<double>({2, 8, 3}, rng);
    NamedTensors ts = parameters_of(block, "block");
    ts.emplace_back("x", &x);
    return gradient_check(
        [&](Context<double>& ctx) {
          Var<double> xv = ctx.bind(x);
          return probe_loss(ctx, block.forward(ctx, xv, xv), seed);
        },
        ts, seed);
  }));

  checks.push_back(layer_check("saw_layer", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    auto specs = saw_stack_specs(3, 3, {4, 4}, 3, true, true, 0.7, 1e-5);
    std::vector<SawLayer<double>> layers;
    for (const auto& s : specs) layers.emplace_back(s, rng);
    NamedTensors ts;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      perturb(layers[i], "saw." + std::to_string(i), rng);
      auto p = parameters_of(layers[i], "saw." + std::to_string(i));
      ts.insert(ts.end(), p.begin(), p.end());
    }
    Tensor<double> x = random_tensor<double>({2, 8, 3}, rng);
    ts.emplace_back("x", &x);
    return gradient_check(
        [&](Context<double>& ctx) { return probe_loss(ctx, run_saw_stack(ctx, layers, ctx.bind(x)).back().out, seed); },
        ts, seed);
  }));

  checks.push_back(layer_check("transformer", seeds, base_seed, [](std::uint64_t seed) {
    Rng rng(seed);
    TransformerConfig cfg;
    cfg.widths = {4, 4};
    cfg.head = {8};
    TransformerNet<double> net(cfg, 3, true, 0.7, 1e-5, rng);
    perturb(net, "transformer", rng);
    Tensor<double> x = random_tensor<double>({2, 8, 3}, rng);
    NamedTensors ts = parameters_of(net, "transformer");
    ts.emplace_back("x", &x);
    return gradient_check(
        [&](Context<double>& ctx) {
          auto out = net.forward(ctx, ctx.bind(x));
          return add(probe_loss(ctx, out.aligned, seed), probe_loss(ctx, out.transform, seed + 1));
        },
        ts, seed);
  }));

  return checks;
}

ModelConfig tiny_model_config(Variant variant, Task task) {
  ModelConfig c;
  c.task = task;
  c.variant = variant;
  c.k = 4;
  c.transformer.widths = {4, 4};
  c.transformer.head = {4};
  c.trunk = {8, 8};
  c.aggregate_width = 8;
  c.head = {8};
  c.segment_head = {8};
  c.num_classes = 3;
  c.num_parts = 4;
  c.groups = 2;
  c.num_points = 16;
  return c;
}

CheckResult check_model_gradients(const ModelConfig& cfg, std::size_t seeds, std::uint64_t base_seed,
                                  std::size_t batch, std::size_t points) {
  GradientCheck total;
  for (std::size_t s = 0; s < seeds; ++s) {
    const std::uint64_t seed = base_seed + s;
    Model<double> model = Model<double>::build(cfg, seed);
    Rng rng = make_rng(seed, {0x677261646d});
    model.visit([&](const std::string&, Tensor<double>& t, TensorRole role) {
      if (role != TensorRole::parameter) return;
      for (auto& v : t.data()) v += uniform(rng, -0.3, 0.3);
    });
    NamedTensors ts;
    model.visit([&](const std::string& name, Tensor<double>& t, TensorRole role) {
      if (role == TensorRole::parameter) ts.emplace_back(name, &t);
    });
    const Tensor<double> x = random_tensor<double>({batch, points, cfg.input_channels}, rng);
    std::vector<std::int64_t> labels;
    const std::size_t rows = cfg.task == Task::classify ? batch : batch * points;
    const std::size_t width = cfg.task == Task::classify ? cfg.num_classes : cfg.num_parts;
    for (std::size_t r = 0; r < rows; ++r) labels.push_back(static_cast<std::int64_t>(uniform_index(rng, width)));
    merge(total, gradient_check(
                     [&](Context<double>& ctx) {
                       return cross_entropy(model.forward(ctx, ctx.input(x)), std::span<const std::int64_t>(labels));
                     },
                     ts, seed));
  }
  return gradient_result("gradient.model." + to_string(cfg.variant) + "." + to_string(cfg.task), total, seeds);
}

CheckResult check_knn_oracle(std::size_t clouds, std::size_t min_n, std::size_t max_n, std::uint64_t seed) {
  if (min_n < 2 || max_n < min_n) throw ContractError("check_knn_oracle: need 2 <= min_n <= max_n");
  Rng rng(seed);
  static const std::size_t dims[] = {1, 2, 3, 5, 8, 16};
  std::size_t mismatches = 0, graphs = 0;
  std::string first_bad;
  for (std::size_t c = 0; c < clouds; ++c) {
    const std::size_t n = min_n + uniform_index(rng, max_n - min_n + 1);
    const std::size_t dim = dims[uniform_index(rng, std::size(dims))];
    const std::size_t batch = 1 + uniform_index(rng, 2);
    // every third cloud sits on a coarse integer grid: many equal distances
    // and duplicate points exercise the tie rule
    const bool ties = c % 3 == 2;
    Tensor<float> x({batch, n, dim});
    for (auto& v : x.data())
      v = ties ? static_cast<float>(uniform_index(rng, 3)) : static_cast<float>(uniform(rng, -1, 1));
    // oracle: every pair, sorted by (distance, index)
    std::vector<std::vector<std::int32_t>> order(batch * n);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::pair<float, std::int32_t>> all;
        const float* xi = x.raw() + (b * n + i) * dim;
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i) continue;
          const float* xj = x.raw() + (b * n + j) * dim;
          float d = 0;
          for (std::size_t k = 0; k < dim; ++k) d += (xi[k] - xj[k]) * (xi[k] - xj[k]);
          all.emplace_back(d, static_cast<std::int32_t>(j));
        }
        std::sort(all.begin(), all.end());
        for (auto& [d, j] : all) order[b * n + i].push_back(j);
      }
    for (std::size_t k = 1; k < n; ++k) {
      NeighborGraph g = knn(x, k);
      ++graphs;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j)
            if (g.at(b, i, j) != order[b * n + i][j]) {
              if (mismatches++ == 0)
                first_bad = "cloud " + std::to_string(c) + " n=" + std::to_string(n) + " k=" + std::to_string(k) +
                            " point " + std::to_string(i);
            }
    }
  }
  CheckResult r;
  r.name = "knn.oracle";
  r.max_error = static_cast<double>(mismatches);
  r.passed = mismatches == 0;
  r.detail = std::to_string(clouds) + " clouds, " + std::to_string(graphs) + " graphs, every k < N";
  if (!first_bad.empty()) r.detail += "; first mismatch: " + first_bad;
  return r;
}

CheckResult check_kernel_equivalence(std::uint64_t seed) {
  Rng rng(seed);
  std::size_t differing = 0, cases = 0;
  auto run = [&](auto tag) {
    using T = decltype(tag);
    const std::size_t shapes[][3] = {{1, 1, 1}, {7, 5, 3}, {64, 33, 17}, {300, 64, 40}, {4096, 32, 16}, {37, 9, 700}};
    for (const auto& s : shapes) {
      const std::size_t m = s[0], n = s[1], k = s[2];
      std::vector<T> a(m * k), at(k * m), b(k * n);
      for (auto& v : a) v = static_cast<T>(uniform(rng, -1, 1));
      for (auto& v : at) v = static_cast<T>(uniform(rng, -1, 1));
      for (auto& v : b) v = static_cast<T>(uniform(rng, -1, 1));
      for (bool acc : {false, true}) {
        std::vector<T> c1(m * n, T(0.5)), c2(m * n, T(0.5)), c3(m * n, T(0.5)), c4(m * n, T(0.5));
        kernels::gemm(m, n, k, a.data(), k, b.data(), n, c1.data(), n, acc);
        kernels::reference::gemm(m, n, k, a.data(), k, b.data(), n, c2.data(), n, acc);
        kernels::gemm_tn(m, n, k, at.data(), m, b.data(), n, c3.data(), n, acc);
        kernels::reference::gemm_tn(m, n, k, at.data(), m, b.data(), n, c4.data(), n, acc);
        differing += std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(T)) != 0;
        differing += std::memcmp(c3.data(), c4.data(), c3.size() * sizeof(T)) != 0;
        cases += 2;
      }
    }
    for (std::size_t n : {5, 64, 257}) {
      Tensor<T> x = random_tensor<T>({2, n, 6}, rng);
      const std::size_t k = std::min<std::size_t>(20, n - 1);
      differing += knn(x, k).indices != knn_reference(x, k).indices;
      ++cases;
    }
  };
  run(float{});
  run(double{});
  CheckResult r;
  r.name = "kernels.parallel_matches_reference";
  r.max_error = static_cast<double>(differing);
  r.passed = differing == 0;
  r.detail = std::to_string(cases) + " cases, " + std::to_string(kernels::max_threads()) + " threads";
  return r;
}

CheckResult check_permutation_invariance(std::size_t permutations, std::uint64_t seed) {
  Rng rng(seed);
  Model<float> model = Model<float>::build(small_config(Task::classify), seed);
  const std::size_t batch = 2, n = 48;
  warm_up(model, batch, n, rng);
  const Tensor<float> x = random_tensor<float>({batch, n, 3}, rng);
  const Tensor<float> base = eval_forward(model, x);
  double worst = 0;
  std::size_t argmax_changes = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    const Tensor<float> y = eval_forward(model, permute_points(x, random_permutation(n, rng)));
    for (std::size_t i = 0; i < base.size(); ++i) worst = std::max(worst, std::abs(double(base[i]) - double(y[i])));
    const std::size_t c = base.shape()[1];
    for (std::size_t b = 0; b < batch; ++b) {
      const float* r0 = base.raw() + b * c;
      const float* r1 = y.raw() + b * c;
      if (std::max_element(r0, r0 + c) - r0 != std::max_element(r1, r1 + c) - r1) ++argmax_changes;
    }
  }
  CheckResult r;
  r.name = "permutation.classification";
  r.max_error = worst;
  r.tolerance = 1e-5;
  r.passed = worst <= r.tolerance && argmax_changes == 0;
  r.detail = std::to_string(permutations) + " permutations, " + std::to_string(argmax_changes) + " argmax changes";
  return r;
}

CheckResult check_segmentation_equivariance(std::size_t permutations, std::uint64_t seed) {
  Rng rng(seed);
  Model<float> model = Model<float>::build(small_config(Task::segment), seed);
  const std::size_t batch = 2, n = 48;
  warm_up(model, batch, n, rng);
  const Tensor<float> x = random_tensor<float>({batch, n, 3}, rng);
  const Tensor<float> base = eval_forward(model, x);
  double worst = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    const auto perm = random_permutation(n, rng);
    const Tensor<float> y = eval_forward(model, permute_points(x, perm));
    const Tensor<float> expected = permute_points(base, perm);
    for (std::size_t i = 0; i < y.size(); ++i) worst = std::max(worst, std::abs(double(expected[i]) - double(y[i])));
  }
  CheckResult r;
  r.name = "permutation.segmentation";
  r.max_error = worst;
  r.tolerance = 1e-5;
  r.passed = worst <= r.tolerance;
  r.detail = std::to_string(permutations) + " permutations";
  return r;
}

CheckResult check_transformer_identity(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0;
  std::size_t cases = 0;
  for (std::size_t channels : {3, 6}) {
    ModelConfig cfg = small_config(Task::classify);
    cfg.input_channels = channels;
    Model<float> model = Model<float>::build(cfg, seed);
    const Tensor<float> x = random_tensor<float>({2, 32, channels}, rng, -1, 1);
    for (Mode mode : {Mode::train, Mode::eval}) {
      Tape<float> tape;
      Rng drop(0);
      Context<float> ctx(tape, mode, drop);
      auto out = model.transformer->forward(ctx, ctx.input(x));
      const Tensor<float>& a = out.aligned.value();
      if (a.shape() != x.shape()) throw DimensionError("aligned points changed shape");
      for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(x[i])));
      ++cases;
    }
  }
  CheckResult r;
  r.name = "transformer.identity_at_init";
  r.max_error = worst;
  r.tolerance = 0;
  r.passed = worst == 0;
  r.detail = std::to_string(cases) + " cases (3 and 6 channels, train and eval)";
  return r;
}

CheckResult check_residual_degeneracy(std::uint64_t seed) {
  Rng rng(seed);
  std::size_t differing = 0, cases = 0;
  // widths chosen so both the identity and the projected skip are exercised
  for (std::size_t width : {3, 5}) {
    SawLayerSpec spec;
    spec.in_width = 3;
    spec.edge_width = 3;
    spec.branch_width = width;
    spec.k = 4;
    spec.global_skip_width = 3;
    spec.local_skip_width = 3;
    SawLayer<float> layer(spec, rng);
    layer.global.h2.weight = Tensor<float>(layer.global.h2.weight.shape());
    layer.local.e2.weight = Tensor<float>(layer.local.e2.weight.shape());
    for (auto& v : layer.global.h2.bias.data()) v = static_cast<float>(uniform(rng, -1, 1));
    for (auto& v : layer.local.e2.bias.data()) v = static_cast<float>(uniform(rng, -1, 1));
    const Tensor<float> x = random_tensor<float>({2, 16, 3}, rng);
    const Tensor<float> gs = random_tensor<float>({2, 16, 3}, rng);
    const Tensor<float> ls = random_tensor<float>({2, 16, 3}, rng);
    Tape<float> tape;
    Rng drop(0);
    Context<float> ctx(tape, Mode::train, drop);
    auto out = layer.forward(ctx, ctx.input(x), ctx.input(gs), ctx.input(ls));
    auto project = [&](const Tensor<float>& skip, std::optional<SharedMlpParams<float>>& p) {
      Var<float> s = ctx.input(skip);
      return relu(p ? shared_mlp(ctx, s, *p) : s).value();
    };
    const Tensor<float> g = project(gs, layer.global.projection);
    const Tensor<float> l = project(ls, layer.local.projection);
    const Tensor<float>& o = out.out.value();
    for (std::size_t r = 0; r < 2 * 16; ++r) {
      differing += std::memcmp(o.raw() + r * 2 * width, g.raw() + r * width, width * sizeof(float)) != 0;
      differing += std::memcmp(o.raw() + r * 2 * width + width, l.raw() + r * width, width * sizeof(float)) != 0;
    }
    ++cases;
  }
  CheckResult r;
  r.name = "saw_layer.residual_degeneracy";
  r.max_error = static_cast<double>(differing);
  r.passed = differing == 0;
  r.detail = std::to_string(cases) + " layers, bitwise comparison";
  return r;
}

namespace {

template <typename T>
bool same_bytes(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.raw(), b.raw(), a.size() * sizeof(T)) == 0;
}

template <typename T>
std::size_t differing_tensors(Model<T>& a, Model<T>& b) {
  std::vector<Tensor<T>> ta, tb;
  a.visit([&](const std::string&, Tensor<T>& t, TensorRole) { ta.push_back(t); });
  b.visit([&](const std::string&, Tensor<T>& t, TensorRole) { tb.push_back(t); });
  if (ta.size() != tb.size()) return std::max(ta.size(), tb.size());
  std::size_t d = 0;
  for (std::size_t i = 0; i < ta.size(); ++i) d += !same_bytes(ta[i], tb[i]);
  return d;
}

}  // namespace

CheckResult check_checkpoint_roundtrip(const fs::path& scratch, std::uint64_t seed) {
  SynthSpec spec;
  spec.per_class = 4;
  spec.n_points = 32;
  spec.seed = seed;
  const Dataset train = synth_dataset(spec, "train");
  ModelConfig cfg = small_config(Task::classify);
  cfg.k = 4;
  cfg.num_classes = 3;
  TrainConfig tc;
  tc.batch_size = 4;
  tc.seed = seed;

  std::size_t failures = 0;
  std::vector<std::string> notes;
  auto fail = [&](const std::string& what) {
    ++failures;
    notes.push_back(what);
  };

  fs::remove_all(scratch);
  // uninterrupted: two epochs
  Trainer<float> straight(Model<float>::build(cfg, seed), tc);
  straight.run_epoch(train);
  straight.run_epoch(train);
  // interrupted: one epoch, save, load, one more
  Trainer<float> first(Model<float>::build(cfg, seed), tc);
  first.run_epoch(train);
  save_checkpoint(scratch / "mid", first.model(), first.state(), nlohmann::json{{"note", "roundtrip"}});
  Checkpoint<float> ck = load_checkpoint<float>(scratch / "mid");

  Rng rng(seed);
  const Tensor<float> x = random_tensor<float>({3, 32, 3}, rng);
  if (!same_bytes(eval_forward(first.model(), x), eval_forward(ck.model, x))) fail("logits differ after load");
  if (differing_tensors(first.model(), ck.model)) fail("tensors differ after load");
  if (ck.state.epoch != 1 || ck.state.adam.step != first.state().adam.step) fail("trainer state differs after load");
  for (std::size_t i = 0; i < ck.state.adam.m.size(); ++i)
    if (!same_bytes(ck.state.adam.m[i], first.state().adam.m[i]) ||
        !same_bytes(ck.state.adam.v[i], first.state().adam.v[i]))
      fail("optimizer moments differ after load");
  if (ck.run_config.value("note", "") != "roundtrip") fail("run config snapshot lost");

  Trainer<float> resumed(std::move(ck.model), tc, std::move(ck.state));
  resumed.run_epoch(train);
  if (differing_tensors(straight.model(), resumed.model())) fail("resumed training diverges from uninterrupted");

  // schedule position survives a save at epoch 20
  TrainState<float> late = straight.state();
  late.epoch = 20;
  save_checkpoint(scratch / "late", straight.model(), late);
  Checkpoint<float> ck20 = load_checkpoint<float>(scratch / "late");
  const double lr20 = lr_at(ck20.state.epoch, tc.adam);
  if (lr20 != 0.0005) fail("lr after resume at epoch 20 is " + std::to_string(lr20));
  fs::remove_all(scratch);

  CheckResult r;
  r.name = "checkpoint.roundtrip_and_resume";
  r.max_error = static_cast<double>(failures);
  r.passed = failures == 0;
  r.detail = failures ? notes.front() : "logits, tensors, moments bitwise equal; resume matches; lr(20)=0.0005";
  return r;
}

CheckResult check_miou_oracle(std::size_t configs, std::uint64_t seed) {
  Rng rng(seed);
  std::size_t differing = 0;
  for (std::size_t c = 0; c < configs; ++c) {
    const std::size_t categories = 1 + uniform_index(rng, 4);
    std::vector<PartRange> ranges;
    std::int64_t next = 0;
    for (std::size_t i = 0; i < categories; ++i) {
      const auto count = static_cast<std::int64_t>(1 + uniform_index(rng, 5));
      ranges.push_back({next, count});
      next += count;
    }
    const std::size_t shapes = 1 + uniform_index(rng, 8);
    std::vector<std::vector<std::int64_t>> pred(shapes), truth(shapes);
    std::vector<std::int64_t> cat(shapes);
    for (std::size_t s = 0; s < shapes; ++s) {
      cat[s] = static_cast<std::int64_t>(uniform_index(rng, categories));
      const PartRange r = ranges[cat[s]];
      const std::size_t n = 1 + uniform_index(rng, 40);
      for (std::size_t i = 0; i < n; ++i) {
        pred[s].push_back(r.first + static_cast<std::int64_t>(uniform_index(rng, r.count)));
        truth[s].push_back(r.first + static_cast<std::int64_t>(uniform_index(rng, r.count)));
      }
    }
    const MiouResult got = miou(pred, truth, cat, ranges);
    // oracle: explicit point sets per part
    std::vector<double> cat_sum(categories, 0.0);
    std::vector<std::size_t> cat_count(categories, 0);
    double total = 0;
    for (std::size_t s = 0; s < shapes; ++s) {
      const PartRange r = ranges[cat[s]];
      double iou_sum = 0;
      for (std::int64_t p = r.first; p < r.first + r.count; ++p) {
        std::set<std::size_t> ps, ts, both, either;
        for (std::size_t i = 0; i < pred[s].size(); ++i) {
          if (pred[s][i] == p) ps.insert(i);
          if (truth[s][i] == p) ts.insert(i);
        }
        std::set_intersection(ps.begin(), ps.end(), ts.begin(), ts.end(), std::inserter(both, both.begin()));
        std::set_union(ps.begin(), ps.end(), ts.begin(), ts.end(), std::inserter(either, either.begin()));
        iou_sum += either.empty() ? 1.0 : static_cast<double>(both.size()) / static_cast<double>(either.size());
      }
      const double shape_iou = iou_sum / static_cast<double>(r.count);
      differing += got.shape_iou[s] != shape_iou;
      cat_sum[cat[s]] += shape_iou;
      ++cat_count[cat[s]];
      total += shape_iou;
    }
    for (std::size_t k = 0; k < categories; ++k) {
      const double expect = cat_count[k] ? cat_sum[k] / static_cast<double>(cat_count[k]) : 0.0;
      differing += got.category_miou[k] != expect || got.category_shapes[k] != cat_count[k];
    }
    differing += got.overall != total / static_cast<double>(shapes);
  }
  // symmetric half flip between two parts
  const MiouResult hand = miou({{0, 1, 1, 0}}, {{0, 0, 1, 1}}, {0}, {{0, 2}});
  const bool hand_ok = hand.overall == 1.0 / 3.0;
  CheckResult r;
  r.name = "miou.oracle";
  r.max_error = static_cast<double>(differing) + (hand_ok ? 0 : std::abs(hand.overall - 1.0 / 3.0));
  r.passed = differing == 0 && hand_ok;
  r.detail = std::to_string(configs) + " random configurations; half-flip case " + (hand_ok ? "= 1/3" : "wrong");
  return r;
}

std::vector<NamedCheck> default_suite(const SuiteOptions& o) {
  std::vector<NamedCheck> checks = layer_gradient_checks(o.gradient_seeds);
  for (Variant v : all_variants()) {
    ModelConfig cfg = tiny_model_config(v);
    const std::size_t seeds = v == Variant::sawnet ? o.gradient_seeds : 1;
    checks.push_back({"gradient.model." + to_string(v), [cfg, seeds] { return check_model_gradients(cfg, seeds); }});
  }
  {
    ModelConfig cfg = tiny_model_config(Variant::sawnet, Task::segment);
    checks.push_back({"gradient.model.sawnet.segment", [cfg] { return check_model_gradients(cfg, 1); }});
  }
  checks.push_back({"knn.oracle", [o] { return check_knn_oracle(o.knn_clouds, 8, o.knn_max_n, 11); }});
  checks.push_back({"kernels.parallel_matches_reference", [] { return check_kernel_equivalence(12); }});
  checks.push_back({"permutation.classification", [o] { return check_permutation_invariance(o.permutations, 13); }});
  checks.push_back({"permutation.segmentation", [o] { return check_segmentation_equivariance(o.permutations, 14); }});
  checks.push_back({"transformer.identity_at_init", [] { return check_transformer_identity(15); }});
  checks.push_back({"saw_layer.residual_degeneracy", [] { return check_residual_degeneracy(16); }});
  checks.push_back({"checkpoint.roundtrip_and_resume", [o] { return check_checkpoint_roundtrip(o.scratch, 17); }});
  checks.push_back({"miou.oracle", [o] { return check_miou_oracle(o.miou_configs, 18); }});
  return checks;
}

}  // namespace sawnet::verify
