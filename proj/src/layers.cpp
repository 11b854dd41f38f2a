#include "sawnet/layers.hpp"

#include <cmath>
#include <cstring>
#include <memory>

#include "sawnet/kernels.hpp"

namespace sawnet {

double glorot_limit(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <typename T>
Tensor<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double lim = glorot_limit(fan_in, fan_out);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(uniform(rng, -lim, lim));
  return t;
}

template <typename T>
SharedMlpParams<T> SharedMlpParams<T>::glorot(std::size_t cin, std::size_t cout, Rng& rng) {
  return {glorot_uniform<T>({cin, cout}, cin, cout, rng), Tensor<T>({cout})};
}

template <typename T>
void SharedMlpParams<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  v(prefix + ".weight", weight, TensorRole::parameter);
  v(prefix + ".bias", bias, TensorRole::parameter);
}

template <typename T>
BatchNormState<T> BatchNormState<T>::make(std::size_t channels, double decay, double epsilon) {
  BatchNormState s;
  s.gamma = Tensor<T>({channels}, T{1});
  s.beta = Tensor<T>({channels});
  s.running_mean = Tensor<T>({channels});
  s.running_var = Tensor<T>({channels}, T{1});
  s.decay = static_cast<T>(decay);
  s.epsilon = static_cast<T>(epsilon);
  return s;
}

template <typename T>
void BatchNormState<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  v(prefix + ".gamma", gamma, TensorRole::parameter);
  v(prefix + ".beta", beta, TensorRole::parameter);
  v(prefix + ".running_mean", running_mean, TensorRole::buffer);
  v(prefix + ".running_var", running_var, TensorRole::buffer);
}

template <typename T>
GroupedMlpParams<T> GroupedMlpParams<T>::glorot(std::size_t cin, std::size_t cout, std::size_t groups, Rng& rng) {
  if (groups == 0 || cin % groups != 0 || cout % groups != 0)
    throw ConfigError("grouped MLP: " + std::to_string(groups) + " groups do not divide widths " +
                      std::to_string(cin) + " -> " + std::to_string(cout));
  const std::size_t gi = cin / groups, go = cout / groups;
  return {groups, glorot_uniform<T>({groups, gi, go}, gi, go, rng), Tensor<T>({cout})};
}

template <typename T>
Tensor<T> GroupedMlpParams<T>::block_diagonal() const {
  const std::size_t gi = weight.shape()[1], go = weight.shape()[2];
  Tensor<T> full({groups * gi, groups * go});
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < gi; ++i)
      for (std::size_t o = 0; o < go; ++o)
        full[(g * gi + i) * groups * go + g * go + o] = weight[(g * gi + i) * go + o];
  return full;
}

template <typename T>
void GroupedMlpParams<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  v(prefix + ".weight", weight, TensorRole::parameter);
  v(prefix + ".bias", bias, TensorRole::parameter);
}

template <typename T>
DepthwiseMlpParams<T> DepthwiseMlpParams<T>::glorot(std::size_t points, std::size_t cin, std::size_t cmid,
                                                    std::size_t cout, Rng& rng) {
  DepthwiseMlpParams p;
  p.point_weight = glorot_uniform<T>({points, cin, cmid}, cin, cmid, rng);
  p.point_bias = Tensor<T>({cmid});
  p.mix = SharedMlpParams<T>::glorot(cmid, cout, rng);
  return p;
}

template <typename T>
void DepthwiseMlpParams<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  v(prefix + ".point_weight", point_weight, TensorRole::parameter);
  v(prefix + ".point_bias", point_bias, TensorRole::parameter);
  mix.visit(prefix + ".mix", v);
}

template <typename T>
Var<T> shared_mlp(Context<T>& ctx, Var<T> x, SharedMlpParams<T>& p) {
  if (x.shape().empty() || x.shape().back() != p.in_width())
    throw DimensionError("shared_mlp: input " + to_string(x.shape()) + " vs weight " + to_string(p.weight.shape()));
  return linear(x, ctx.bind(p.weight), ctx.bind(p.bias));
}

template <typename T>
Var<T> batch_norm(Context<T>& ctx, Var<T> x, BatchNormState<T>& s) {
  const auto& xv = x.value();
  const std::size_t c = s.channels();
  if (xv.rank() < 1 || xv.shape().back() != c)
    throw DimensionError("batch_norm: input " + to_string(xv.shape()) + " vs " + std::to_string(c) + " channels");
  const std::size_t rows = xv.size() / c;
  Var<T> gamma = ctx.bind(s.gamma);
  Var<T> beta = ctx.bind(s.beta);
  const T* gv = gamma.value().raw();
  const T* bv = beta.value().raw();

  std::vector<T> mean(c), inv_std(c);
  const bool train = ctx.mode() == Mode::train;
  if (train) {
    std::vector<double> m(c, 0.0), var(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = xv.raw() + r * c;
      for (std::size_t j = 0; j < c; ++j) m[j] += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) m[j] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = xv.raw() + r * c;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = row[j] - m[j];
        var[j] += d * d;
      }
    }
    for (std::size_t j = 0; j < c; ++j) {
      var[j] /= static_cast<double>(rows);
      mean[j] = static_cast<T>(m[j]);
      inv_std[j] = static_cast<T>(1.0 / std::sqrt(var[j] + static_cast<double>(s.epsilon)));
      s.running_mean[j] = s.decay * s.running_mean[j] + (T{1} - s.decay) * static_cast<T>(m[j]);
      s.running_var[j] = s.decay * s.running_var[j] + (T{1} - s.decay) * static_cast<T>(var[j]);
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mean[j] = s.running_mean[j];
      inv_std[j] = T{1} / std::sqrt(s.running_var[j] + s.epsilon);
    }
  }

  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.raw() + r * c;
    T* o = out.raw() + r * c;
    for (std::size_t j = 0; j < c; ++j) o[j] = gv[j] * ((row[j] - mean[j]) * inv_std[j]) + bv[j];
  }

  Tape<T>& tape = ctx.tape();
  const NodeId ix = x.id(), ig = gamma.id();
  return tape.record(
      std::move(out), {x.id(), gamma.id(), beta.id()},
      [&tape, ix, ig, mean = std::move(mean), inv_std = std::move(inv_std), rows, c, train](
          const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
        const T* gam = tape.value(ig).raw();
        const T* xs = tape.value(ix).raw();
        // normalised input, recomputed exactly as in the forward pass
        auto xhat = [&](std::size_t r, std::size_t j) { return (xs[r * c + j] - mean[j]) * inv_std[j]; };
        std::vector<T> sum_g(c, T{0}), sum_gh(c, T{0});
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.raw() + r * c;
          for (std::size_t j = 0; j < c; ++j) {
            sum_g[j] += gr[j];
            sum_gh[j] += gr[j] * xhat(r, j);
          }
        }
        if (gin[1])
          for (std::size_t j = 0; j < c; ++j) (*gin[1])[j] += sum_gh[j];
        if (gin[2])
          for (std::size_t j = 0; j < c; ++j) (*gin[2])[j] += sum_g[j];
        if (!gin[0]) return;
        T* dx = gin[0]->raw();
        if (train) {
          // dx = gamma * inv_std / R * (R g - sum(g) - xhat * sum(g xhat))
          const T inv_rows = T{1} / static_cast<T>(rows);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g.raw() + r * c;
            T* d = dx + r * c;
            for (std::size_t j = 0; j < c; ++j)
              d[j] += gam[j] * inv_std[j] * (gr[j] - inv_rows * sum_g[j] - xhat(r, j) * inv_rows * sum_gh[j]);
          }
        } else {
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g.raw() + r * c;
            T* d = dx + r * c;
            for (std::size_t j = 0; j < c; ++j) d[j] += gr[j] * gam[j] * inv_std[j];
          }
        }
      });
}

template <typename T>
Var<T> grouped_shared_mlp(Context<T>& ctx, Var<T> x, GroupedMlpParams<T>& p) {
  const auto& xv = x.value();
  const std::size_t groups = p.groups, cin = p.in_width(), cout = p.out_width();
  if (xv.rank() < 1 || xv.shape().back() != cin)
    throw DimensionError("grouped_shared_mlp: input " + to_string(xv.shape()) + " vs width " + std::to_string(cin));
  const std::size_t gi = cin / groups, go = cout / groups, rows = xv.size() / cin;
  Var<T> w = ctx.bind(p.weight);
  Var<T> b = ctx.bind(p.bias);
  Shape out_shape = xv.shape();
  out_shape.back() = cout;
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) std::memcpy(out.raw() + r * cout, b.value().raw(), cout * sizeof(T));
  for (std::size_t g = 0; g < groups; ++g)
    kernels::gemm(rows, go, gi, xv.raw() + g * gi, cin, w.value().raw() + g * gi * go, go, out.raw() + g * go, cout,
                  true);

  Tape<T>& tape = ctx.tape();
  const NodeId ix = x.id(), iw = w.id();
  return tape.record(std::move(out), {ix, iw, b.id()},
                     [&tape, ix, iw, groups, gi, go, rows, cin, cout](const Tensor<T>& g,
                                                                      std::span<Tensor<T>* const> gin) {
                       const auto& xv = tape.value(ix);
                       const auto& wv = tape.value(iw);
                       std::vector<T> wt(gi * go);
                       for (std::size_t k = 0; k < groups; ++k) {
                         const T* wk = wv.raw() + k * gi * go;
                         if (gin[0]) {
                           kernels::transpose(gi, go, wk, wt.data());
                           kernels::gemm(rows, gi, go, g.raw() + k * go, cout, wt.data(), gi, gin[0]->raw() + k * gi,
                                         cin, true);
                         }
                         if (gin[1])
                           kernels::gemm_tn(gi, go, rows, xv.raw() + k * gi, cin, g.raw() + k * go, cout,
                                            gin[1]->raw() + k * gi * go, go, true);
                       }
                       if (gin[2]) {
                         T* gb = gin[2]->raw();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t o = 0; o < cout; ++o) gb[o] += g[r * cout + o];
                       }
                     });
}

template <typename T>
Var<T> depthwise_shared_mlp(Context<T>& ctx, Var<T> x, DepthwiseMlpParams<T>& p) {
  const auto& xv = x.value();
  const std::size_t n = p.points(), cin = p.point_weight.shape()[1], cmid = p.point_weight.shape()[2];
  if (xv.rank() != 3 || xv.shape()[2] != cin)
    throw DimensionError("depthwise_shared_mlp: input " + to_string(xv.shape()) + " vs width " + std::to_string(cin));
  if (xv.shape()[1] != n)
    throw DimensionError("depthwise_shared_mlp: configured for " + std::to_string(n) + " points, input has " +
                         std::to_string(xv.shape()[1]));
  const std::size_t batch = xv.shape()[0];
  Var<T> w = ctx.bind(p.point_weight);
  Var<T> b = ctx.bind(p.point_bias);
  Tensor<T> mid({batch, n, cmid});
  for (std::size_t r = 0; r < batch * n; ++r) std::memcpy(mid.raw() + r * cmid, b.value().raw(), cmid * sizeof(T));
  for (std::size_t i = 0; i < n; ++i)
    kernels::gemm(batch, cmid, cin, xv.raw() + i * cin, n * cin, w.value().raw() + i * cin * cmid, cmid,
                  mid.raw() + i * cmid, n * cmid, true);

  Tape<T>& tape = ctx.tape();
  const NodeId ix = x.id(), iw = w.id();
  Var<T> stage1 = tape.record(
      std::move(mid), {ix, iw, b.id()},
      [&tape, ix, iw, batch, n, cin, cmid](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
        const auto& xv = tape.value(ix);
        const auto& wv = tape.value(iw);
        std::vector<T> wt(cin * cmid);
        for (std::size_t i = 0; i < n; ++i) {
          const T* wi = wv.raw() + i * cin * cmid;
          if (gin[0]) {
            kernels::transpose(cin, cmid, wi, wt.data());
            kernels::gemm(batch, cin, cmid, g.raw() + i * cmid, n * cmid, wt.data(), cin, gin[0]->raw() + i * cin,
                          n * cin, true);
          }
          if (gin[1])
            kernels::gemm_tn(cin, cmid, batch, xv.raw() + i * cin, n * cin, g.raw() + i * cmid, n * cmid,
                             gin[1]->raw() + i * cin * cmid, cmid, true);
        }
        if (gin[2]) {
          T* gb = gin[2]->raw();
          for (std::size_t r = 0; r < batch * n; ++r)
            for (std::size_t o = 0; o < cmid; ++o) gb[o] += g[r * cmid + o];
        }
      });
  return shared_mlp(ctx, stage1, p.mix);
}

#define SAWNET_INSTANTIATE_LAYERS(T)                                                   \
  template Tensor<T> glorot_uniform<T>(Shape, std::size_t, std::size_t, Rng&);         \
  template struct SharedMlpParams<T>;                                                  \
  template struct BatchNormState<T>;                                                   \
  template struct GroupedMlpParams<T>;                                                 \
  template struct DepthwiseMlpParams<T>;                                               \
  template Var<T> shared_mlp<T>(Context<T>&, Var<T>, SharedMlpParams<T>&);             \
  template Var<T> batch_norm<T>(Context<T>&, Var<T>, BatchNormState<T>&);              \
  template Var<T> grouped_shared_mlp<T>(Context<T>&, Var<T>, GroupedMlpParams<T>&);    \
  template Var<T> depthwise_shared_mlp<T>(Context<T>&, Var<T>, DepthwiseMlpParams<T>&);

SAWNET_INSTANTIATE_LAYERS(float)
SAWNET_INSTANTIATE_LAYERS(double)

}  // namespace sawnet
