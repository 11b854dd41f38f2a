#include <gtest/gtest.h>

#include "sawnet/layers.hpp"
#include "support.hpp"

using namespace sawnet;
using sawnet::testing::max_abs_diff;
using sawnet::testing::permute_axis1;
using sawnet::testing::random_permutation;
using sawnet::testing::random_tensor;
using sawnet::testing::same_bits;

namespace {

// Everything a layer test needs for one forward pass.
template <typename T>
struct Pass {
  Tape<T> tape;
  Rng rng;
  Context<T> ctx;
  explicit Pass(Mode mode = Mode::train, std::uint64_t seed = 0) : rng(make_rng(seed)), ctx(tape, mode, rng) {}
};

}  // namespace

TEST(SharedMlp, IdentityParametersPassThrough) {
  Rng rng = make_rng(1);
  auto x = random_tensor<double>({2, 5, 3}, rng);
  SharedMlpParams<double> p{Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor<double>({3})};
  Pass<double> pass;
  EXPECT_EQ(shared_mlp(pass.ctx, pass.ctx.input(x), p).value(), x);
}

TEST(SharedMlp, HandCase) {
  SharedMlpParams<double> p{Tensor<double>({2, 1}, {1, 2}), Tensor<double>({1}, {1})};
  Pass<double> pass;
  auto y = shared_mlp(pass.ctx, pass.ctx.input(Tensor<double>({2, 2}, {1, 0, 0, 1})), p);
  EXPECT_EQ(y.value(), Tensor<double>({2, 1}, {2, 3}));
}

TEST(SharedMlp, WidthMismatchThrows) {
  Rng rng = make_rng(2);
  auto p = SharedMlpParams<double>::glorot(3, 4, rng);
  Pass<double> pass;
  EXPECT_THROW(shared_mlp(pass.ctx, pass.ctx.input(Tensor<double>({2, 5, 4})), p), DimensionError);
}

TEST(SharedMlp, PermutationEquivariantBitExact) {
  Rng rng = make_rng(3);
  auto p = SharedMlpParams<float>::glorot(6, 16, rng);
  for (int trial = 0; trial < 25; ++trial) {
    auto x = random_tensor<float>({2, 37, 6}, rng);
    auto perm = random_permutation(37, rng);
    Pass<float> pass;
    auto y = shared_mlp(pass.ctx, pass.ctx.input(x), p).value();
    auto yp = shared_mlp(pass.ctx, pass.ctx.input(permute_axis1(x, perm)), p).value();
    EXPECT_TRUE(same_bits(yp, permute_axis1(y, perm)));
  }
}

TEST(Glorot, BoundAndZeroBias) {
  EXPECT_DOUBLE_EQ(glorot_limit(3, 3), 1.0);
  Rng rng = make_rng(4);
  auto p = SharedMlpParams<double>::glorot(10, 30, rng);
  const double lim = glorot_limit(10, 30);
  for (auto w : p.weight.data()) EXPECT_LE(std::abs(w), lim);
  for (auto b : p.bias.data()) EXPECT_EQ(b, 0.0);
}

TEST(BatchNorm, ConstantBatchGivesZeros) {
  auto s = BatchNormState<double>::make(2);
  Pass<double> pass;
  auto y = batch_norm(pass.ctx, pass.ctx.input(Tensor<double>({6, 2}, 3.5)), s).value();
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  Rng rng = make_rng(5);
  auto s = BatchNormState<double>::make(3);
  s.gamma = Tensor<double>({3});
  s.beta = Tensor<double>({3}, {0.5, -1, 2});
  for (Mode mode : {Mode::train, Mode::eval}) {
    Pass<double> pass(mode);
    auto y = batch_norm(pass.ctx, pass.ctx.input(random_tensor<double>({4, 5, 3}, rng)), s).value();
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], s.beta[i % 3]);
  }
}

TEST(BatchNorm, TwoValueBatchAndRunningStatistics) {
  auto s = BatchNormState<double>::make(1, 0.7, 1e-5);
  Pass<double> pass;
  auto y = batch_norm(pass.ctx, pass.ctx.input(Tensor<double>({2, 1}, {-1, 1})), s).value();
  EXPECT_NEAR(y[0], -1.0, 1e-5);
  EXPECT_NEAR(y[1], 1.0, 1e-5);
  EXPECT_EQ(s.running_mean[0], 0.0);
  EXPECT_DOUBLE_EQ(s.running_var[0], 0.7 * 1.0 + 0.3 * 1.0);
}

TEST(BatchNorm, EvalBeforeTrainingUsesInitialStatistics) {
  Rng rng = make_rng(6);
  auto s = BatchNormState<double>::make(4);
  auto x = random_tensor<double>({3, 4}, rng);
  Pass<double> pass(Mode::eval);
  auto y = batch_norm(pass.ctx, pass.ctx.input(x), s).value();
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1 + 1e-5), 1e-15);
}

TEST(BatchNorm, EvalIsDeterministicAndStateless) {
  Rng rng = make_rng(7);
  auto s = BatchNormState<float>::make(8);
  {
    Pass<float> warm;
    batch_norm(warm.ctx, warm.ctx.input(random_tensor<float>({4, 10, 8}, rng, -2, 3)), s);
  }
  const auto mean = s.running_mean, var = s.running_var;
  auto x = random_tensor<float>({4, 10, 8}, rng);
  Pass<float> a(Mode::eval), b(Mode::eval);
  auto ya = batch_norm(a.ctx, a.ctx.input(x), s).value();
  auto yb = batch_norm(b.ctx, b.ctx.input(x), s).value();
  EXPECT_TRUE(same_bits(ya, yb));
  EXPECT_TRUE(same_bits(mean, s.running_mean));
  EXPECT_TRUE(same_bits(var, s.running_var));
}

TEST(BatchNorm, ChannelMismatchThrows) {
  auto s = BatchNormState<double>::make(3);
  Pass<double> pass;
  EXPECT_THROW(batch_norm(pass.ctx, pass.ctx.input(Tensor<double>({2, 4})), s), DimensionError);
}

TEST(GroupedMlp, OneGroupIsSharedMlp) {
  Rng rng = make_rng(8);
  auto g = GroupedMlpParams<double>::glorot(6, 9, 1, rng);
  SharedMlpParams<double> s{g.weight.reshaped({6, 9}), g.bias};
  auto x = random_tensor<double>({2, 7, 6}, rng);
  Pass<double> pass;
  EXPECT_TRUE(same_bits(grouped_shared_mlp(pass.ctx, pass.ctx.input(x), g).value(),
                        shared_mlp(pass.ctx, pass.ctx.input(x), s).value()));
}

TEST(GroupedMlp, UnitBlocksPassChannelsThrough) {
  Rng rng = make_rng(9);
  GroupedMlpParams<double> g{5, Tensor<double>({5, 1, 1}, 1.0), Tensor<double>({5})};
  auto x = random_tensor<double>({3, 4, 5}, rng);
  Pass<double> pass;
  EXPECT_EQ(grouped_shared_mlp(pass.ctx, pass.ctx.input(x), g).value(), x);
}

TEST(GroupedMlp, EqualsBlockDiagonalBitExact) {
  Rng rng = make_rng(10);
  for (std::size_t groups : {2u, 3u, 4u}) {
    auto g = GroupedMlpParams<float>::glorot(12, 24, groups, rng);
    for (auto& b : g.bias.storage()) b = static_cast<float>(uniform(rng, -1, 1));
    SharedMlpParams<float> s{g.block_diagonal(), g.bias};
    auto x = random_tensor<float>({2, 19, 12}, rng);
    Pass<float> pass;
    EXPECT_TRUE(same_bits(grouped_shared_mlp(pass.ctx, pass.ctx.input(x), g).value(),
                          shared_mlp(pass.ctx, pass.ctx.input(x), s).value()))
        << groups << " groups";
  }
}

TEST(GroupedMlp, DivisibilityIsAConfigError) {
  Rng rng = make_rng(11);
  EXPECT_THROW(GroupedMlpParams<double>::glorot(6, 8, 4, rng), ConfigError);
}

TEST(DepthwiseMlp, SharedPointWeightsCollapseToTwoSharedMlps) {
  Rng rng = make_rng(12);
  const std::size_t n = 9;
  auto d = DepthwiseMlpParams<double>::glorot(n, 4, 4, 6, rng);
  auto first = SharedMlpParams<double>::glorot(4, 4, rng);
  for (auto& b : first.bias.storage()) b = uniform(rng, -1, 1);
  for (std::size_t i = 0; i < n; ++i)
    std::copy(first.weight.storage().begin(), first.weight.storage().end(), d.point_weight.raw() + i * 16);
  d.point_bias = first.bias;
  auto x = random_tensor<double>({3, n, 4}, rng);
  Pass<double> pass;
  auto want = shared_mlp(pass.ctx, shared_mlp(pass.ctx, pass.ctx.input(x), first), d.mix).value();
  EXPECT_LT(max_abs_diff(depthwise_shared_mlp(pass.ctx, pass.ctx.input(x), d).value(), want), 1e-13);
}

TEST(DepthwiseMlp, SwappingPointsChangesOutput) {
  Rng rng = make_rng(13);
  auto d = DepthwiseMlpParams<double>::glorot(2, 3, 3, 4, rng);
  auto x = random_tensor<double>({1, 2, 3}, rng);
  Pass<double> pass;
  auto y = depthwise_shared_mlp(pass.ctx, pass.ctx.input(x), d).value();
  auto ys = depthwise_shared_mlp(pass.ctx, pass.ctx.input(permute_axis1(x, {1, 0})), d).value();
  EXPECT_GT(max_abs_diff(ys, permute_axis1(y, {1, 0})), 1e-6);
}

TEST(DepthwiseMlp, ZeroPointWeightsLeaveTheBiasPath) {
  Rng rng = make_rng(14);
  auto d = DepthwiseMlpParams<double>::glorot(5, 3, 3, 4, rng);
  d.point_weight = Tensor<double>(d.point_weight.shape());
  d.point_bias = Tensor<double>({3}, {0.2, -0.4, 0.9});
  auto x = random_tensor<double>({2, 5, 3}, rng);
  Pass<double> pass;
  auto y = depthwise_shared_mlp(pass.ctx, pass.ctx.input(x), d).value();
  for (std::size_t r = 1; r < 10; ++r)
    for (std::size_t o = 0; o < 4; ++o) EXPECT_EQ(y[r * 4 + o], y[o]);
}

TEST(DepthwiseMlp, PointCountMismatchThrows) {
  Rng rng = make_rng(15);
  auto d = DepthwiseMlpParams<double>::glorot(5, 3, 3, 4, rng);
  Pass<double> pass;
  EXPECT_THROW(depthwise_shared_mlp(pass.ctx, pass.ctx.input(Tensor<double>({1, 6, 3})), d), DimensionError);
}

TEST(Dense, DropoutOnlyInTrainMode) {
  Rng rng = make_rng(16);
  auto p = DenseParams<double>::glorot(8, 8, rng);
  auto x = random_tensor<double>({4, 8}, rng);
  Pass<double> eval(Mode::eval), train(Mode::train);
  auto clean = dense(eval.ctx, eval.ctx.input(x), p);
  EXPECT_EQ(dropout(eval.ctx, clean, 0.5).value(), clean.value());
  auto dropped = dropout(train.ctx, dense(train.ctx, train.ctx.input(x), p), 0.5).value();
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < dropped.size(); ++i) {
    if (dropped[i] == 0) ++zeros;
    else EXPECT_DOUBLE_EQ(dropped[i], 2 * clean.value()[i]);
  }
  EXPECT_GT(zeros, 0u);
}

TEST(Context, BindingIsStable) {
  Rng rng = make_rng(17);
  auto p = SharedMlpParams<double>::glorot(2, 2, rng);
  Pass<double> pass;
  auto a = pass.ctx.bind(p.weight);
  auto b = pass.ctx.bind(p.weight);
  EXPECT_EQ(a.id(), b.id());
  EXPECT_EQ(pass.ctx.bindings().size(), 1u);
}
