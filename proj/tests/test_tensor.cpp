#include <gtest/gtest.h>

#include <cmath>

#include "sawnet/finite_diff.hpp"
#include "sawnet/ops.hpp"
#include "sawnet/tape.hpp"
#include "support.hpp"

using namespace sawnet;
using sawnet::testing::random_tensor;

namespace {

Tensor<double> mat(Shape s, std::vector<double> v) { return Tensor<double>(std::move(s), std::move(v)); }

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor<double>({0, 2}), DimensionError);
  Tensor<double> s = Tensor<double>::scalar(4);
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_EQ(s.item(), 4);
}

TEST(Tensor, AtIsRowMajor) {
  auto t = mat({2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at({1, 0}), 3);
  EXPECT_EQ(t.at({0, 2}), 2);
  EXPECT_THROW(t.at({2, 0}), DimensionError);
  EXPECT_THROW(t.at({0}), DimensionError);
}

TEST(Matmul, IdentityAndZero) {
  Tape<double> tape;
  auto a = tape.constant(mat({2, 2}, {1, 2, 3, 4}));
  auto id = tape.constant(mat({2, 2}, {1, 0, 0, 1}));
  auto zero = tape.constant(Tensor<double>({2, 2}));
  EXPECT_EQ(matmul(a, id).value(), mat({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(a, zero).value(), Tensor<double>({2, 2}));
}

TEST(Matmul, DotProduct) {
  Tape<double> tape;
  auto r = matmul(tape.constant(mat({1, 3}, {1, 2, 3})), tape.constant(mat({3, 1}, {1, 1, 1})));
  EXPECT_EQ(r.value(), mat({1, 1}, {6}));
}

TEST(Matmul, BatchBroadcastsAndMismatchNamesShapes) {
  Rng rng = make_rng(3);
  Tape<double> tape;
  auto a = tape.constant(random_tensor<double>({4, 2, 3}, rng));
  auto b = tape.constant(random_tensor<double>({3, 5}, rng));
  EXPECT_EQ(matmul(a, b).shape(), (Shape{4, 2, 5}));
  try {
    matmul(a, tape.constant(Tensor<double>({4, 5})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[4,2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4,5]"), std::string::npos);
  }
}

TEST(ReduceMax, HandCase) {
  Tape<double> tape;
  auto r = reduce_max(tape.constant(mat({2, 2}, {1, 5, 3, 2})), 1);
  EXPECT_EQ(r.values.value(), mat({2}, {5, 3}));
  EXPECT_EQ(r.argmax.storage(), (std::vector<std::int64_t>{1, 0}));
}

TEST(ReduceMax, SingletonAxisSqueezes) {
  Rng rng = make_rng(4);
  auto x = random_tensor<double>({3, 1, 2}, rng);
  Tape<double> tape;
  auto r = reduce_max(tape.constant(x), 1);
  EXPECT_EQ(r.values.value(), x.reshaped({3, 2}));
  for (auto a : r.argmax.data()) EXPECT_EQ(a, 0);
}

TEST(ReduceMax, TiesGoToFirstIndex) {
  Tape<double> tape;
  auto r = reduce_max(tape.constant(Tensor<double>({2, 4}, 7.0)), 1);
  EXPECT_EQ(r.values.value(), Tensor<double>({2}, 7.0));
  for (auto a : r.argmax.data()) EXPECT_EQ(a, 0);
  EXPECT_THROW(reduce_max(tape.constant(Tensor<double>({2, 4})), 2), DimensionError);
}

TEST(ReduceMax, GradientIsARouting) {
  Rng rng = make_rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> tape;
    auto x = tape.leaf(random_tensor<double>({3, 6, 4}, rng));
    auto r = reduce_max(x, 1);
    auto g = random_tensor<double>({3, 4}, rng);
    auto loss = sum(mul(r.values, tape.constant(g)));
    const std::vector<NodeId> leaves{x.id()};
    const auto dx = tape.backward(loss, leaves).at(x.id());
    double routed = 0, incoming = 0;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t n = 0; n < 6; ++n)
        for (std::size_t c = 0; c < 4; ++c) {
          const double v = dx.at({b, n, c});
          const bool winner = r.argmax.at({b, c}) == static_cast<std::int64_t>(n);
          if (!winner) EXPECT_EQ(v, 0.0);
          else EXPECT_EQ(v, g.at({b, c}));
          routed += v;
        }
    for (auto v : g.data()) incoming += v;
    EXPECT_NEAR(routed, incoming, 1e-12);
  }
}

TEST(Concat, SinglePartAndAppend) {
  Tape<double> tape;
  auto a = tape.constant(mat({2}, {1, 2}));
  EXPECT_EQ(concat(std::vector{a}, 0).value(), a.value());
  EXPECT_EQ(concat(std::vector{a, tape.constant(mat({1}, {3}))}, 0).value(), mat({3}, {1, 2, 3}));
}

TEST(Concat, ChannelWidthsAdd) {
  Tape<float> tape;
  auto g = tape.constant(Tensor<float>({2, 5, 64}));
  auto l = tape.constant(Tensor<float>({2, 5, 64}));
  EXPECT_EQ(concat(std::vector{g, l}, 2).shape(), (Shape{2, 5, 128}));
  EXPECT_THROW(concat(std::vector{g, tape.constant(Tensor<float>({2, 4, 64}))}, 2), DimensionError);
}

TEST(Concat, SliceRoundTripIsIdentity) {
  Rng rng = make_rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    Shape s{2 + uniform_index(rng, 3), 2 + uniform_index(rng, 4), 2 + uniform_index(rng, 5)};
    const std::size_t axis = uniform_index(rng, 3);
    const std::size_t cut = 1 + uniform_index(rng, s[axis] - 1);
    Tape<double> tape;
    auto x = tape.constant(random_tensor<double>(s, rng));
    auto parts = std::vector{slice(x, axis, 0, cut), slice(x, axis, cut, s[axis])};
    EXPECT_EQ(concat(parts, axis).value(), x.value());
  }
}

TEST(Add, HandCasesAndMismatch) {
  Tape<double> tape;
  auto x = tape.constant(mat({2}, {1, 2}));
  EXPECT_EQ(add(x, tape.constant(Tensor<double>({2}))).value(), x.value());
  EXPECT_EQ(add(x, tape.constant(mat({2}, {3, 4}))).value(), mat({2}, {4, 6}));
  EXPECT_THROW(add(x, tape.constant(Tensor<double>({3}))), DimensionError);
}

TEST(Backward, SumOfSquares) {
  Tape<double> tape;
  auto x = tape.leaf(mat({3}, {1, -2, 3}));
  const std::vector<NodeId> leaves{x.id()};
  auto g = tape.backward(sum(mul(x, x)), leaves);
  EXPECT_EQ(g.at(x.id()), mat({3}, {2, -4, 6}));
}

TEST(Backward, DisconnectedLeafGetsZero) {
  Tape<double> tape;
  auto c = tape.leaf(Tensor<double>::scalar(2));
  auto other = tape.leaf(mat({2}, {1, 1}));
  const std::vector<NodeId> leaves{other.id()};
  auto g = tape.backward(c, leaves);
  EXPECT_EQ(g.at(other.id()), Tensor<double>({2}));
}

TEST(Backward, Errors) {
  Tape<double> tape;
  auto x = tape.leaf(mat({2}, {1, 2}));
  auto y = mul(x, x);
  const std::vector<NodeId> leaves{x.id()};
  EXPECT_THROW(tape.backward(y, leaves), ContractError);
  const std::vector<NodeId> bogus{y.id()};
  EXPECT_THROW(tape.backward(sum(y), bogus), UnknownLeafError);
  auto loss = sum(y);
  tape.backward(loss, leaves);
  EXPECT_THROW(tape.backward(loss, leaves), ContractError);
}

TEST(Backward, ReusedInputAccumulates) {
  Tape<double> tape;
  auto x = tape.leaf(mat({2}, {3, -1}));
  auto loss = sum(add(add(x, x), scale(x, 2.0)));
  const std::vector<NodeId> leaves{x.id()};
  EXPECT_EQ(tape.backward(loss, leaves).at(x.id()), mat({2}, {4, 4}));
}

TEST(FiniteDiff, LinearGivesOnes) {
  Rng rng = make_rng(7);
  auto x = random_tensor<double>({5}, rng);
  std::function<double(const Tensor<double>&)> f = [](const Tensor<double>& t) {
    double s = 0;
    for (auto v : t.data()) s += v;
    return s;
  };
  auto g = finite_diff(f, x, 1e-5);
  for (auto v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDiff, SquareAtOne) {
  std::function<double(const Tensor<double>&)> f = [](const Tensor<double>& t) { return t[0] * t[0]; };
  auto g = finite_diff(f, mat({1}, {1}), 1e-5);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
}

TEST(FiniteDiff, NonFiniteValueThrows) {
  std::function<double(const Tensor<double>&)> f = [](const Tensor<double>& t) { return std::log(t[0]); };
  EXPECT_THROW(finite_diff(f, mat({1}, {0}), 1e-5), NumericError);
}

TEST(FiniteDiff, PiecewiseStaysOnOneSideOfAKink) {
  // |x| at x = 0.5e-5: the first stencil straddles the kink at 0.
  std::function<Probe<double>(const Tensor<double>&)> f = [](const Tensor<double>& t) {
    return Probe<double>{std::abs(t[0]), t[0] >= 0 ? 1u : 2u};
  };
  auto r = finite_diff_piecewise(f, mat({1}, {0.5e-5}), 1e-4, 8, true);
  EXPECT_NEAR(r.grad[0], 1.0, 1e-9);
  EXPECT_EQ(r.unresolved, 0u);
}

TEST(FiniteDiff, ExtrapolationCancelsCurvature) {
  std::function<Probe<double>(const Tensor<double>&)> f = [](const Tensor<double>& t) {
    return Probe<double>{std::exp(3 * t[0]), 0};
  };
  const double exact = 3 * std::exp(0.6);
  auto plain = finite_diff_piecewise(f, mat({1}, {0.2}), 1e-2, 0, false);
  auto refined = finite_diff_piecewise(f, mat({1}, {0.2}), 1e-2, 0, true);
  EXPECT_LT(std::abs(refined.grad[0] - exact), std::abs(plain.grad[0] - exact) / 100);
}

TEST(Determinism, SameInputsSameBits) {
  auto run = [] {
    Rng rng = make_rng(8);
    Tape<float> tape;
    auto a = tape.constant(random_tensor<float>({3, 17, 9}, rng));
    auto b = tape.constant(random_tensor<float>({9, 33}, rng));
    return relu(matmul(a, b)).value();
  };
  EXPECT_TRUE(sawnet::testing::same_bits(run(), run()));
}

TEST(Dropout, RateBoundsAndIdentityCases) {
  Rng rng = make_rng(9);
  Tape<double> tape;
  auto x = tape.constant(random_tensor<double>({4, 4}, rng));
  EXPECT_THROW(dropout(x, 1.0, Mode::train, rng), ConfigError);
  EXPECT_EQ(dropout(x, 0.0, Mode::train, rng).value(), x.value());
  EXPECT_EQ(dropout(x, 0.7, Mode::eval, rng).value(), x.value());
}

TEST(Dropout, PreservesExpectation) {
  Rng rng = make_rng(10);
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({100000}, 1.0));
  auto y = dropout(x, 0.5, Mode::train, rng).value();
  double s = 0;
  for (auto v : y.data()) s += v;
  EXPECT_NEAR(s / 100000, 1.0, 0.01);
}

TEST(Relu, Definition) {
  Tape<double> tape;
  EXPECT_EQ(relu(tape.constant(mat({3}, {-1, 0, 2}))).value(), mat({3}, {0, 0, 2}));
}
