#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "sawnet/train.hpp"
#include "support.hpp"

using namespace sawnet;
using sawnet::testing::random_tensor;
using sawnet::testing::same_bits;
namespace fs = std::filesystem;

namespace {

double ce(const Tensor<double>& logits, std::vector<std::int64_t> labels) {
  Tape<double> tape;
  return cross_entropy(tape.constant(logits), std::span<const std::int64_t>(labels)).value().item();
}

ModelConfig tiny() {
  ModelConfig c;
  c.k = 4;
  c.transformer.widths = {4};
  c.transformer.head = {8};
  c.trunk = {8};
  c.aggregate_width = 16;
  c.head = {8};
  c.num_classes = 3;
  return c;
}

Dataset toy(std::size_t per_class, std::size_t n, const std::string& split = "train") {
  SynthSpec s;
  s.per_class = per_class;
  s.n_points = n;
  s.seed = 9;
  return synth_dataset(s, split);
}

template <typename T>
Tensor<T> logits(Model<T>& m, const Tensor<T>& x) {
  Tape<T> tape;
  Rng rng = make_rng(0);
  Context<T> ctx(tape, Mode::eval, rng);
  return m.forward(ctx, ctx.input(x)).value();
}

template <typename T>
std::vector<Tensor<T>> all_tensors(Model<T>& m) {
  std::vector<Tensor<T>> out;
  m.visit([&](const std::string&, Tensor<T>& t, TensorRole) { out.push_back(t); });
  return out;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("sawnet-test-train-" + name);
  fs::remove_all(p);
  return p;
}

// Brute-force set counting: for each part of the category, |P & T| / |P | T| with sets of point indices.
double oracle_shape_iou(const std::vector<std::int64_t>& pred, const std::vector<std::int64_t>& truth, PartRange r) {
  double total = 0;
  for (std::int64_t p = r.first; p < r.first + r.count; ++p) {
    std::set<std::size_t> ps, ts, both, either;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == p) ps.insert(i);
      if (truth[i] == p) ts.insert(i);
    }
    std::set_intersection(ps.begin(), ps.end(), ts.begin(), ts.end(), std::inserter(both, both.end()));
    std::set_union(ps.begin(), ps.end(), ts.begin(), ts.end(), std::inserter(either, either.end()));
    total += either.empty() ? 1.0 : double(both.size()) / double(either.size());
  }
  return total / double(r.count);
}

}  // namespace

TEST(CrossEntropy, UniformLogits) {
  EXPECT_NEAR(ce(Tensor<double>({1, 40}), {7}), std::log(40.0), 1e-12);
  EXPECT_NEAR(std::log(40.0), 3.6889, 1e-4);
}

TEST(CrossEntropy, HandCaseAndConfidentLimit) {
  EXPECT_NEAR(ce(Tensor<double>({1, 2}, {2, 1}), {0}), 0.3133, 1e-4);
  EXPECT_LT(ce(Tensor<double>({1, 3}, {60, 0, 0}), {0}), 1e-20);
}

TEST(CrossEntropy, ShiftInvariant) {
  Rng rng = make_rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<double>({5, 7}, rng, -4, 4);
    std::vector<std::int64_t> labels(5);
    for (auto& l : labels) l = static_cast<std::int64_t>(uniform_index(rng, 7));
    Tensor<double> shifted = x;
    const double c = uniform(rng, -50, 50);
    for (auto& v : shifted.storage()) v += c;
    EXPECT_NEAR(ce(x, labels), ce(shifted, labels), 1e-6);
  }
}

TEST(CrossEntropy, PerPointLogitsAndBadLabels) {
  EXPECT_NEAR(ce(Tensor<double>({2, 3, 4}), std::vector<std::int64_t>(6, 1)), std::log(4.0), 1e-12);
  Tape<double> tape;
  std::vector<std::int64_t> labels{0, 5};
  std::vector<std::string> names{"first", "second.off"};
  try {
    cross_entropy(tape.constant(Tensor<double>({2, 3})), std::span<const std::int64_t>(labels),
                  std::span<const std::string>(names));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("second.off"), std::string::npos);
  }
}

TEST(Adam, FirstStepMovesByLrAgainstTheSign) {
  Rng rng = make_rng(2);
  Tensor<double> p = random_tensor<double>({10}, rng);
  const Tensor<double> before = p;
  std::vector<Tensor<double>> g{random_tensor<double>({10}, rng)};
  AdamState<double> state;
  std::vector<Tensor<double>*> params{&p};
  adam_step<double>(params, g, state, 1e-3);
  for (std::size_t i = 0; i < 10; ++i)
    EXPECT_NEAR(p[i] - before[i], -1e-3 * (g[0][i] > 0 ? 1 : -1), 1e-8);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor<double> p({4}, {1, 2, 3, 4});
  std::vector<Tensor<double>> g{Tensor<double>({4})};
  AdamState<double> state;
  std::vector<Tensor<double>*> params{&p};
  adam_step<double>(params, g, state, 1e-3);
  EXPECT_EQ(p, Tensor<double>({4}, {1, 2, 3, 4}));
}

TEST(Adam, EqualGradientsEqualUpdatesAndSignFlipMirrors) {
  Rng rng = make_rng(3);
  auto g = random_tensor<double>({6}, rng);
  Tensor<double> neg = g;
  for (auto& v : neg.storage()) v = -v;
  Tensor<double> a({6}), b({6}), c({6});
  AdamState<double> sa, sc;
  std::vector<Tensor<double>*> ab{&a, &b}, cc{&c};
  std::vector<Tensor<double>> gg{g, g}, gn{neg};
  for (int step = 0; step < 5; ++step) {
    adam_step<double>(ab, gg, sa, 1e-3);
    adam_step<double>(cc, gn, sc, 1e-3);
  }
  EXPECT_EQ(a, b);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(c[i], -a[i]);
}

TEST(Adam, ShapeMismatchIsAContractError) {
  Tensor<double> p({3});
  std::vector<Tensor<double>> g{Tensor<double>({4})};
  AdamState<double> state;
  std::vector<Tensor<double>*> params{&p};
  EXPECT_THROW(adam_step<double>(params, g, state, 1e-3), ContractError);
}

TEST(Schedule, HalvesEveryTwentyEpochs) {
  EXPECT_DOUBLE_EQ(lr_at(0), 0.001);
  EXPECT_DOUBLE_EQ(lr_at(19), 0.001);
  EXPECT_DOUBLE_EQ(lr_at(20), 0.0005);
  EXPECT_DOUBLE_EQ(lr_at(45), 0.00025);
}

TEST(Metrics, PerfectAndImbalanced) {
  std::vector<std::int64_t> t{0, 1, 2, 1}, p = t;
  auto m = classification_metrics(t, p, 3);
  EXPECT_EQ(m.instance_accuracy, 1.0);
  EXPECT_EQ(m.class_accuracy, 1.0);

  std::vector<std::int64_t> truth(10, 0), pred(10, 0);
  truth[9] = 1;
  auto im = classification_metrics(truth, pred, 2);
  EXPECT_DOUBLE_EQ(im.instance_accuracy, 0.9);
  EXPECT_DOUBLE_EQ(im.class_accuracy, 0.5);
}

TEST(Metrics, ConfusionRowsCountItems) {
  Rng rng = make_rng(4);
  std::vector<std::int64_t> t(200), p(200);
  std::vector<std::size_t> counts(5, 0);
  for (std::size_t i = 0; i < 200; ++i) {
    t[i] = static_cast<std::int64_t>(uniform_index(rng, 5));
    p[i] = static_cast<std::int64_t>(uniform_index(rng, 5));
    ++counts[t[i]];
  }
  auto m = classification_metrics(t, p, 5);
  for (std::size_t c = 0; c < 5; ++c) {
    std::size_t row = 0;
    for (auto v : m.confusion[c]) row += v;
    EXPECT_EQ(row, counts[c]);
  }
  EXPECT_THROW(classification_metrics({}, {}, 5), ConfigError);
}

TEST(Metrics, ConstantLogitModelScoresTheMajorityShare) {
  SynthSpec s;
  s.per_class = 4;
  s.n_points = 32;
  auto d = synth_dataset(s, "test");
  d.items.erase(d.items.begin() + 9, d.items.end());  // 4 spheres, 4 cubes, 1 cylinder
  auto m = Model<float>::build(tiny(), 1);
  m.head_out.weight = Tensor<float>(m.head_out.weight.shape());
  m.head_out.bias = Tensor<float>({3}, {0, 1, 0});
  auto metrics = evaluate(m, d, 4);
  EXPECT_DOUBLE_EQ(metrics.instance_accuracy, 4.0 / 9.0);
  EXPECT_DOUBLE_EQ(metrics.class_accuracy, 1.0 / 3.0);
}

TEST(Miou, HandCases) {
  std::vector<PartRange> ranges{{0, 2}, {2, 3}};
  auto perfect = miou({{0, 1, 1}}, {{0, 1, 1}}, {0}, ranges);
  EXPECT_EQ(perfect.overall, 1.0);
  auto flip = miou({{0, 1, 1, 0}}, {{0, 0, 1, 1}}, {0}, ranges);
  EXPECT_DOUBLE_EQ(flip.overall, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(flip.shape_iou[0], 1.0 / 3.0);
  // part 4 appears in neither and counts as 1
  auto vacuous = miou({{2, 3}}, {{2, 3}}, {1}, ranges);
  EXPECT_EQ(vacuous.overall, 1.0);
  EXPECT_THROW(miou({{0, 3}}, {{0, 1}}, {0}, ranges), DataError);
}

TEST(Miou, MatchesSetCountingOracle) {
  Rng rng = make_rng(5);
  std::vector<PartRange> ranges{{0, 2}, {2, 4}, {6, 3}};
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<std::int64_t>> pred, truth;
    std::vector<std::int64_t> cat;
    const std::size_t shapes = 1 + uniform_index(rng, 6);
    double want = 0;
    for (std::size_t s = 0; s < shapes; ++s) {
      const auto c = static_cast<std::int64_t>(uniform_index(rng, 3));
      const std::size_t n = 1 + uniform_index(rng, 30);
      std::vector<std::int64_t> p(n), t(n);
      for (std::size_t i = 0; i < n; ++i) {
        p[i] = ranges[c].first + static_cast<std::int64_t>(uniform_index(rng, ranges[c].count));
        t[i] = ranges[c].first + static_cast<std::int64_t>(uniform_index(rng, ranges[c].count));
      }
      want += oracle_shape_iou(p, t, ranges[c]);
      pred.push_back(p);
      truth.push_back(t);
      cat.push_back(c);
    }
    EXPECT_DOUBLE_EQ(miou(pred, truth, cat, ranges).overall, want / double(shapes));
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  Rng rng = make_rng(6);
  auto d = toy(3, 32);
  Trainer<float> trainer(Model<float>::build(tiny(), 2), TrainConfig{.epochs = 2, .batch_size = 4, .seed = 2});
  trainer.run_epoch(d);
  auto dir = scratch("roundtrip");
  save_checkpoint(dir, trainer.model(), trainer.state(), nlohmann::json{{"note", "x"}});
  auto back = load_checkpoint<float>(dir);
  auto x = random_tensor<float>({2, 32, 3}, rng);
  EXPECT_TRUE(same_bits(logits(trainer.model(), x), logits(back.model, x)));
  auto a = all_tensors(trainer.model()), b = all_tensors(back.model);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(same_bits(a[i], b[i]));
  EXPECT_EQ(back.state.epoch, 1u);
  EXPECT_EQ(back.state.adam.step, trainer.state().adam.step);
  for (std::size_t i = 0; i < back.state.adam.m.size(); ++i) {
    EXPECT_TRUE(same_bits(back.state.adam.m[i], trainer.state().adam.m[i]));
    EXPECT_TRUE(same_bits(back.state.adam.v[i], trainer.state().adam.v[i]));
  }
  EXPECT_EQ(back.run_config["note"], "x");
  EXPECT_EQ(checkpoint_dtype(dir), DType::f32);
  EXPECT_THROW(load_checkpoint<double>(dir), ConfigError);
}

TEST(Checkpoint, DamagedFilesAreRejected) {
  auto dir = scratch("damaged");
  auto m = Model<double>::build(tiny(), 3);
  save_checkpoint(dir, m, TrainState<double>{});
  const auto bin = dir / "model.bin";
  fs::resize_file(bin, fs::file_size(bin) - 8);
  EXPECT_THROW(load_checkpoint<double>(dir), CorruptionError);

  save_checkpoint(dir, m, TrainState<double>{});
  nlohmann::json j;
  std::ifstream(dir / "model.json") >> j;
  j["dtype"] = "bf16";
  std::ofstream(dir / "model.json") << j.dump();
  EXPECT_THROW(load_checkpoint<double>(dir), VersionError);
  EXPECT_THROW(load_checkpoint<double>(scratch("absent")), IoError);
}

TEST(Trainer, ResumeMatchesStraightRunAndSchedule) {
  auto d = toy(2, 24);
  TrainConfig cfg{.epochs = 3, .batch_size = 4, .seed = 5};
  cfg.adam.decay_every = 1;
  Trainer<float> straight(Model<float>::build(tiny(), 4), cfg);
  for (int e = 0; e < 3; ++e) straight.run_epoch(d);

  Trainer<float> first(Model<float>::build(tiny(), 4), cfg);
  first.run_epoch(d);
  auto dir = scratch("resume");
  save_checkpoint(dir, first.model(), first.state());
  auto ck = load_checkpoint<float>(dir);
  Trainer<float> resumed(std::move(ck.model), cfg, std::move(ck.state));
  auto log1 = resumed.run_epoch(d);
  EXPECT_DOUBLE_EQ(log1.lr, lr_at(1, cfg.adam));
  resumed.run_epoch(d);
  auto a = all_tensors(straight.model()), b = all_tensors(resumed.model());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(same_bits(a[i], b[i]));
}

TEST(Trainer, OneEpochIsDeterministic) {
  auto d = toy(2, 24);
  TrainConfig cfg{.epochs = 1, .batch_size = 3, .seed = 8};
  Trainer<float> a(Model<float>::build(tiny(), 6), cfg), b(Model<float>::build(tiny(), 6), cfg);
  auto la = a.run_epoch(d), lb = b.run_epoch(d);
  EXPECT_EQ(la.loss, lb.loss);
  auto ta = all_tensors(a.model()), tb = all_tensors(b.model());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_TRUE(same_bits(ta[i], tb[i]));
}

TEST(Evaluate, ShuffledDatasetGivesSameAccuracies) {
  auto d = toy(3, 24, "test");
  auto m = Model<float>::build(tiny(), 7);
  auto before = evaluate(m, d, 4);
  Rng rng = make_rng(9);
  std::shuffle(d.items.begin(), d.items.end(), rng);
  auto after = evaluate(m, d, 4);
  EXPECT_EQ(before.instance_accuracy, after.instance_accuracy);
  EXPECT_EQ(before.class_accuracy, after.class_accuracy);
}

TEST(Evaluate, VocabularyMismatchIsAConfigError) {
  SynthSpec s;
  s.classes = {"sphere", "cube"};
  s.per_class = 2;
  s.n_points = 24;
  auto m = Model<float>::build(tiny(), 7);
  EXPECT_THROW(evaluate(m, synth_dataset(s, "test")), ConfigError);
}
