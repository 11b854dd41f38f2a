#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "json.hpp"
#include "sawnet/commands.hpp"
#include "sawnet/ops.hpp"

using namespace sawnet;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "sawnet-cli-tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json tiny_config() {
  return json{{"experiment", "tiny"},
              {"task", "classify"},
              {"dtype", "f32"},
              {"dataset",
               {{"kind", "synth"},
                {"classes", {"sphere", "cube", "cylinder"}},
                {"per_class", 6},
                {"test_per_class", 3},
                {"n_points", 24}}},
              {"model",
               {{"variant", "sawnet"},
                {"k", 4},
                {"transformer", {{"enabled", true}, {"widths", {4, 8}}, {"head", {8}}}},
                {"trunk", {8, 8}},
                {"aggregate_width", 16},
                {"head", {16}},
                {"dropout", 0.5},
                {"groups", 2}}},
              {"augment", true},
              {"epochs", 2},
              {"batch_size", 4},
              {"eval_every", 1},
              {"seed", 3},
              {"robustness_points", {24, 12}}};
}

fs::path write_config(const fs::path& dir, const json& j, const std::string& name = "config.json") {
  auto path = dir / name;
  std::ofstream(path) << j.dump(2);
  return path;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Every regular file below `dir`, keyed by relative path.
std::map<std::string, std::string> tree_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

CommandOptions options(const fs::path& config, const fs::path& out) {
  CommandOptions o;
  o.config = config;
  o.out = out;
  return o;
}

double row_value(const std::vector<ResultRow>& rows, const std::string& split, const std::string& metric,
                 std::size_t epoch) {
  for (const auto& r : rows)
    if (r.split == split && r.metric == metric && r.epoch == epoch) return r.value;
  ADD_FAILURE() << "no row " << split << "/" << metric << " at epoch " << epoch;
  return -1;
}

}  // namespace

TEST(Csv, RowsRoundTripExactly) {
  auto dir = scratch("csv");
  std::vector<ResultRow> rows{{"e", "sawnet", 256, 3, "test", "instance_accuracy", 0.1 + 0.2},
                              {"e", "combine_at_end", 64, 0, "train", "loss", 1e-300}};
  write_rows(dir / "a.csv", rows);
  auto text = slurp(dir / "a.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), kCsvHeader);
  auto back = read_rows(dir / "a.csv");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].variant, rows[i].variant);
    EXPECT_EQ(back[i].points, rows[i].points);
    EXPECT_EQ(back[i].epoch, rows[i].epoch);
    EXPECT_EQ(back[i].value, rows[i].value);
  }
  write_rows(dir / "a.csv", rows, true);
  EXPECT_EQ(read_rows(dir / "a.csv").size(), 4u);
}

TEST(ExitCodes, MissingConfigIsAnIoError) {
  std::ostringstream out, err;
  EXPECT_EQ(cmd_train(options("/nonexistent/sawnet.json", scratch("missing")), out, err), 3);
  EXPECT_FALSE(err.str().empty());
}

TEST(ExitCodes, MalformedJsonIsAConfigError) {
  auto dir = scratch("malformed");
  std::ofstream(dir / "bad.json") << "{\"epochs\": ";
  std::ostringstream out, err;
  EXPECT_EQ(cmd_train(options(dir / "bad.json", dir), out, err), 2);
}

TEST(ExitCodes, UnknownFieldIsNamed) {
  auto dir = scratch("unknown");
  auto j = tiny_config();
  j["learning_rate"] = 0.1;
  std::ostringstream out, err;
  EXPECT_EQ(cmd_train(options(write_config(dir, j), dir), out, err), 2);
  EXPECT_NE(err.str().find("learning_rate"), std::string::npos);
}

TEST(ExitCodes, BadValuesAreConfigErrors) {
  auto dir = scratch("values");
  std::ostringstream out, err;
  auto j = tiny_config();
  j["model"]["k"] = 24;  // k must stay below the point count
  EXPECT_EQ(cmd_train(options(write_config(dir, j), dir / "a"), out, err), 2);
  j = tiny_config();
  j["batch_size"] = 0;
  EXPECT_EQ(cmd_train(options(write_config(dir, j), dir / "b"), out, err), 2);
}

TEST(ExitCodes, UnreadableDatasetIsAnIoError) {
  auto dir = scratch("dataset");
  auto j = tiny_config();
  j["dataset"] = {{"kind", "manifest"},
                  {"train", (dir / "nope_train.txt").string()},
                  {"test", (dir / "nope_test.txt").string()},
                  {"class_names", {"a", "b", "c"}},
                  {"n_points", 24}};
  std::ostringstream out, err;
  EXPECT_EQ(cmd_train(options(write_config(dir, j), dir), out, err), 3);
}

TEST(ExitCodes, EvalWithoutCheckpointIsAnIoError) {
  auto dir = scratch("nockpt");
  std::ostringstream out, err;
  EXPECT_EQ(cmd_eval(options(write_config(dir, tiny_config()), dir), out, err), 3);
}

TEST(Train, ZeroEpochsWritesCheckpointAndEvaluation) {
  auto dir = scratch("zero");
  auto j = tiny_config();
  j["epochs"] = 0;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_train(options(write_config(dir, j), dir / "run"), out, err), 0) << err.str();
  EXPECT_TRUE(fs::exists(dir / "run" / "checkpoint"));
  EXPECT_TRUE(fs::exists(dir / "run" / "metrics.json"));
  auto rows = read_rows(dir / "run" / "train.csv");
  ASSERT_FALSE(rows.empty());
  for (const auto& r : rows) {
    EXPECT_EQ(r.epoch, 0u);
    EXPECT_NE(r.metric, "running_loss");
  }
}

TEST(Train, CsvCarriesEveryEpochAndIsReproducible) {
  auto dir = scratch("repro");
  auto config = write_config(dir, tiny_config());
  std::ostringstream out, err;
  ASSERT_EQ(cmd_train(options(config, dir / "a"), out, err), 0) << err.str();
  ASSERT_EQ(cmd_train(options(config, dir / "b"), out, err), 0) << err.str();
  EXPECT_EQ(tree_bytes(dir / "a"), tree_bytes(dir / "b"));

  auto rows = read_rows(dir / "a" / "train.csv");
  std::set<std::size_t> epochs;
  for (const auto& r : rows) {
    EXPECT_EQ(r.experiment, "tiny");
    EXPECT_EQ(r.variant, "sawnet");
    EXPECT_EQ(r.points, 24u);
    epochs.insert(r.epoch);
  }
  EXPECT_EQ(epochs, (std::set<std::size_t>{1, 2}));
  EXPECT_EQ(row_value(rows, "train", "lr", 1), 0.001);
}

TEST(Train, SeedOverrideChangesTheRun) {
  auto dir = scratch("seed");
  auto config = write_config(dir, tiny_config());
  std::ostringstream out, err;
  auto a = options(config, dir / "a");
  auto b = options(config, dir / "b");
  b.seed = 99;
  ASSERT_EQ(cmd_train(a, out, err), 0);
  ASSERT_EQ(cmd_train(b, out, err), 0);
  EXPECT_NE(slurp(dir / "a" / "train.csv"), slurp(dir / "b" / "train.csv"));
}

TEST(Train, ResumeMatchesStraightRun) {
  auto dir = scratch("resume");
  auto j = tiny_config();
  std::ostringstream out, err;
  ASSERT_EQ(cmd_train(options(write_config(dir, j, "two.json"), dir / "straight"), out, err), 0);
  j["epochs"] = 1;
  ASSERT_EQ(cmd_train(options(write_config(dir, j, "one.json"), dir / "split"), out, err), 0);
  auto resumed = options(dir / "two.json", dir / "split");
  resumed.resume = true;
  ASSERT_EQ(cmd_train(resumed, out, err), 0) << err.str();
  EXPECT_EQ(tree_bytes(dir / "straight" / "checkpoint"), tree_bytes(dir / "split" / "checkpoint"));
}

TEST(Eval, ReproducesFinalTestMetrics) {
  auto dir = scratch("eval");
  auto opts = options(write_config(dir, tiny_config()), dir / "run");
  std::ostringstream out, err;
  ASSERT_EQ(cmd_train(opts, out, err), 0) << err.str();
  ASSERT_EQ(cmd_eval(opts, out, err), 0) << err.str();
  auto first = slurp(dir / "run" / "eval.json");
  ASSERT_EQ(cmd_eval(opts, out, err), 0);
  EXPECT_EQ(first, slurp(dir / "run" / "eval.json"));

  auto rows = read_rows(dir / "run" / "train.csv");
  auto e = json::parse(first);
  EXPECT_EQ(e["checkpoint_epoch"].get<std::size_t>(), 2u);
  EXPECT_EQ(e["test"]["instance_accuracy"].get<double>(), row_value(rows, "test", "instance_accuracy", 2));
  EXPECT_EQ(e["test"]["class_accuracy"].get<double>(), row_value(rows, "test", "class_accuracy", 2));
}

TEST(Robustness, FullCountRowEqualsEval) {
  auto dir = scratch("robust");
  auto opts = options(write_config(dir, tiny_config()), dir / "run");
  std::ostringstream out, err;
  ASSERT_EQ(cmd_train(opts, out, err), 0) << err.str();
  ASSERT_EQ(cmd_eval(opts, out, err), 0);
  ASSERT_EQ(cmd_robustness(opts, out, err), 0) << err.str();
  auto rows = read_rows(dir / "run" / "robustness.csv");
  ASSERT_EQ(rows.size(), 4u);
  auto e = json::parse(slurp(dir / "run" / "eval.json"));
  for (const auto& r : rows)
    if (r.points == 24 && r.metric == "instance_accuracy")
      EXPECT_EQ(r.value, e["test"]["instance_accuracy"].get<double>());
  std::set<std::size_t> counts;
  for (const auto& r : rows) counts.insert(r.points);
  EXPECT_EQ(counts, (std::set<std::size_t>{12, 24}));

  auto too_many = opts;
  too_many.points = std::vector<std::size_t>{48};
  EXPECT_EQ(cmd_robustness(too_many, out, err), 2);
}

TEST(Ablate, OneFinalRowPerVariant) {
  auto dir = scratch("ablate");
  auto j = tiny_config();
  j["epochs"] = 1;
  j["ablate_variants"] = {"sawnet", "combine_at_end", "pointnet_shared"};
  std::ostringstream out, err;
  ASSERT_EQ(cmd_ablate(options(write_config(dir, j), dir / "run"), out, err), 0) << err.str();
  auto rows = read_rows(dir / "run" / "ablation.csv");
  std::multiset<std::string> variants;
  for (const auto& r : rows)
    if (r.split == "test" && r.metric == "instance_accuracy") variants.insert(r.variant);
  EXPECT_EQ(variants, (std::multiset<std::string>{"combine_at_end", "pointnet_shared", "sawnet"}));
  for (const auto* v : {"sawnet", "combine_at_end", "pointnet_shared"})
    EXPECT_TRUE(fs::exists(dir / "run" / v / "checkpoint")) << v;
  EXPECT_TRUE(fs::exists(dir / "run" / "ablation_reference.json"));
}

namespace {

// x * x with a backward that returns x instead of 2x.
Var<double> broken_square(Var<double> x) {
  Tensor<double> v = x.value();
  for (auto& e : v.storage()) e *= e;
  const Tensor<double> saved = x.value();
  return x.tape().record(std::move(v), {x.id()},
                         [saved](const Tensor<double>& g, std::span<Tensor<double>* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * saved[i];
                         });
}

}  // namespace

TEST(Verify, PlantedGradientBugIsReportedByName) {
  auto dir = scratch("verify");
  auto w = std::make_shared<Tensor<double>>(Shape{3, 2}, std::vector<double>{0.5, -1, 2, 0.25, -0.75, 1.5});
  verify::NamedCheck planted{"planted_square_rule", [w] {
                               verify::CheckResult r;
                               r.name = "planted_square_rule";
                               r.tolerance = verify::kGradientTolerance;
                               auto g = verify::gradient_check(
                                   [w](Context<double>& ctx) { return sum(broken_square(ctx.bind(*w))); },
                                   {{"w", w.get()}}, 1);
                               r.max_error = g.max_rel_error;
                               r.passed = r.max_error < r.tolerance;
                               return r;
                             }};
  CommandOptions opts;
  opts.out = dir;
  std::ostringstream out, err;
  EXPECT_EQ(cmd_verify(opts, out, err, {planted}), 1);
  EXPECT_NE(out.str().find("planted_square_rule"), std::string::npos);
}
