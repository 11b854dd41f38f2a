#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "sawnet/commands.hpp"

int main(int argc, char** argv) {
  using namespace sawnet;
  CLI::App app{"SAWNet point-cloud experiments"};
  app.require_subcommand(1);
  CommandOptions opts;
  std::string config, out, checkpoint, points;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", config, "run config (JSON)");
    if (needs_config) c->required();
    sub->add_option("--out", out, "output directory (overrides the config)");
    sub->add_option("--seed", seed, "run seed (overrides the config)");
  };
  auto* train = app.add_subcommand("train", "train a model, log per-epoch metrics, save a checkpoint");
  common(train, true);
  train->add_flag("--resume", opts.resume, "continue from <out>/checkpoint when present");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  common(eval, true);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory (default <out>/checkpoint)");
  auto* robust = app.add_subcommand("robustness", "accuracy of a checkpoint versus points per cloud");
  common(robust, true);
  robust->add_option("--checkpoint", checkpoint, "checkpoint directory (default <out>/checkpoint)");
  robust->add_option("--points", points, "comma-separated point counts");
  auto* ablate = app.add_subcommand("ablate", "train every requested variant under one budget");
  common(ablate, true);
  auto* verify = app.add_subcommand("verify", "run the invariant suite");
  common(verify, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::config_error);
  }

  CLI::App* sub = app.get_subcommands().front();
  if (!config.empty()) opts.config = config;
  if (!out.empty()) opts.out = out;
  if (sub->count("--seed")) opts.seed = seed;
  if (!checkpoint.empty()) opts.checkpoint = checkpoint;
  if (!points.empty()) {
    std::vector<std::size_t> list;
    std::size_t start = 0;
    while (start <= points.size()) {
      const std::size_t end = std::min(points.find(',', start), points.size());
      const std::string item = points.substr(start, end - start);
      try {
        std::size_t used = 0;
        const unsigned long v = std::stoul(item, &used);
        if (used != item.size()) throw std::invalid_argument(item);
        list.push_back(v);
      } catch (const std::exception&) {
        std::cerr << "error: --points: '" << item << "' is not a point count\n";
        return static_cast<int>(ExitCode::config_error);
      }
      start = end + 1;
    }
    opts.points = list;
  }

  const std::string name = sub->get_name();
  if (name == "train") return cmd_train(opts, std::cout, std::cerr);
  if (name == "eval") return cmd_eval(opts, std::cout, std::cerr);
  if (name == "robustness") return cmd_robustness(opts, std::cout, std::cerr);
  if (name == "ablate") return cmd_ablate(opts, std::cout, std::cerr);
  return cmd_verify(opts, std::cout, std::cerr);
}
