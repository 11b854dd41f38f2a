#include "sawnet/commands.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "sawnet/error.hpp"

namespace sawnet {
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kRobustnessTag = 0x726f62757374;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string fmt_acc(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

ResultRow base_row(const RunConfig& cfg, std::size_t points, std::size_t epoch, std::string split) {
  return {cfg.experiment, to_string(cfg.model.variant), points, epoch, std::move(split), "", 0};
}

void metric_rows(std::vector<ResultRow>& rows, ResultRow base, const Metrics& m) {
  auto add = [&](const char* name, double v) {
    base.metric = name;
    base.value = v;
    rows.push_back(base);
  };
  add("loss", m.loss);
  add("instance_accuracy", m.instance_accuracy);
  add("class_accuracy", m.class_accuracy);
  if (m.has_miou) add("miou", m.miou);
}

void check_vocabulary(const RunConfig& cfg, const nlohmann::json& snapshot) {
  if (!snapshot.contains("dataset")) return;
  const auto& d = snapshot["dataset"];
  const char* key = d.contains("class_names") ? "class_names" : d.contains("classes") ? "classes" : nullptr;
  if (!key) return;
  const auto trained = d[key].get<std::vector<std::string>>();
  if (trained != cfg.dataset.class_names) {
    std::string a, b;
    for (const auto& s : trained) a += (a.empty() ? "" : ",") + s;
    for (const auto& s : cfg.dataset.class_names) b += (b.empty() ? "" : ",") + s;
    throw ConfigError("vocabulary mismatch: checkpoint classes [" + a + "], dataset classes [" + b + "]");
  }
}

template <typename T>
TrainOutcome train_impl(const RunConfig& cfg, std::ostream& log, bool resume) {
  make_dirs(cfg.out);
  const Splits data = load_splits(cfg);
  const fs::path ckdir = cfg.out / "checkpoint";
  const fs::path csv = cfg.out / "train.csv";
  const nlohmann::json snapshot = to_json(cfg);
  const std::size_t points = cfg.points();

  std::optional<Trainer<T>> trainer;
  if (resume && fs::exists(ckdir / "model.json")) {
    Checkpoint<T> ck = load_checkpoint<T>(ckdir);
    if (nlohmann::json(ck.model.config()) != nlohmann::json(cfg.model))
      throw ConfigError("cannot resume: checkpoint model differs from the config's model");
    log << "resuming from epoch " << ck.state.epoch << "\n";
    trainer.emplace(std::move(ck.model), cfg.train_config(), std::move(ck.state));
  } else {
    resume = false;
    trainer.emplace(Model<T>::build(cfg.model, cfg.seed), cfg.train_config());
  }
  if (!resume || !fs::exists(csv)) write_rows(csv, {});

  TrainOutcome outcome;
  bool have_test = false;
  while (trainer->state().epoch < cfg.epochs) {
    const EpochLog e = trainer->run_epoch(data.train);
    const std::size_t done = trainer->state().epoch;
    std::vector<ResultRow> rows;
    ResultRow r = base_row(cfg, points, done, "train");
    for (auto [name, v] : {std::pair{"running_loss", e.loss}, {"running_accuracy", e.accuracy}, {"lr", e.lr}}) {
      r.metric = name;
      r.value = v;
      rows.push_back(r);
    }
    std::string line = "epoch " + std::to_string(done) + "/" + std::to_string(cfg.epochs) + "  lr " +
                       std::to_string(e.lr) + "  loss " + fmt_acc(e.loss) + "  running_acc " + fmt_acc(e.accuracy);
    if (done % cfg.eval_every == 0 || done == cfg.epochs) {
      outcome.test = evaluate(trainer->model(), data.test, cfg.eval_batch_size);
      have_test = true;
      metric_rows(rows, base_row(cfg, points, done, "test"), outcome.test);
      line += "  test_acc " + fmt_acc(outcome.test.instance_accuracy);
    }
    save_checkpoint(ckdir, trainer->model(), trainer->state(), snapshot);
    write_rows(csv, rows, true);
    outcome.rows.insert(outcome.rows.end(), rows.begin(), rows.end());
    log << line << std::endl;
  }

  const std::size_t epochs = trainer->state().epoch;
  std::vector<ResultRow> rows;
  if (!have_test) {
    outcome.test = evaluate(trainer->model(), data.test, cfg.eval_batch_size);
    metric_rows(rows, base_row(cfg, points, epochs, "test"), outcome.test);
  }
  outcome.train = evaluate(trainer->model(), data.train, cfg.eval_batch_size);
  metric_rows(rows, base_row(cfg, points, epochs, "train"), outcome.train);
  save_checkpoint(ckdir, trainer->model(), trainer->state(), snapshot);
  write_rows(csv, rows, true);
  outcome.rows.insert(outcome.rows.end(), rows.begin(), rows.end());
  outcome.epochs = epochs;

  const nlohmann::json summary{{"experiment", cfg.experiment},
                               {"variant", to_string(cfg.model.variant)},
                               {"epochs", epochs},
                               {"parameters", trainer->model().parameter_count()},
                               {"train", to_json(outcome.train)},
                               {"test", to_json(outcome.test)}};
  write_text(cfg.out / "metrics.json", summary.dump(2) + "\n");
  log << "final (" << to_string(cfg.model.variant) << ", " << epochs << " epochs): train instance "
      << fmt_acc(outcome.train.instance_accuracy) << " class " << fmt_acc(outcome.train.class_accuracy)
      << " | test instance " << fmt_acc(outcome.test.instance_accuracy) << " class "
      << fmt_acc(outcome.test.class_accuracy) << std::endl;
  return outcome;
}

template <typename T>
Metrics eval_impl(const RunConfig& cfg, const fs::path& checkpoint, std::ostream& log) {
  Checkpoint<T> ck = load_checkpoint<T>(checkpoint);
  check_vocabulary(cfg, ck.run_config);
  const Splits data = load_splits(cfg);
  const Metrics m = evaluate(ck.model, data.test, cfg.eval_batch_size);
  make_dirs(cfg.out);
  const nlohmann::json j{{"checkpoint_epoch", ck.state.epoch}, {"test", to_json(m)}};
  write_text(cfg.out / "eval.json", j.dump(2) + "\n");
  log << "test instance " << fmt_acc(m.instance_accuracy) << " class " << fmt_acc(m.class_accuracy);
  if (m.has_miou) log << " miou " << fmt_acc(m.miou);
  log << " (" << m.count << " clouds)" << std::endl;
  return m;
}

template <typename T>
std::vector<ResultRow> robustness_impl(const RunConfig& cfg, const fs::path& checkpoint, std::ostream& log) {
  const std::size_t n = cfg.points();
  if (cfg.robustness_points.empty()) throw ConfigError("robustness needs at least one point count");
  for (auto m : cfg.robustness_points) {
    if (m == 0) throw ConfigError("robustness point count must be positive");
    if (m > n)
      throw ConfigError("robustness point count " + std::to_string(m) + " exceeds the " + std::to_string(n) +
                        " points per cloud");
  }
  Checkpoint<T> ck = load_checkpoint<T>(checkpoint);
  check_vocabulary(cfg, ck.run_config);
  if (ck.model.config().variant == Variant::pointnet_depthwise)
    for (auto m : cfg.robustness_points)
      if (m != n) throw ConfigError("depthwise embeddings are tied to " + std::to_string(n) + " points per cloud");
  const Splits data = load_splits(cfg);
  RunConfig labels = cfg;
  labels.model = ck.model.config();

  std::vector<ResultRow> rows;
  for (auto m : cfg.robustness_points) {
    Dataset reduced = data.test;
    if (m != n)
      for (std::size_t i = 0; i < reduced.items.size(); ++i) {
        Rng rng = make_rng(cfg.seed, {kRobustnessTag, m, i});
        reduced.items[i] = subsample(data.test.items[i], m, rng);
      }
    const Metrics met = evaluate(ck.model, reduced, cfg.eval_batch_size);
    ResultRow r = base_row(labels, m, ck.state.epoch, "test");
    r.metric = "instance_accuracy";
    r.value = met.instance_accuracy;
    rows.push_back(r);
    r.metric = "class_accuracy";
    r.value = met.class_accuracy;
    rows.push_back(r);
    log << "points " << m << "  instance " << fmt_acc(met.instance_accuracy) << "  class "
        << fmt_acc(met.class_accuracy) << std::endl;
  }
  make_dirs(cfg.out);
  write_rows(cfg.out / "robustness.csv", rows);
  return rows;
}

template <typename Fn>
auto by_dtype(DType d, Fn&& fn) {
  return d == DType::f32 ? fn(float{}) : fn(double{});
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    fn();
    return static_cast<int>(ExitCode::ok);
  } catch (const Error& e) {
    err << "error: " << e.what() << std::endl;
    return static_cast<int>(e.exit_code());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << std::endl;
    return static_cast<int>(ExitCode::io_error);
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << std::endl;
    return static_cast<int>(ExitCode::config_error);
  }
}

fs::path checkpoint_of(const CommandOptions& opts, const RunConfig& cfg) {
  return opts.checkpoint ? *opts.checkpoint : cfg.out / "checkpoint";
}

}  // namespace

std::string format_row(const ResultRow& r) {
  char value[40];
  std::snprintf(value, sizeof value, "%.17g", r.value);
  return r.experiment + "," + r.variant + "," + std::to_string(r.points) + "," + std::to_string(r.epoch) + "," +
         r.split + "," + r.metric + "," + value;
}

void write_rows(const fs::path& path, const std::vector<ResultRow>& rows, bool append) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  if (!append) out << kCsvHeader << '\n';
  for (const auto& r : rows) out << format_row(r) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<ResultRow> read_rows(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw ParseError(path.string() + ":1: unexpected header");
  std::vector<ResultRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 7 fields");
    try {
      rows.push_back({f[0], f[1], std::stoul(f[2]), std::stoul(f[3]), f[4], f[5], std::stod(f[6])});
    } catch (const std::exception&) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  return rows;
}

RunConfig resolve_config(const CommandOptions& opts) {
  if (!opts.config) throw ConfigError("--config is required");
  RunConfig cfg = load_run_config(*opts.config);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.out) cfg.out = *opts.out;
  if (opts.points) cfg.robustness_points = *opts.points;
  return cfg;
}

TrainOutcome run_train(const RunConfig& cfg, std::ostream& log, bool resume) {
  return by_dtype(cfg.dtype, [&](auto tag) { return train_impl<decltype(tag)>(cfg, log, resume); });
}

Metrics run_eval(const RunConfig& cfg, const fs::path& checkpoint, std::ostream& log) {
  return by_dtype(checkpoint_dtype(checkpoint), [&](auto tag) { return eval_impl<decltype(tag)>(cfg, checkpoint, log); });
}

std::vector<ResultRow> run_robustness(const RunConfig& cfg, const fs::path& checkpoint, std::ostream& log) {
  return by_dtype(checkpoint_dtype(checkpoint),
                  [&](auto tag) { return robustness_impl<decltype(tag)>(cfg, checkpoint, log); });
}

std::vector<ResultRow> run_ablate(const RunConfig& cfg, std::ostream& log) {
  // every variant must be buildable before any training starts
  for (Variant v : cfg.ablate_variants) {
    ModelConfig m = cfg.model;
    m.variant = v;
    m.validate();
  }
  std::vector<ResultRow> finals;
  for (Variant v : cfg.ablate_variants) {
    RunConfig c = cfg;
    c.model.variant = v;
    c.out = cfg.out / to_string(v);
    log << "== " << to_string(v) << std::endl;
    const TrainOutcome o = run_train(c, log);
    for (const auto& r : o.rows)
      if (r.epoch == o.epochs && (r.split == "test" || r.split == "train") &&
          (r.metric == "instance_accuracy" || r.metric == "class_accuracy"))
        finals.push_back(r);
  }
  make_dirs(cfg.out);
  write_rows(cfg.out / "ablation.csv", finals);
  // Full-scale figures (1024-point benchmark, 250 epochs) for side-by-side
  // reading; toy runs are not expected to reproduce them.
  const nlohmann::json reference{
      {"combination", {{"metric", "class_accuracy"},
                       {"combine_at_end", 0.889},
                       {"combine_per_layer_no_residual", 0.896},
                       {"sawnet", 0.900}}},
      {"embedding", {{"metric", "instance_accuracy"},
                     {"pointnet_shared", 0.8884},
                     {"pointnet_grouped", 0.893},
                     {"pointnet_depthwise", 0.894},
                     {"pointnet_residual", 0.900}}}};
  write_text(cfg.out / "ablation_reference.json", reference.dump(2) + "\n");
  return finals;
}

verify::Report run_verify(const std::vector<verify::NamedCheck>& checks, const std::optional<fs::path>& out,
                          std::ostream& log) {
  verify::Report report = verify::run_checks(checks);
  verify::print_report(log, report);
  if (out) {
    make_dirs(*out);
    write_text(*out / "verify.json", verify::to_json(report).dump(2) + "\n");
  }
  return report;
}

int cmd_train(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] { run_train(resolve_config(opts), out, opts.resume); });
}

int cmd_eval(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(opts);
    run_eval(cfg, checkpoint_of(opts, cfg), out);
  });
}

int cmd_robustness(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(opts);
    run_robustness(cfg, checkpoint_of(opts, cfg), out);
  });
}

int cmd_ablate(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] { run_ablate(resolve_config(opts), out); });
}

int cmd_verify(const CommandOptions& opts, std::ostream& out, std::ostream& err,
               const std::vector<verify::NamedCheck>& extra) {
  bool passed = false;
  const int code = guarded(err, [&] {
    auto checks = verify::default_suite({});
    checks.insert(checks.end(), extra.begin(), extra.end());
    passed = run_verify(checks, opts.out, out).passed();
  });
  if (code != 0) return code;
  return passed ? 0 : static_cast<int>(ExitCode::verification_failure);
}

}  // namespace sawnet
