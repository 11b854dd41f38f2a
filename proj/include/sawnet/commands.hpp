#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sawnet/config.hpp"
#include "sawnet/verify.hpp"

// The experiment front end behind the `sawnet` executable. Every command is
// a pure function of (config, seed, input files).
namespace sawnet {

struct ResultRow {
  std::string experiment;
  std::string variant;
  std::size_t points = 0;
  std::size_t epoch = 0;
  std::string split;
  std::string metric;
  double value = 0;
};

inline constexpr const char* kCsvHeader = "experiment,variant,points,epoch,split,metric,value";

// Values print with 17 significant digits so they round-trip exactly.
std::string format_row(const ResultRow& r);
void write_rows(const std::filesystem::path& path, const std::vector<ResultRow>& rows, bool append = false);
std::vector<ResultRow> read_rows(const std::filesystem::path& path);

struct CommandOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::vector<std::size_t>> points;
  std::optional<std::filesystem::path> checkpoint;  // eval/robustness source; default <out>/checkpoint
  bool resume = false;                              // train: continue from <out>/checkpoint
};

// Config file with the command-line overrides applied.
RunConfig resolve_config(const CommandOptions& opts);

struct TrainOutcome {
  std::vector<ResultRow> rows;  // everything written to train.csv by this call
  Metrics train;                // eval mode on the training split
  Metrics test;
  std::size_t epochs = 0;
};

// <out>/train.csv, <out>/metrics.json, <out>/checkpoint/
TrainOutcome run_train(const RunConfig& cfg, std::ostream& log, bool resume = false);

// <out>/eval.json
Metrics run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint, std::ostream& log);

// <out>/robustness.csv; one instance- and class-accuracy row per count.
std::vector<ResultRow> run_robustness(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                      std::ostream& log);

// <out>/<variant>/ per variant, then <out>/ablation.csv and
// <out>/ablation_reference.json.
std::vector<ResultRow> run_ablate(const RunConfig& cfg, std::ostream& log);

verify::Report run_verify(const std::vector<verify::NamedCheck>& checks, const std::optional<std::filesystem::path>& out,
                          std::ostream& log);

// Command-line entry points; they return the process exit code and report
// errors on `err`.
int cmd_train(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_eval(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_robustness(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_ablate(const CommandOptions& opts, std::ostream& out, std::ostream& err);
// `extra` checks run after the default suite (used to plant failures in tests).
int cmd_verify(const CommandOptions& opts, std::ostream& out, std::ostream& err,
               const std::vector<verify::NamedCheck>& extra = {});

}  // namespace sawnet
