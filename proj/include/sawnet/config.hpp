#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sawnet/data.hpp"
#include "sawnet/sawnet.hpp"
#include "sawnet/train.hpp"

namespace sawnet {

// Where the clouds come from.
//   synth:    generated shapes; `synth.per_class` train items and
//             `test_per_class` test items per class.
//   manifest: JSON lists of {"path", "class"} for each split.
//   tree:     <root>/<class>/<split>/* files.
struct DatasetSpec {
  enum class Kind { synth, manifest, tree };
  Kind kind = Kind::synth;

  SynthSpec synth;
  std::size_t test_per_class = 40;
  bool synth_seed_pinned = false;  // otherwise the run seed generates the data

  std::filesystem::path train_manifest;
  std::filesystem::path test_manifest;
  std::filesystem::path root;
  std::string train_split = "train";
  std::string test_split = "test";
  std::vector<std::string> class_names;
  std::vector<PartRange> part_ranges;
  std::size_t n_points = 1024;
  std::size_t channels = 3;
};

struct RunConfig {
  std::string experiment = "run";
  DType dtype = DType::f32;
  DatasetSpec dataset;
  ModelConfig model;
  bool augment = true;
  AugmentParams augment_params;
  AdamConfig optimizer;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  std::size_t eval_batch_size = 16;
  std::size_t eval_every = 1;  // test-split evaluation period in epochs; the last epoch is always evaluated
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs/out";
  std::vector<std::size_t> robustness_points{1024, 512, 384, 256, 128};
  std::vector<Variant> ablate_variants = all_variants();

  // Data seed after applying the pinning rule.
  std::uint64_t data_seed() const { return dataset.synth_seed_pinned ? dataset.synth.seed : seed; }
  TrainConfig train_config() const;
  // Points per cloud as loaded.
  std::size_t points() const;
};

// Relative dataset paths resolve against `base_dir`. Model fields that the
// dataset determines (classes, parts, channels, points) are filled in when
// absent and checked when present.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = ".");
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& c);

struct Splits {
  Dataset train;
  Dataset test;
};

Splits load_splits(const RunConfig& c);

}  // namespace sawnet
