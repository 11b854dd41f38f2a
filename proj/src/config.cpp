#include "sawnet/config.hpp"

#include <algorithm>
#include <fstream>

#include "sawnet/error.hpp"

namespace sawnet {
namespace fs = std::filesystem;

namespace {

template <typename V>
void read_field(const nlohmann::json& value, const std::string& where, V& dst) {
  try {
    value.get_to(dst);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_relative() ? base / path : path;
}

std::vector<PartRange> parse_part_ranges(const nlohmann::json& j) {
  if (!j.is_array()) throw ConfigError("dataset.part_ranges must be a list of {first, count}");
  std::vector<PartRange> out;
  std::int64_t next = 0;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    const std::string where = "dataset.part_ranges[" + std::to_string(i) + "]";
    if (!e.is_object() || !e.contains("first") || !e.contains("count"))
      throw ConfigError(where + ": needs 'first' and 'count'");
    PartRange r;
    read_field(e.at("first"), where + ".first", r.first);
    read_field(e.at("count"), where + ".count", r.count);
    if (r.first != next || r.count < 1)
      throw ConfigError(where + ": ranges must be contiguous from 0 with positive counts");
    next += r.count;
    out.push_back(r);
  }
  return out;
}

DatasetSpec parse_dataset(const nlohmann::json& j, const fs::path& base) {
  if (!j.is_object()) throw ConfigError("dataset must be a JSON object");
  DatasetSpec d;
  std::string kind = "synth";
  if (j.contains("kind")) read_field(j.at("kind"), "dataset.kind", kind);
  if (kind == "synth") d.kind = DatasetSpec::Kind::synth;
  else if (kind == "manifest") d.kind = DatasetSpec::Kind::manifest;
  else if (kind == "tree") d.kind = DatasetSpec::Kind::tree;
  else throw ConfigError("dataset.kind: expected synth, manifest or tree, got '" + kind + "'");

  static const std::vector<std::string> synth_keys{"kind", "classes", "per_class", "test_per_class",
                                                   "n_points", "seed", "segmentation"};
  static const std::vector<std::string> file_keys{"kind", "train", "test", "root", "train_split", "test_split",
                                                  "class_names", "part_ranges", "n_points", "channels"};
  const auto& keys = d.kind == DatasetSpec::Kind::synth ? synth_keys : file_keys;
  for (const auto& [key, value] : j.items())
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw ConfigError("dataset." + key + ": unknown field for kind '" + kind + "'");

  if (d.kind == DatasetSpec::Kind::synth) {
    nlohmann::json s = nlohmann::json::object();
    for (const char* key : {"classes", "per_class", "n_points", "seed", "segmentation"})
      if (j.contains(key)) s[key] = j.at(key);
    from_json(s, d.synth);
    d.synth_seed_pinned = j.contains("seed");
    if (j.contains("test_per_class")) read_field(j.at("test_per_class"), "dataset.test_per_class", d.test_per_class);
    if (d.synth.per_class == 0) throw ConfigError("dataset.per_class must be positive");
    d.class_names = d.synth.classes;
    d.n_points = d.synth.n_points;
    d.channels = 3;
    if (d.synth.segmentation)
      for (std::size_t c = 0; c < d.class_names.size(); ++c)
        d.part_ranges.push_back({static_cast<std::int64_t>(2 * c), 2});
    return d;
  }

  auto path_field = [&](const char* key, fs::path& dst) {
    std::string s;
    read_field(j.at(key), std::string("dataset.") + key, s);
    dst = resolve(base, s);
  };
  if (d.kind == DatasetSpec::Kind::manifest) {
    if (!j.contains("train") || !j.contains("test")) throw ConfigError("dataset: manifest kind needs 'train' and 'test'");
    if (!j.contains("class_names")) throw ConfigError("dataset: manifest kind needs 'class_names'");
    path_field("train", d.train_manifest);
    path_field("test", d.test_manifest);
  } else {
    if (!j.contains("root")) throw ConfigError("dataset: tree kind needs 'root'");
    path_field("root", d.root);
    if (j.contains("train_split")) read_field(j.at("train_split"), "dataset.train_split", d.train_split);
    if (j.contains("test_split")) read_field(j.at("test_split"), "dataset.test_split", d.test_split);
  }
  if (j.contains("class_names")) {
    read_field(j.at("class_names"), "dataset.class_names", d.class_names);
  } else {
    // tree without explicit names: the directory listing defines them
    scan_class_tree(d.root, d.train_split, &d.class_names);
  }
  if (d.class_names.size() < 2) throw ConfigError("dataset needs at least 2 classes");
  if (j.contains("part_ranges")) d.part_ranges = parse_part_ranges(j.at("part_ranges"));
  if (j.contains("n_points")) read_field(j.at("n_points"), "dataset.n_points", d.n_points);
  if (j.contains("channels")) read_field(j.at("channels"), "dataset.channels", d.channels);
  if (d.n_points == 0) throw ConfigError("dataset.n_points must be positive");
  if (d.channels < 3) throw ConfigError("dataset.channels must be at least 3");
  return d;
}

// Fills model fields the dataset determines; explicit values must agree.
void reconcile(const nlohmann::json& model_json, RunConfig& c) {
  auto fill = [&](const char* key, std::size_t& field, std::size_t want, const std::string& what) {
    if (model_json.contains(key) && field != want)
      throw ConfigError(std::string("model.") + key + "=" + std::to_string(field) + " disagrees with the dataset (" +
                        std::to_string(want) + " " + what + ")");
    field = want;
  };
  const auto& d = c.dataset;
  if (c.model.task == Task::segment) {
    if (d.part_ranges.empty()) throw ConfigError("segment task needs dataset part ranges");
    if (d.part_ranges.size() != d.class_names.size())
      throw ConfigError("dataset.part_ranges needs one range per category");
    std::size_t parts = 0;
    for (const auto& r : d.part_ranges) parts += static_cast<std::size_t>(r.count);
    fill("num_parts", c.model.num_parts, parts, "parts");
  } else {
    fill("num_classes", c.model.num_classes, d.class_names.size(), "classes");
  }
  fill("input_channels", c.model.input_channels, d.channels, "channels");
  fill("num_points", c.model.num_points, c.points(), "points per cloud");
}

}  // namespace

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.adam = optimizer;
  t.augment = augment;
  t.augment_params = augment_params;
  t.seed = seed;
  return t;
}

std::size_t RunConfig::points() const {
  return dataset.kind == DatasetSpec::Kind::synth ? dataset.synth.n_points : dataset.n_points;
}

RunConfig parse_run_config(const nlohmann::json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  static const std::vector<std::string> known{"experiment", "task",           "dtype",      "dataset",
                                              "model",      "augment",        "augment_params", "optimizer",
                                              "epochs",     "batch_size",     "eval_batch_size", "eval_every",
                                              "seed",       "out",            "robustness_points", "ablate_variants"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError(key + ": unknown field");

  RunConfig c;
  if (j.contains("experiment")) read_field(j.at("experiment"), "experiment", c.experiment);
  if (j.contains("dtype")) {
    std::string s;
    read_field(j.at("dtype"), "dtype", s);
    if (s == "f32") c.dtype = DType::f32;
    else if (s == "f64") c.dtype = DType::f64;
    else throw ConfigError("dtype: expected f32 or f64, got '" + s + "'");
  }
  if (j.contains("dataset")) c.dataset = parse_dataset(j.at("dataset"), base_dir);
  const nlohmann::json model_json = j.value("model", nlohmann::json::object());
  from_json(model_json, c.model);
  if (j.contains("task")) {
    std::string s;
    read_field(j.at("task"), "task", s);
    const Task t = parse_task(s);
    if (model_json.contains("task") && c.model.task != t) throw ConfigError("task disagrees with model.task");
    c.model.task = t;
  }
  if (c.model.task == Task::segment && c.dataset.kind == DatasetSpec::Kind::synth && !c.dataset.synth.segmentation) {
    c.dataset.synth.segmentation = true;
    for (std::size_t i = 0; i < c.dataset.class_names.size(); ++i)
      c.dataset.part_ranges.push_back({static_cast<std::int64_t>(2 * i), 2});
  }
  if (j.contains("augment")) read_field(j.at("augment"), "augment", c.augment);
  if (j.contains("augment_params")) from_json(j.at("augment_params"), c.augment_params);
  if (j.contains("optimizer")) from_json(j.at("optimizer"), c.optimizer);
  if (j.contains("epochs")) read_field(j.at("epochs"), "epochs", c.epochs);
  if (j.contains("batch_size")) read_field(j.at("batch_size"), "batch_size", c.batch_size);
  if (j.contains("eval_batch_size")) read_field(j.at("eval_batch_size"), "eval_batch_size", c.eval_batch_size);
  if (j.contains("eval_every")) read_field(j.at("eval_every"), "eval_every", c.eval_every);
  if (j.contains("seed")) read_field(j.at("seed"), "seed", c.seed);
  if (j.contains("out")) {
    std::string s;
    read_field(j.at("out"), "out", s);
    c.out = resolve(base_dir, s);
  } else {
    c.out = base_dir / c.out;
  }
  if (j.contains("robustness_points")) read_field(j.at("robustness_points"), "robustness_points", c.robustness_points);
  if (j.contains("ablate_variants")) {
    std::vector<std::string> names;
    read_field(j.at("ablate_variants"), "ablate_variants", names);
    c.ablate_variants.clear();
    for (const auto& n : names) c.ablate_variants.push_back(parse_variant(n));
    if (c.ablate_variants.empty()) throw ConfigError("ablate_variants must not be empty");
  }

  reconcile(model_json, c);
  c.model.validate();
  c.augment_params.validate();
  c.optimizer.validate();
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.eval_batch_size == 0) throw ConfigError("eval_batch_size must be positive");
  if (c.eval_every == 0) throw ConfigError("eval_every must be positive");
  const bool pointnet = c.model.variant == Variant::pointnet_shared || c.model.variant == Variant::pointnet_grouped ||
                        c.model.variant == Variant::pointnet_depthwise || c.model.variant == Variant::pointnet_residual;
  if (c.points() <= c.model.k && (c.model.transformer.enabled || !pointnet))
    throw ConfigError("k=" + std::to_string(c.model.k) + " needs more than k points per cloud");
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json d;
  const auto& ds = c.dataset;
  switch (ds.kind) {
    case DatasetSpec::Kind::synth:
      d = {{"kind", "synth"},
           {"classes", ds.synth.classes},
           {"per_class", ds.synth.per_class},
           {"test_per_class", ds.test_per_class},
           {"n_points", ds.synth.n_points},
           {"seed", c.data_seed()},
           {"segmentation", ds.synth.segmentation}};
      break;
    case DatasetSpec::Kind::manifest:
      d = {{"kind", "manifest"}, {"train", ds.train_manifest.string()}, {"test", ds.test_manifest.string()}};
      break;
    case DatasetSpec::Kind::tree:
      d = {{"kind", "tree"}, {"root", ds.root.string()}, {"train_split", ds.train_split}, {"test_split", ds.test_split}};
      break;
  }
  if (ds.kind != DatasetSpec::Kind::synth) {
    d["class_names"] = ds.class_names;
    d["n_points"] = ds.n_points;
    d["channels"] = ds.channels;
    if (!ds.part_ranges.empty()) {
      nlohmann::json ranges = nlohmann::json::array();
      for (const auto& r : ds.part_ranges) ranges.push_back({{"first", r.first}, {"count", r.count}});
      d["part_ranges"] = ranges;
    }
  }
  std::vector<std::string> variants;
  for (auto v : c.ablate_variants) variants.push_back(to_string(v));
  // The output directory is deliberately absent: it names where a run is
  // stored, not what the run is.
  return {{"experiment", c.experiment},
          {"task", to_string(c.model.task)},
          {"dtype", dtype_name(c.dtype)},
          {"dataset", d},
          {"model", c.model},
          {"augment", c.augment},
          {"augment_params", c.augment_params},
          {"optimizer", c.optimizer},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"eval_batch_size", c.eval_batch_size},
          {"eval_every", c.eval_every},
          {"seed", c.seed},
          {"robustness_points", c.robustness_points},
          {"ablate_variants", variants}};
}

Splits load_splits(const RunConfig& c) {
  const auto& ds = c.dataset;
  Splits s;
  switch (ds.kind) {
    case DatasetSpec::Kind::synth: {
      SynthSpec spec = ds.synth;
      spec.seed = c.data_seed();
      s.train = synth_dataset(spec, "train");
      spec.per_class = ds.test_per_class;
      s.test = synth_dataset(spec, "test");
      break;
    }
    case DatasetSpec::Kind::manifest:
      s.train = load_dataset(read_manifest(ds.train_manifest), ds.class_names, "train", ds.n_points, c.data_seed(),
                             ds.channels, ds.part_ranges);
      s.test = load_dataset(read_manifest(ds.test_manifest), ds.class_names, "test", ds.n_points, c.data_seed(),
                            ds.channels, ds.part_ranges);
      break;
    case DatasetSpec::Kind::tree: {
      std::vector<std::string> names;
      auto train = scan_class_tree(ds.root, ds.train_split, &names);
      auto test = scan_class_tree(ds.root, ds.test_split);
      if (names != ds.class_names) throw ConfigError("dataset.class_names disagrees with the directories under " + ds.root.string());
      s.train = load_dataset(train, ds.class_names, "train", ds.n_points, c.data_seed(), ds.channels, ds.part_ranges);
      s.test = load_dataset(test, ds.class_names, "test", ds.n_points, c.data_seed(), ds.channels, ds.part_ranges);
      break;
    }
  }
  s.train.validate();
  s.test.validate();
  return s;
}

}  // namespace sawnet
