#include "sawnet/train.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <map>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>

namespace sawnet {
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kShuffleTag = 0x73687566;
constexpr std::uint64_t kAugmentTag = 0x61756720;
constexpr std::uint64_t kDropoutTag = 0x64726f70;

template <typename T>
std::int64_t argmax_row(const T* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < n; ++c)
    if (row[c] > row[best]) best = c;
  return static_cast<std::int64_t>(best);
}

// Model parameters in visitor order, with their names.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_parameters(Model<T>& model) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  model.visit([&](const std::string& name, Tensor<T>& t, TensorRole role) {
    if (role == TensorRole::parameter) out.emplace_back(name, &t);
  });
  return out;
}

template <typename T>
Tensor<T> batch_tensor(const std::vector<PointCloud>& clouds) {
  const std::size_t n = clouds.front().size(), ch = clouds.front().channels;
  Tensor<T> out({clouds.size(), n, ch});
  T* dst = out.raw();
  for (const auto& c : clouds) {
    if (c.size() != n || c.channels != ch)
      throw DimensionError("batch mixes clouds of different sizes (" + c.source + ")");
    for (double x : c.points) *dst++ = static_cast<T>(x);
  }
  return out;
}

std::vector<std::int64_t> row_labels(const std::vector<PointCloud>& clouds, Task task) {
  std::vector<std::int64_t> out;
  for (const auto& c : clouds) {
    if (task == Task::classify) {
      out.push_back(c.label);
    } else {
      if (c.part_labels.size() != c.size()) throw DataError(c.source + ": segmentation needs per-point part labels");
      out.insert(out.end(), c.part_labels.begin(), c.part_labels.end());
    }
  }
  return out;
}

void write_file(const fs::path& path, const char* data, std::size_t n) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(data, static_cast<std::streamsize>(n));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

nlohmann::json read_manifest_json(const fs::path& dir) {
  const fs::path p = dir / "model.json";
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

DType parse_dtype(const nlohmann::json& j, const std::string& where) {
  if (!j.is_string()) throw CorruptionError(where + ": dtype must be a string");
  const auto s = j.get<std::string>();
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw VersionError(where + ": unknown dtype '" + s + "'");
}

}  // namespace

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int64_t> labels, std::span<const std::string> item_names) {
  const Tensor<T>& x = logits.value();
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("cross_entropy needs [B, C] or [B, N, P] logits, got " + to_string(x.shape()));
  const std::size_t classes = x.shape().back();
  const std::size_t rows = x.size() / classes;
  const std::size_t per_item = rows / x.shape()[0];
  if (labels.size() != rows)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                         " rows");
  for (std::size_t r = 0; r < rows; ++r)
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      const std::size_t item = r / per_item;
      std::string who = "item " + std::to_string(item);
      if (item < item_names.size()) who += " (" + item_names[item] + ")";
      throw DataError(who + ": label " + std::to_string(labels[r]) + " outside [0, " + std::to_string(classes) + ")");
    }

  auto probs = std::make_shared<std::vector<T>>(x.size());
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.raw() + r * classes;
    T* p = probs->data() + r * classes;
    const T mx = *std::max_element(row, row + classes);
    double z = 0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c] - mx));
    const double log_z = std::log(z);
    for (std::size_t c = 0; c < classes; ++c) p[c] = static_cast<T>(std::exp(static_cast<double>(row[c] - mx) - log_z));
    total += log_z - static_cast<double>(row[labels[r]] - mx);
  }
  auto targets = std::make_shared<std::vector<std::int64_t>>(labels.begin(), labels.end());
  return logits.tape().record(Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(rows))), {logits.id()},
                              [probs, targets, rows, classes](const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                                const T s = g.item() / static_cast<T>(rows);
                                T* d = gin[0]->raw();
                                for (std::size_t r = 0; r < rows; ++r) {
                                  const T* p = probs->data() + r * classes;
                                  for (std::size_t c = 0; c < classes; ++c) d[r * classes + c] += s * p[c];
                                  d[r * classes + static_cast<std::size_t>((*targets)[r])] -= s;
                                }
                              });
}

void AdamConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("optimizer.lr must be positive");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("optimizer.beta1 must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("optimizer.beta2 must lie in [0, 1)");
  if (!(epsilon > 0)) throw ConfigError("optimizer.epsilon must be positive");
  if (decay_every == 0) throw ConfigError("optimizer.decay_every must be positive");
  if (!(decay_factor > 0 && decay_factor <= 1)) throw ConfigError("optimizer.decay_factor must lie in (0, 1]");
}

void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = {{"lr", c.lr},           {"beta1", c.beta1},           {"beta2", c.beta2},
       {"epsilon", c.epsilon}, {"decay_every", c.decay_every}, {"decay_factor", c.decay_factor}};
}

void from_json(const nlohmann::json& j, AdamConfig& c) {
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "lr") value.get_to(c.lr);
      else if (key == "beta1") value.get_to(c.beta1);
      else if (key == "beta2") value.get_to(c.beta2);
      else if (key == "epsilon") value.get_to(c.epsilon);
      else if (key == "decay_every") value.get_to(c.decay_every);
      else if (key == "decay_factor") value.get_to(c.decay_factor);
      else throw ConfigError("optimizer." + key + ": unknown field");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("optimizer." + key + ": " + e.what());
    }
  }
}

double lr_at(std::size_t epoch, const AdamConfig& cfg) {
  return cfg.lr * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, AdamState<T>& s, double lr) {
  if (params.size() != grads.size())
    throw ContractError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                        std::to_string(grads.size()) + " gradients");
  if (s.m.empty() && s.step == 0) {
    for (auto* p : params) {
      s.m.emplace_back(p->shape());
      s.v.emplace_back(p->shape());
    }
  }
  if (s.m.size() != params.size() || s.v.size() != params.size())
    throw ContractError("adam_step: optimizer state holds " + std::to_string(s.m.size()) + " moments for " +
                        std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->shape() != grads[i].shape() || s.m[i].shape() != grads[i].shape())
      throw ContractError("adam_step: parameter " + std::to_string(i) + " has shape " + to_string(params[i]->shape()) +
                          ", gradient " + to_string(grads[i].shape()));
  s.step += 1;
  const double b1 = s.config.beta1, b2 = s.config.beta2, eps = s.config.epsilon;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->raw();
    T* m = s.m[i].raw();
    T* v = s.v[i].raw();
    const T* g = grads[i].raw();
    for (std::size_t j = 0, n = params[i]->size(); j < n; ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + eps);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
    }
  }
}

nlohmann::json to_json(const Metrics& m) {
  nlohmann::json j{{"count", m.count},
                   {"loss", m.loss},
                   {"instance_accuracy", m.instance_accuracy},
                   {"class_accuracy", m.class_accuracy},
                   {"per_class_accuracy", m.per_class_accuracy},
                   {"confusion", m.confusion}};
  if (m.has_miou) {
    j["miou"] = m.miou;
    j["category_miou"] = m.category_miou;
    j["category_shapes"] = m.category_shapes;
  }
  return j;
}

Metrics classification_metrics(std::span<const std::int64_t> truth, std::span<const std::int64_t> pred,
                               std::size_t num_classes) {
  if (truth.size() != pred.size()) throw ContractError("metrics: truth and prediction lengths differ");
  if (truth.empty()) throw ConfigError("metrics over an empty set");
  Metrics m;
  m.count = truth.size();
  m.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || static_cast<std::size_t>(truth[i]) >= num_classes)
      throw DataError("metrics: true label " + std::to_string(truth[i]) + " at " + std::to_string(i) + " out of range");
    if (pred[i] < 0 || static_cast<std::size_t>(pred[i]) >= num_classes)
      throw DataError("metrics: prediction " + std::to_string(pred[i]) + " at " + std::to_string(i) + " out of range");
    m.confusion[truth[i]][pred[i]] += 1;
  }
  std::size_t correct = 0, present = 0;
  double recall_sum = 0;
  m.per_class_accuracy.assign(num_classes, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    correct += m.confusion[c][c];
    const std::size_t row = std::accumulate(m.confusion[c].begin(), m.confusion[c].end(), std::size_t{0});
    if (row == 0) continue;
    m.per_class_accuracy[c] = static_cast<double>(m.confusion[c][c]) / static_cast<double>(row);
    recall_sum += m.per_class_accuracy[c];
    ++present;
  }
  m.instance_accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  m.class_accuracy = recall_sum / static_cast<double>(present);
  return m;
}

MiouResult miou(const std::vector<std::vector<std::int64_t>>& pred, const std::vector<std::vector<std::int64_t>>& truth,
                const std::vector<std::int64_t>& category, const std::vector<PartRange>& ranges) {
  if (pred.size() != truth.size() || pred.size() != category.size())
    throw ContractError("miou: prediction, truth and category counts differ");
  if (pred.empty()) throw ConfigError("miou over an empty set");
  MiouResult r;
  r.category_miou.assign(ranges.size(), 0.0);
  r.category_shapes.assign(ranges.size(), 0);
  double total = 0;
  for (std::size_t s = 0; s < pred.size(); ++s) {
    if (category[s] < 0 || static_cast<std::size_t>(category[s]) >= ranges.size())
      throw DataError("miou: shape " + std::to_string(s) + " has unknown category " + std::to_string(category[s]));
    const PartRange& range = ranges[category[s]];
    if (pred[s].size() != truth[s].size())
      throw ContractError("miou: shape " + std::to_string(s) + " prediction/truth lengths differ");
    std::vector<std::size_t> inter(range.count, 0), uni(range.count, 0);
    for (std::size_t i = 0; i < pred[s].size(); ++i) {
      const auto p = pred[s][i], t = truth[s][i];
      if (!range.contains(p) || !range.contains(t))
        throw DataError("miou: shape " + std::to_string(s) + " point " + std::to_string(i) + " has part " +
                        std::to_string(range.contains(p) ? t : p) + " outside its category range");
      if (p == t) {
        inter[p - range.first] += 1;
        uni[p - range.first] += 1;
      } else {
        uni[p - range.first] += 1;
        uni[t - range.first] += 1;
      }
    }
    double iou = 0;
    for (std::int64_t k = 0; k < range.count; ++k)
      iou += uni[k] == 0 ? 1.0 : static_cast<double>(inter[k]) / static_cast<double>(uni[k]);
    iou /= static_cast<double>(range.count);
    r.shape_iou.push_back(iou);
    r.category_miou[category[s]] += iou;
    r.category_shapes[category[s]] += 1;
    total += iou;
  }
  for (std::size_t c = 0; c < ranges.size(); ++c)
    if (r.category_shapes[c]) r.category_miou[c] /= static_cast<double>(r.category_shapes[c]);
  r.overall = total / static_cast<double>(pred.size());
  return r;
}

template <typename T>
Metrics evaluate(Model<T>& model, const Dataset& data, std::size_t batch_size) {
  if (data.items.empty()) throw ConfigError("evaluate: dataset '" + data.split + "' is empty");
  if (batch_size == 0) throw ConfigError("evaluate: batch size must be positive");
  const auto& cfg = model.config();
  const bool segment = cfg.task == Task::segment;
  if (!segment && data.num_classes() != cfg.num_classes)
    throw ConfigError("dataset has " + std::to_string(data.num_classes()) + " classes, model predicts " +
                      std::to_string(cfg.num_classes));
  if (segment && data.num_parts() != cfg.num_parts)
    throw ConfigError("dataset has " + std::to_string(data.num_parts()) + " parts, model predicts " +
                      std::to_string(cfg.num_parts));

  std::vector<std::int64_t> truth, pred;
  std::vector<std::vector<std::int64_t>> shape_pred, shape_truth;
  std::vector<std::int64_t> shape_cat;
  double loss_sum = 0;
  Rng unused(0);
  for (std::size_t start = 0; start < data.items.size(); start += batch_size) {
    std::vector<PointCloud> clouds(data.items.begin() + static_cast<std::ptrdiff_t>(start),
                                   data.items.begin() + static_cast<std::ptrdiff_t>(
                                                            std::min(start + batch_size, data.items.size())));
    Tape<T> tape;
    Context<T> ctx(tape, Mode::eval, unused);
    Var<T> logits = model.forward(ctx, ctx.input(batch_tensor<T>(clouds)));
    const auto labels = row_labels(clouds, cfg.task);
    loss_sum += static_cast<double>(cross_entropy(logits, std::span<const std::int64_t>(labels)).value().item()) *
                static_cast<double>(clouds.size());
    const Tensor<T>& lv = logits.value();
    const std::size_t width = lv.shape().back();
    if (!segment) {
      for (std::size_t b = 0; b < clouds.size(); ++b) {
        truth.push_back(labels[b]);
        pred.push_back(argmax_row(lv.raw() + b * width, width));
      }
    } else {
      const std::size_t n = lv.shape()[1];
      for (std::size_t b = 0; b < clouds.size(); ++b) {
        const auto& c = clouds[b];
        if (c.label < 0 || static_cast<std::size_t>(c.label) >= data.part_ranges.size())
          throw DataError(c.source + ": category " + std::to_string(c.label) + " has no part range");
        const PartRange r = data.part_ranges[c.label];
        std::vector<std::int64_t> sp(n);
        for (std::size_t i = 0; i < n; ++i) {
          // predictions restricted to the category's own parts
          const T* row = lv.raw() + (b * n + i) * width + r.first;
          sp[i] = r.first + argmax_row(row, static_cast<std::size_t>(r.count));
        }
        truth.insert(truth.end(), c.part_labels.begin(), c.part_labels.end());
        pred.insert(pred.end(), sp.begin(), sp.end());
        shape_pred.push_back(std::move(sp));
        shape_truth.push_back(c.part_labels);
        shape_cat.push_back(c.label);
      }
    }
  }
  Metrics m = classification_metrics(truth, pred, segment ? cfg.num_parts : cfg.num_classes);
  m.count = data.items.size();
  m.loss = loss_sum / static_cast<double>(data.items.size());
  if (segment) {
    auto r = miou(shape_pred, shape_truth, shape_cat, data.part_ranges);
    m.has_miou = true;
    m.miou = r.overall;
    m.category_miou = r.category_miou;
    m.category_shapes = r.category_shapes;
  }
  return m;
}

template <typename T>
void save_checkpoint(const fs::path& dir, Model<T>& model, const TrainState<T>& state,
                     const nlohmann::json& run_config) {
  static_assert(std::endian::native == std::endian::little, "checkpoint buffers are little-endian");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
  std::vector<std::string> param_names;
  model.visit([&](const std::string& name, Tensor<T>& t, TensorRole role) {
    tensors.emplace_back(name, &t);
    if (role == TensorRole::parameter) param_names.push_back(name);
  });
  if (!state.adam.m.empty()) {
    if (state.adam.m.size() != param_names.size() || state.adam.v.size() != param_names.size())
      throw ContractError("optimizer state does not match the model's parameters");
    for (std::size_t i = 0; i < param_names.size(); ++i) tensors.emplace_back("adam.m." + param_names[i], &state.adam.m[i]);
    for (std::size_t i = 0; i < param_names.size(); ++i) tensors.emplace_back("adam.v." + param_names[i], &state.adam.v[i]);
  }

  nlohmann::json entries = nlohmann::json::array();
  std::vector<char> buffer;
  for (const auto& [name, t] : tensors) {
    const std::size_t nbytes = t->size() * sizeof(T);
    entries.push_back({{"name", name},
                       {"shape", t->shape()},
                       {"dtype", dtype_name(dtype_of<T>::value)},
                       {"offset", buffer.size()},
                       {"nbytes", nbytes}});
    const char* src = reinterpret_cast<const char*>(t->raw());
    buffer.insert(buffer.end(), src, src + nbytes);
  }
  nlohmann::json optimizer;
  to_json(optimizer, state.adam.config);
  nlohmann::json model_cfg;
  to_json(model_cfg, model.config());
  nlohmann::json manifest{{"format_version", kCheckpointFormat},
                          {"dtype", dtype_name(dtype_of<T>::value)},
                          {"epoch", state.epoch},
                          {"model", model_cfg},
                          {"run_config", run_config},
                          {"optimizer", {{"step", state.adam.step}, {"config", optimizer}}},
                          {"buffer_bytes", buffer.size()},
                          {"tensors", entries}};
  write_file(dir / "model.bin", buffer.data(), buffer.size());
  const std::string text = manifest.dump(2) + "\n";
  write_file(dir / "model.json", text.data(), text.size());
}

DType checkpoint_dtype(const fs::path& dir) {
  const auto j = read_manifest_json(dir);
  if (!j.contains("dtype")) throw CorruptionError(dir.string() + "/model.json: missing dtype");
  return parse_dtype(j["dtype"], dir.string() + "/model.json");
}

template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& dir) {
  const std::string where = (dir / "model.json").string();
  const auto j = read_manifest_json(dir);
  try {
    if (!j.contains("format_version") || j["format_version"].get<int>() != kCheckpointFormat)
      throw VersionError(where + ": unsupported format_version " +
                         (j.contains("format_version") ? j["format_version"].dump() : std::string("(missing)")));
    const DType dtype = parse_dtype(j.at("dtype"), where);
    if (dtype != dtype_of<T>::value)
      throw ConfigError(where + ": checkpoint holds " + dtype_name(dtype) + " tensors, loader expects " +
                        dtype_name(dtype_of<T>::value));

    const fs::path bin_path = dir / "model.bin";
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw IoError("cannot open " + bin_path.string());
    std::vector<char> buffer((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

    const auto& entries = j.at("tensors");
    std::size_t expected = 0;
    for (const auto& e : entries) {
      parse_dtype(e.at("dtype"), where);
      const auto shape = e.at("shape").get<Shape>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (e.at("offset").get<std::size_t>() != expected || nbytes != element_count(shape) * sizeof(T))
        throw CorruptionError(where + ": tensor '" + e.at("name").get<std::string>() + "' has inconsistent layout");
      expected += nbytes;
    }
    if (buffer.size() != expected || j.at("buffer_bytes").get<std::size_t>() != expected)
      throw CorruptionError(bin_path.string() + ": " + std::to_string(buffer.size()) + " bytes, manifest describes " +
                            std::to_string(expected));

    ModelConfig cfg;
    from_json(j.at("model"), cfg);
    Checkpoint<T> ck{Model<T>::build(cfg, 0), {}, j.value("run_config", nlohmann::json::object())};
    std::map<std::string, const nlohmann::json*> by_name;
    for (const auto& e : entries) by_name[e.at("name").get<std::string>()] = &e;

    auto fill = [&](const std::string& name, Tensor<T>& t) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw CorruptionError(where + ": missing tensor '" + name + "'");
      const auto& e = *it->second;
      if (e.at("shape").get<Shape>() != t.shape())
        throw CorruptionError(where + ": tensor '" + name + "' has shape " + e.at("shape").dump() + ", model expects " +
                              to_string(t.shape()));
      std::memcpy(t.raw(), buffer.data() + e.at("offset").get<std::size_t>(), t.size() * sizeof(T));
      by_name.erase(it);
    };
    std::vector<std::pair<std::string, Tensor<T>*>> params;
    ck.model.visit([&](const std::string& name, Tensor<T>& t, TensorRole role) {
      fill(name, t);
      if (role == TensorRole::parameter) params.emplace_back(name, &t);
    });
    const auto& opt = j.at("optimizer");
    from_json(opt.at("config"), ck.state.adam.config);
    ck.state.adam.step = opt.at("step").get<std::uint64_t>();
    ck.state.epoch = j.at("epoch").get<std::size_t>();
    if (!by_name.empty()) {
      for (const auto& [name, t] : params) {
        ck.state.adam.m.emplace_back(t->shape());
        fill("adam.m." + name, ck.state.adam.m.back());
      }
      for (const auto& [name, t] : params) {
        ck.state.adam.v.emplace_back(t->shape());
        fill("adam.v." + name, ck.state.adam.v.back());
      }
    }
    if (!by_name.empty()) throw CorruptionError(where + ": unexpected tensor '" + by_name.begin()->first + "'");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(where + ": " + e.what());
  }
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  adam.validate();
  augment_params.validate();
}

template <typename T>
Trainer<T>::Trainer(Model<T> model, TrainConfig config, TrainState<T> state)
    : model_(std::move(model)), config_(std::move(config)), state_(std::move(state)) {
  config_.validate();
  state_.adam.config = config_.adam;
}

template <typename T>
EpochLog Trainer<T>::run_epoch(const Dataset& train) {
  if (train.items.empty()) throw ConfigError("training set is empty");
  const std::size_t epoch = state_.epoch;
  const double lr = lr_at(epoch, config_.adam);
  const Task task = model_.config().task;

  std::vector<std::size_t> order(train.items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle = make_rng(config_.seed, {kShuffleTag, epoch});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(shuffle, i)]);

  auto params = named_parameters(model_);
  std::vector<Tensor<T>*> param_ptrs;
  for (auto& [name, t] : params) param_ptrs.push_back(t);

  double loss_sum = 0;
  std::size_t correct = 0, rows_seen = 0, batch_no = 0;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size, ++batch_no) {
    const std::size_t end = std::min(start + config_.batch_size, order.size());
    std::vector<PointCloud> clouds;
    std::vector<std::string> names;
    for (std::size_t i = start; i < end; ++i) {
      const PointCloud& src = train.items[order[i]];
      if (config_.augment) {
        Rng rng = make_rng(config_.seed, {kAugmentTag, epoch, order[i]});
        clouds.push_back(augment(src, config_.augment_params, rng));
      } else {
        clouds.push_back(src);
      }
      names.push_back(src.source);
    }
    const auto labels = row_labels(clouds, task);

    Tape<T> tape;
    Rng drop = make_rng(config_.seed, {kDropoutTag, epoch, batch_no});
    Context<T> ctx(tape, Mode::train, drop);
    Var<T> logits = model_.forward(ctx, ctx.input(batch_tensor<T>(clouds)));
    Var<T> loss = cross_entropy(logits, std::span<const std::int64_t>(labels), std::span<const std::string>(names));

    std::vector<NodeId> leaves;
    for (auto* p : param_ptrs) leaves.push_back(ctx.bind(*p).id());
    auto grads = tape.backward(loss, leaves);
    std::vector<Tensor<T>> grad_list;
    grad_list.reserve(leaves.size());
    for (auto id : leaves) grad_list.push_back(std::move(grads.at(id)));
    adam_step(std::span<Tensor<T>* const>(param_ptrs), std::span<const Tensor<T>>(grad_list), state_.adam, lr);

    const Tensor<T>& lv = logits.value();
    const std::size_t width = lv.shape().back();
    for (std::size_t r = 0; r < labels.size(); ++r)
      if (argmax_row(lv.raw() + r * width, width) == labels[r]) ++correct;
    rows_seen += labels.size();
    loss_sum += static_cast<double>(loss.value().item()) * static_cast<double>(clouds.size());
  }
  state_.epoch += 1;
  return {epoch, lr, loss_sum / static_cast<double>(order.size()),
          static_cast<double>(correct) / static_cast<double>(rows_seen)};
}

#define SAWNET_INSTANTIATE_TRAIN(T)                                                                             \
  template Var<T> cross_entropy<T>(Var<T>, std::span<const std::int64_t>, std::span<const std::string>);       \
  template void adam_step<T>(std::span<Tensor<T>* const>, std::span<const Tensor<T>>, AdamState<T>&, double); \
  template Metrics evaluate<T>(Model<T>&, const Dataset&, std::size_t);                                       \
  template void save_checkpoint<T>(const fs::path&, Model<T>&, const TrainState<T>&, const nlohmann::json&);  \
  template Checkpoint<T> load_checkpoint<T>(const fs::path&);                                                 \
  template class Trainer<T>;

SAWNET_INSTANTIATE_TRAIN(float)
SAWNET_INSTANTIATE_TRAIN(double)

}  // namespace sawnet
