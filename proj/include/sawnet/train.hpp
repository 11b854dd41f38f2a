#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sawnet/data.hpp"
#include "sawnet/sawnet.hpp"

namespace sawnet {

// Mean over rows of -log softmax(logits)[label]. Logits are [B, C] or
// [B, N, P]; labels hold one id per row (B or B*N). `item_names`, when
// given, names the B items in range errors.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int64_t> labels,
                     std::span<const std::string> item_names = {});

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t decay_every = 20;  // epochs between halvings
  double decay_factor = 0.5;

  void validate() const;
};

void to_json(nlohmann::json& j, const AdamConfig& c);
void from_json(const nlohmann::json& j, AdamConfig& c);

// Scheduled rate: lr * decay_factor^floor(epoch / decay_every).
double lr_at(std::size_t epoch, const AdamConfig& cfg);
inline double lr_at(std::size_t epoch) { return lr_at(epoch, AdamConfig{}); }

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;  // one per parameter, created on the first step
  std::vector<Tensor<T>> v;
};

// One bias-corrected Adam update at rate `lr`.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, AdamState<T>& state, double lr);

struct Metrics {
  std::size_t count = 0;
  double loss = 0;
  double instance_accuracy = 0;
  double class_accuracy = 0;                // mean recall over classes present
  std::vector<double> per_class_accuracy;   // 0 for classes with no items
  std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction]
  // segmentation only
  bool has_miou = false;
  double miou = 0;                      // mean over shapes
  std::vector<double> category_miou;    // mean over the category's shapes
  std::vector<std::size_t> category_shapes;
};

nlohmann::json to_json(const Metrics& m);

Metrics classification_metrics(std::span<const std::int64_t> truth, std::span<const std::int64_t> pred,
                               std::size_t num_classes);

struct MiouResult {
  std::vector<double> shape_iou;
  std::vector<double> category_miou;
  std::vector<std::size_t> category_shapes;
  double overall = 0;
};

// Per shape: mean over the category's parts of |P&T| / |P|T|, with parts
// absent from both counting as 1.
MiouResult miou(const std::vector<std::vector<std::int64_t>>& pred, const std::vector<std::vector<std::int64_t>>& truth,
                const std::vector<std::int64_t>& category, const std::vector<PartRange>& ranges);

// Eval-mode metrics over the dataset in order, batch by batch.
template <typename T>
Metrics evaluate(Model<T>& model, const Dataset& data, std::size_t batch_size = 8);

template <typename T>
struct TrainState {
  std::size_t epoch = 0;  // completed epochs
  AdamState<T> adam;
};

// <dir>/model.json + <dir>/model.bin.
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, Model<T>& model, const TrainState<T>& state,
                     const nlohmann::json& run_config = nlohmann::json::object());

template <typename T>
struct Checkpoint {
  Model<T> model;
  TrainState<T> state;
  nlohmann::json run_config;
};

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir);

DType checkpoint_dtype(const std::filesystem::path& dir);

inline constexpr int kCheckpointFormat = 1;

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  AdamConfig adam;
  bool augment = true;
  AugmentParams augment_params;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
  double accuracy = 0;  // train-mode predictions on augmented inputs
};

template <typename T>
class Trainer {
 public:
  Trainer(Model<T> model, TrainConfig config, TrainState<T> state = {});

  // Trains epoch state().epoch and advances it. Shuffling, augmentation and
  // dropout streams derive from (seed, epoch), so resuming is seamless.
  EpochLog run_epoch(const Dataset& train);

  Model<T>& model() { return model_; }
  TrainState<T>& state() { return state_; }
  const TrainConfig& config() const { return config_; }

 private:
  Model<T> model_;
  TrainConfig config_;
  TrainState<T> state_;
};

}  // namespace sawnet
