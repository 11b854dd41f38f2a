#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sawnet/layers.hpp"
#include "sawnet/sawnet.hpp"

// Invariant checks shared by `sawnet verify` and the acceptance suite.
namespace sawnet::verify {

struct CheckResult {
  std::string name;
  double max_error = 0;
  double tolerance = 0;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

using Check = std::function<CheckResult()>;

struct NamedCheck {
  std::string name;
  Check run;
};

struct Report {
  std::vector<CheckResult> results;
  bool passed() const;
};

// Runs every check; an exception fails that check with its message.
Report run_checks(const std::vector<NamedCheck>& checks);
nlohmann::json to_json(const Report& r);
void print_report(std::ostream& os, const Report& r);

// ---- gradient checks ------------------------------------------------------

using LossFn = std::function<Var<double>(Context<double>&)>;
using NamedTensors = std::vector<std::pair<std::string, Tensor<double>*>>;

struct GradientCheck {
  double max_rel_error = 0;
  std::string worst;        // "<tensor>[<element>]"
  std::size_t elements = 0;
  std::size_t one_sided = 0;
  std::size_t unresolved = 0;
};

// Gradients that are exactly zero (a bias feeding train-mode batch norm)
// come back from finite differences as round-off of order 1e-10, so the
// denominator is floored: below the floor the test is an absolute one.
inline constexpr double kGradientFloor = 1e-5;

// |a - b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor = kGradientFloor);

// Compares tape gradients of `loss` w.r.t. every element of `tensors`
// against piecewise central differences. The loss function must reach the
// tensors through ctx.bind. Every evaluation runs in train mode with a
// dropout stream reseeded from `rng_seed`.
GradientCheck gradient_check(const LossFn& loss, const NamedTensors& tensors, std::uint64_t rng_seed,
                             double step = 1e-4);

// Fixed random projection sum(x * R) so every output element carries gradient.
Var<double> probe_loss(Context<double>& ctx, Var<double> x, std::uint64_t seed);

inline constexpr double kGradientTolerance = 1e-4;

// One check per layer type on random inputs; parameters and inputs are all checked.
std::vector<NamedCheck> layer_gradient_checks(std::size_t seeds, std::uint64_t base_seed = 1);

// Tiny end-to-end classifier (B=2, N=16, trunk 8/8, k=4) over `seeds` seeds.
ModelConfig tiny_model_config(Variant variant = Variant::sawnet, Task task = Task::classify);
CheckResult check_model_gradients(const ModelConfig& cfg, std::size_t seeds, std::uint64_t base_seed = 1,
                                  std::size_t batch = 2, std::size_t points = 16);

// ---- structural checks ----------------------------------------------------

// knn vs an O(N^2) sort over all pairs, every k < N, with tie-heavy clouds mixed in.
CheckResult check_knn_oracle(std::size_t clouds, std::size_t min_n, std::size_t max_n, std::uint64_t seed);

// Serial reference kernels and the parallel ones agree bit for bit.
CheckResult check_kernel_equivalence(std::uint64_t seed);

// f32 classification logits under random point permutations.
CheckResult check_permutation_invariance(std::size_t permutations, std::uint64_t seed);
// f32 per-point scores follow the points under permutation.
CheckResult check_segmentation_equivariance(std::size_t permutations, std::uint64_t seed);

// Freshly built transformer leaves the points unchanged.
CheckResult check_transformer_identity(std::uint64_t seed);

// Zeroed second-stage weights reduce a SAW layer to its projected skips.
CheckResult check_residual_degeneracy(std::uint64_t seed);

// save -> load reproduces logits, tensors and optimizer state bit for bit;
// interrupted and uninterrupted training agree; the schedule resumes.
CheckResult check_checkpoint_roundtrip(const std::filesystem::path& scratch, std::uint64_t seed);

// miou against a set-counting oracle, plus the symmetric half-flip case.
CheckResult check_miou_oracle(std::size_t configs, std::uint64_t seed);

struct SuiteOptions {
  std::size_t gradient_seeds = 3;
  std::size_t knn_clouds = 12;
  std::size_t knn_max_n = 96;
  std::size_t permutations = 20;
  std::size_t miou_configs = 100;
  std::filesystem::path scratch = std::filesystem::temp_directory_path() / "sawnet-verify";
};

std::vector<NamedCheck> default_suite(const SuiteOptions& opts);

}  // namespace sawnet::verify
