#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "sawnet/rng.hpp"
#include "sawnet/tensor.hpp"

namespace sawnet {

struct PointCloud {
  std::size_t channels = 3;
  std::vector<double> points;  // [N, channels], row-major
  std::int64_t label = -1;     // class id (category id for segmentation)
  std::vector<std::int64_t> part_labels;  // empty, or one per point
  std::string source;

  std::size_t size() const { return channels ? points.size() / channels : 0; }
  const double* point(std::size_t i) const { return points.data() + i * channels; }
  double* point(std::size_t i) { return points.data() + i * channels; }
};

// Contiguous block of part ids owned by one category.
struct PartRange {
  std::int64_t first = 0;
  std::int64_t count = 0;
  bool contains(std::int64_t p) const { return p >= first && p < first + count; }
};

struct Dataset {
  std::string split;
  std::vector<std::string> class_names;
  std::vector<PartRange> part_ranges;  // per category; empty for classification
  std::vector<PointCloud> items;

  std::size_t num_classes() const { return class_names.size(); }
  std::size_t num_parts() const;
  // Throws DataError when an item's labels fall outside the vocabulary.
  void validate() const;
};

struct AugmentParams {
  bool rotate = true;
  std::size_t gravity_axis = 1;
  double scale_min = 0.8;
  double scale_max = 1.25;
  double jitter_sigma = 0.01;
  double jitter_clip = 0.05;

  void validate() const;
};

void to_json(nlohmann::json& j, const AugmentParams& p);
void from_json(const nlohmann::json& j, AugmentParams& p);

struct Mesh {
  std::vector<double> vertices;  // [V, 3]
  std::vector<std::uint32_t> faces;  // [F, 3] triangles
  std::size_t vertex_count() const { return vertices.size() / 3; }
  std::size_t face_count() const { return faces.size() / 3; }
};

// OFF reader; polygons are fan-triangulated. ParseError carries the line.
Mesh parse_off(std::istream& in, const std::string& source = "<stream>");
Mesh load_off(const std::filesystem::path& path);

// n points, faces chosen with probability proportional to area, uniform
// barycentric coordinates within the face.
PointCloud sample_mesh(const Mesh& mesh, std::size_t n, Rng& rng);

// Whitespace XYZ text: `channels` floats per line plus an optional integer
// part label. Lines starting with '#' and blank lines are skipped.
PointCloud parse_xyz(std::istream& in, std::size_t channels = 3, const std::string& source = "<stream>");
PointCloud load_xyz(const std::filesystem::path& path, std::size_t channels = 3);

// OFF by extension (.off), XYZ otherwise. XYZ clouds are subsampled to n;
// when n exceeds the file's points they are drawn with replacement and a
// note is appended to `warnings` (or written to stderr when null).
PointCloud load_mesh_and_sample(const std::filesystem::path& path, std::size_t n, Rng& rng,
                                std::size_t channels = 3, std::vector<std::string>* warnings = nullptr);

// Centroid to the origin, farthest point to radius 1 (xyz channels only).
PointCloud normalize_unit_sphere(PointCloud cloud);

PointCloud augment(PointCloud cloud, const AugmentParams& p, Rng& rng);

// m points uniformly without replacement; part labels follow their points.
PointCloud subsample(const PointCloud& cloud, std::size_t m, Rng& rng);

// Raw unit-scale surface samples for one analytic shape, with part ids 0/1
// local to the shape. Shapes: sphere, cube, cylinder, torus, cone.
PointCloud sample_shape(const std::string& shape, std::size_t n, Rng& rng);
const std::vector<std::string>& synth_shape_names();

struct SynthSpec {
  std::vector<std::string> classes{"sphere", "cube", "cylinder"};
  std::size_t per_class = 200;
  std::size_t n_points = 256;
  std::uint64_t seed = 0;
  bool segmentation = false;  // attach part labels; part ids of class c are 2c, 2c+1
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);

// Items ordered class by class; item i of class c draws from its own stream
// derived from (seed, split, c, i).
Dataset synth_dataset(const SynthSpec& spec, const std::string& split);

struct ManifestEntry {
  std::filesystem::path path;
  std::int64_t label = 0;
};

// JSON list of {"path", "class"}; relative paths resolve against the
// manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest);

// <root>/<class>/<split>/*.off style tree, classes and files sorted by name.
std::vector<ManifestEntry> scan_class_tree(const std::filesystem::path& root, const std::string& split,
                                           std::vector<std::string>* class_names = nullptr);

// Loads and normalizes every entry; item i samples from (seed, split, i).
Dataset load_dataset(const std::vector<ManifestEntry>& entries, std::vector<std::string> class_names,
                     const std::string& split, std::size_t n_points, std::uint64_t seed, std::size_t channels = 3,
                     std::vector<PartRange> part_ranges = {});

// Stacks clouds idx into [B, N, C]; all clouds must share N and C.
template <typename T>
Tensor<T> stack_points(const Dataset& data, const std::vector<std::size_t>& idx);

std::vector<std::int64_t> stack_labels(const Dataset& data, const std::vector<std::size_t>& idx);
std::vector<std::int64_t> stack_part_labels(const Dataset& data, const std::vector<std::size_t>& idx);

}  // namespace sawnet
