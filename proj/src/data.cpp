#include "sawnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

#include "sawnet/error.hpp"

namespace sawnet {
namespace fs = std::filesystem;

namespace {

std::uint64_t tag_of(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

std::vector<std::string> tokenize(const std::string& line) {
  std::string body = line.substr(0, line.find('#'));
  std::istringstream is(body);
  std::vector<std::string> out;
  for (std::string t; is >> t;) out.push_back(t);
  return out;
}

bool parse_double(const std::string& s, double& out) {
  const char* b = s.c_str();
  char* e = nullptr;
  out = std::strtod(b, &e);
  return e != b && *e == '\0' && std::isfinite(out);
}

bool parse_int(const std::string& s, std::int64_t& out) {
  const char* b = s.c_str();
  char* e = nullptr;
  long long v = std::strtoll(b, &e, 10);
  if (e == b || *e != '\0') return false;
  out = v;
  return true;
}

[[noreturn]] void parse_fail(const std::string& source, std::size_t line, const std::string& msg) {
  throw ParseError(source + ":" + std::to_string(line) + ": " + msg);
}

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

double triangle_area(const double* a, const double* b, const double* c) {
  const double u[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const double v[3] = {c[0] - a[0], c[1] - a[1], c[2] - a[2]};
  const double x = u[1] * v[2] - u[2] * v[1];
  const double y = u[2] * v[0] - u[0] * v[2];
  const double z = u[0] * v[1] - u[1] * v[0];
  return 0.5 * std::sqrt(x * x + y * y + z * z);
}

void push(PointCloud& c, double x, double y, double z, std::int64_t part) {
  c.points.insert(c.points.end(), {x, y, z});
  c.part_labels.push_back(part);
}

constexpr double kPi = std::numbers::pi;
constexpr double kTorusMajor = 1.0;
constexpr double kTorusMinor = 0.35;

// Part ids: sphere 0 upper / 1 lower hemisphere; cube 0 sides / 1 top+bottom;
// cylinder 0 barrel / 1 caps; torus 0 outer / 1 inner half; cone 0 lateral / 1 base.
void sample_surface(const std::string& shape, std::size_t n, Rng& rng, PointCloud& c) {
  if (shape == "sphere") {
    for (std::size_t i = 0; i < n; ++i) {
      double v[3], r = 0;
      do {
        for (double& x : v) x = standard_normal(rng);
        r = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      } while (r < 1e-12);
      push(c, v[0] / r, v[1] / r, v[2] / r, v[1] >= 0 ? 0 : 1);
    }
  } else if (shape == "cube") {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t face = uniform_index(rng, 6);
      const std::size_t axis = face / 2;
      double p[3];
      for (double& x : p) x = uniform(rng, -1.0, 1.0);
      p[axis] = face % 2 ? 1.0 : -1.0;
      push(c, p[0], p[1], p[2], axis == 1 ? 1 : 0);
    }
  } else if (shape == "cylinder") {
    // radius 1, height 2: barrel area 4 pi, caps 2 pi together
    for (std::size_t i = 0; i < n; ++i) {
      const double t = 2 * kPi * uniform01(rng);
      if (uniform01(rng) < 2.0 / 3.0) {
        push(c, std::cos(t), uniform(rng, -1.0, 1.0), std::sin(t), 0);
      } else {
        const double r = std::sqrt(uniform01(rng));
        push(c, r * std::cos(t), uniform01(rng) < 0.5 ? -1.0 : 1.0, r * std::sin(t), 1);
      }
    }
  } else if (shape == "torus") {
    for (std::size_t i = 0; i < n; ++i) {
      double tube = 0;
      // area element is proportional to (R + r cos tube)
      do {
        tube = 2 * kPi * uniform01(rng);
      } while (uniform01(rng) * (kTorusMajor + kTorusMinor) > kTorusMajor + kTorusMinor * std::cos(tube));
      const double ring = 2 * kPi * uniform01(rng);
      const double rad = kTorusMajor + kTorusMinor * std::cos(tube);
      push(c, rad * std::cos(ring), kTorusMinor * std::sin(tube), rad * std::sin(ring), std::cos(tube) >= 0 ? 0 : 1);
    }
  } else if (shape == "cone") {
    // apex (0,1,0), base radius 1 at y = -1
    const double lateral = kPi * std::sqrt(5.0), base = kPi;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = 2 * kPi * uniform01(rng);
      if (uniform01(rng) * (lateral + base) < lateral) {
        const double s = std::sqrt(uniform01(rng));
        push(c, s * std::cos(t), 1.0 - 2.0 * s, s * std::sin(t), 0);
      } else {
        const double r = std::sqrt(uniform01(rng));
        push(c, r * std::cos(t), -1.0, r * std::sin(t), 1);
      }
    }
  } else {
    throw ConfigError("unknown synthetic shape '" + shape + "'");
  }
}

}  // namespace

std::size_t Dataset::num_parts() const {
  std::int64_t n = 0;
  for (const auto& r : part_ranges) n = std::max(n, r.first + r.count);
  return static_cast<std::size_t>(n);
}

void Dataset::validate() const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& c = items[i];
    const std::string who = "item " + std::to_string(i) + (c.source.empty() ? "" : " (" + c.source + ")");
    if (c.size() == 0) throw DataError(who + " has no points");
    if (c.label < 0 || static_cast<std::size_t>(c.label) >= num_classes())
      throw DataError(who + ": label " + std::to_string(c.label) + " outside [0, " + std::to_string(num_classes()) +
                      ")");
    if (!c.part_labels.empty() && c.part_labels.size() != c.size())
      throw DataError(who + ": " + std::to_string(c.part_labels.size()) + " part labels for " +
                      std::to_string(c.size()) + " points");
    if (!part_ranges.empty()) {
      if (static_cast<std::size_t>(c.label) >= part_ranges.size())
        throw DataError(who + ": no part range for category " + std::to_string(c.label));
      const auto& r = part_ranges[c.label];
      for (auto p : c.part_labels)
        if (!r.contains(p))
          throw DataError(who + ": part " + std::to_string(p) + " outside category range [" +
                          std::to_string(r.first) + ", " + std::to_string(r.first + r.count) + ")");
    }
  }
}

void AugmentParams::validate() const {
  if (gravity_axis > 2) throw ConfigError("augment.gravity_axis must be 0, 1 or 2");
  if (!(scale_min > 0 && scale_max >= scale_min)) throw ConfigError("augment scale range must be positive and ordered");
  if (!(jitter_sigma >= 0)) throw ConfigError("augment.jitter_sigma must be >= 0");
  if (!(jitter_clip >= 0)) throw ConfigError("augment.jitter_clip must be >= 0");
}

void to_json(nlohmann::json& j, const AugmentParams& p) {
  j = {{"rotate", p.rotate},           {"gravity_axis", p.gravity_axis}, {"scale_min", p.scale_min},
       {"scale_max", p.scale_max},     {"jitter_sigma", p.jitter_sigma}, {"jitter_clip", p.jitter_clip}};
}

void from_json(const nlohmann::json& j, AugmentParams& p) {
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "rotate") value.get_to(p.rotate);
      else if (key == "gravity_axis") value.get_to(p.gravity_axis);
      else if (key == "scale_min") value.get_to(p.scale_min);
      else if (key == "scale_max") value.get_to(p.scale_max);
      else if (key == "jitter_sigma") value.get_to(p.jitter_sigma);
      else if (key == "jitter_clip") value.get_to(p.jitter_clip);
      else throw ConfigError("augment." + key + ": unknown field");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("augment." + key + ": " + e.what());
    }
  }
}

Mesh parse_off(std::istream& in, const std::string& source) {
  std::vector<std::pair<std::size_t, std::vector<std::string>>> lines;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    auto toks = tokenize(line);
    if (!toks.empty()) lines.emplace_back(no, std::move(toks));
  }
  if (lines.empty()) parse_fail(source, 1, "empty file, expected OFF header");
  auto& head = lines[0].second;
  if (head[0].rfind("OFF", 0) != 0) parse_fail(source, lines[0].first, "expected OFF header, got '" + head[0] + "'");

  // Counts may follow the keyword on the same line, even without a space.
  std::vector<std::pair<std::size_t, std::string>> count_toks;
  if (head[0].size() > 3) count_toks.emplace_back(lines[0].first, head[0].substr(3));
  for (std::size_t i = 1; i < head.size(); ++i) count_toks.emplace_back(lines[0].first, head[i]);
  std::size_t cursor = 1;
  while (count_toks.size() < 3) {
    if (cursor >= lines.size()) parse_fail(source, lines.back().first, "missing vertex/face counts");
    for (const auto& t : lines[cursor].second) count_toks.emplace_back(lines[cursor].first, t);
    ++cursor;
  }
  std::int64_t counts[3];
  for (int i = 0; i < 3; ++i)
    if (!parse_int(count_toks[i].second, counts[i]) || counts[i] < 0)
      parse_fail(source, count_toks[i].first, "bad count '" + count_toks[i].second + "'");
  const auto nv = static_cast<std::size_t>(counts[0]);
  const auto nf = static_cast<std::size_t>(counts[1]);

  Mesh mesh;
  mesh.vertices.reserve(nv * 3);
  for (std::size_t v = 0; v < nv; ++v, ++cursor) {
    if (cursor >= lines.size()) parse_fail(source, lines.back().first, "expected " + std::to_string(nv) + " vertices");
    const auto& [no, toks] = lines[cursor];
    if (toks.size() < 3) parse_fail(source, no, "vertex needs 3 coordinates");
    for (int k = 0; k < 3; ++k) {
      double x;
      if (!parse_double(toks[k], x)) parse_fail(source, no, "bad coordinate '" + toks[k] + "'");
      mesh.vertices.push_back(x);
    }
  }
  for (std::size_t f = 0; f < nf; ++f, ++cursor) {
    if (cursor >= lines.size()) parse_fail(source, lines.back().first, "expected " + std::to_string(nf) + " faces");
    const auto& [no, toks] = lines[cursor];
    std::int64_t deg;
    if (!parse_int(toks[0], deg) || deg < 3) parse_fail(source, no, "face needs at least 3 vertices");
    if (toks.size() < static_cast<std::size_t>(deg) + 1) parse_fail(source, no, "face lists too few indices");
    std::vector<std::uint32_t> idx;
    for (std::int64_t k = 1; k <= deg; ++k) {
      std::int64_t v;
      if (!parse_int(toks[k], v) || v < 0 || static_cast<std::size_t>(v) >= nv)
        parse_fail(source, no, "vertex index '" + toks[k] + "' out of range");
      idx.push_back(static_cast<std::uint32_t>(v));
    }
    for (std::size_t k = 1; k + 1 < idx.size(); ++k) mesh.faces.insert(mesh.faces.end(), {idx[0], idx[k], idx[k + 1]});
  }
  return mesh;
}

Mesh load_off(const fs::path& path) {
  auto in = open_input(path);
  return parse_off(in, path.string());
}

PointCloud sample_mesh(const Mesh& mesh, std::size_t n, Rng& rng) {
  if (n == 0) throw ConfigError("sample count must be positive");
  const std::size_t nf = mesh.face_count();
  std::vector<double> cumulative(nf);
  double total = 0;
  for (std::size_t f = 0; f < nf; ++f) {
    const auto* fi = mesh.faces.data() + 3 * f;
    total += triangle_area(&mesh.vertices[3 * fi[0]], &mesh.vertices[3 * fi[1]], &mesh.vertices[3 * fi[2]]);
    cumulative[f] = total;
  }
  if (!(total > 0)) throw ParseError("mesh has no surface area to sample");
  PointCloud c;
  c.points.reserve(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = uniform01(rng) * total;
    auto f = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), r) - cumulative.begin());
    f = std::min(f, nf - 1);
    const auto* fi = mesh.faces.data() + 3 * f;
    const double* a = &mesh.vertices[3 * fi[0]];
    const double* b = &mesh.vertices[3 * fi[1]];
    const double* d = &mesh.vertices[3 * fi[2]];
    const double s = std::sqrt(uniform01(rng)), t = uniform01(rng);
    const double wa = 1 - s, wb = s * (1 - t), wc = s * t;
    for (int k = 0; k < 3; ++k) c.points.push_back(wa * a[k] + wb * b[k] + wc * d[k]);
  }
  return c;
}

PointCloud parse_xyz(std::istream& in, std::size_t channels, const std::string& source) {
  if (channels < 3) throw ConfigError("xyz input needs at least 3 channels");
  PointCloud c;
  c.channels = channels;
  c.source = source;
  int labelled = -1;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    auto toks = tokenize(line);
    if (toks.empty()) continue;
    // tolerate comma separated values
    if (toks.size() == 1 && toks[0].find(',') != std::string::npos) {
      std::replace(line.begin(), line.end(), ',', ' ');
      toks = tokenize(line);
    }
    const int has_label = toks.size() == channels + 1 ? 1 : toks.size() == channels ? 0 : -1;
    if (has_label < 0)
      parse_fail(source, no, "expected " + std::to_string(channels) + " values (+ optional label), got " +
                                 std::to_string(toks.size()));
    if (labelled >= 0 && labelled != has_label) parse_fail(source, no, "label column present on some lines only");
    labelled = has_label;
    for (std::size_t k = 0; k < channels; ++k) {
      double x;
      if (!parse_double(toks[k], x)) parse_fail(source, no, "bad value '" + toks[k] + "'");
      c.points.push_back(x);
    }
    if (has_label) {
      std::int64_t p;
      if (!parse_int(toks[channels], p)) parse_fail(source, no, "bad part label '" + toks[channels] + "'");
      c.part_labels.push_back(p);
    }
  }
  if (c.points.empty()) throw ParseError(source + ": no points");
  return c;
}

PointCloud load_xyz(const fs::path& path, std::size_t channels) {
  auto in = open_input(path);
  return parse_xyz(in, channels, path.string());
}

PointCloud load_mesh_and_sample(const fs::path& path, std::size_t n, Rng& rng, std::size_t channels,
                                std::vector<std::string>* warnings) {
  if (n == 0) throw ConfigError("sample count must be positive");
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (ext == ".off") {
    if (channels != 3) throw ConfigError("OFF meshes provide 3 channels, config asks for " + std::to_string(channels));
    PointCloud c = sample_mesh(load_off(path), n, rng);
    c.source = path.string();
    return c;
  }
  PointCloud full = load_xyz(path, channels);
  if (n <= full.size()) return subsample(full, n, rng);
  const std::string note = path.string() + ": " + std::to_string(full.size()) + " points < " + std::to_string(n) +
                           " requested, sampling with replacement";
  if (warnings)
    warnings->push_back(note);
  else
    std::cerr << "warning: " << note << '\n';
  PointCloud c;
  c.channels = channels;
  c.source = full.source;
  c.label = full.label;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = uniform_index(rng, full.size());
    c.points.insert(c.points.end(), full.point(j), full.point(j) + channels);
    if (!full.part_labels.empty()) c.part_labels.push_back(full.part_labels[j]);
  }
  return c;
}

PointCloud normalize_unit_sphere(PointCloud cloud) {
  const std::size_t n = cloud.size(), ch = cloud.channels;
  if (n == 0) return cloud;
  double centroid[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) centroid[k] += cloud.points[i * ch + k];
  for (double& x : centroid) x /= static_cast<double>(n);
  double radius = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double r2 = 0;
    for (int k = 0; k < 3; ++k) {
      double& x = cloud.points[i * ch + k];
      x -= centroid[k];
      r2 += x * x;
    }
    radius = std::max(radius, std::sqrt(r2));
  }
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) {
      double& x = cloud.points[i * ch + k];
      x = radius > 0 ? x / radius : 0.0;
    }
  return cloud;
}

PointCloud augment(PointCloud cloud, const AugmentParams& p, Rng& rng) {
  p.validate();
  const std::size_t n = cloud.size(), ch = cloud.channels;
  if (p.rotate) {
    const double angle = 2 * kPi * uniform01(rng);
    const double c = std::cos(angle), s = std::sin(angle);
    const std::size_t u = (p.gravity_axis + 1) % 3, w = (p.gravity_axis + 2) % 3;
    for (std::size_t i = 0; i < n; ++i) {
      double* q = cloud.point(i);
      const double a = q[u], b = q[w];
      q[u] = c * a - s * b;
      q[w] = s * a + c * b;
    }
  }
  const double scale = p.scale_min == p.scale_max ? p.scale_min : uniform(rng, p.scale_min, p.scale_max);
  if (scale != 1.0)
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k) cloud.points[i * ch + k] *= scale;
  if (p.jitter_sigma > 0)
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k)
        cloud.points[i * ch + k] += std::clamp(p.jitter_sigma * standard_normal(rng), -p.jitter_clip, p.jitter_clip);
  return cloud;
}

PointCloud subsample(const PointCloud& cloud, std::size_t m, Rng& rng) {
  const std::size_t n = cloud.size();
  if (m < 1 || m > n)
    throw ConfigError("subsample count " + std::to_string(m) + " outside [1, " + std::to_string(n) + "]");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
  PointCloud out;
  out.channels = cloud.channels;
  out.label = cloud.label;
  out.source = cloud.source;
  out.points.reserve(m * cloud.channels);
  for (std::size_t i = 0; i < m; ++i) {
    out.points.insert(out.points.end(), cloud.point(idx[i]), cloud.point(idx[i]) + cloud.channels);
    if (!cloud.part_labels.empty()) out.part_labels.push_back(cloud.part_labels[idx[i]]);
  }
  return out;
}

const std::vector<std::string>& synth_shape_names() {
  static const std::vector<std::string> names{"sphere", "cube", "cylinder", "torus", "cone"};
  return names;
}

PointCloud sample_shape(const std::string& shape, std::size_t n, Rng& rng) {
  if (n == 0) throw ConfigError("sample count must be positive");
  PointCloud c;
  c.points.reserve(3 * n);
  c.part_labels.reserve(n);
  sample_surface(shape, n, rng, c);
  c.source = shape;
  return c;
}

void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = {{"classes", s.classes},
       {"per_class", s.per_class},
       {"n_points", s.n_points},
       {"seed", s.seed},
       {"segmentation", s.segmentation}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "classes") value.get_to(s.classes);
      else if (key == "per_class") value.get_to(s.per_class);
      else if (key == "n_points") value.get_to(s.n_points);
      else if (key == "seed") value.get_to(s.seed);
      else if (key == "segmentation") value.get_to(s.segmentation);
      else throw ConfigError("synth." + key + ": unknown field");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("synth." + key + ": " + e.what());
    }
  }
}

Dataset synth_dataset(const SynthSpec& spec, const std::string& split) {
  if (spec.classes.size() < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  for (const auto& name : spec.classes)
    if (std::find(synth_shape_names().begin(), synth_shape_names().end(), name) == synth_shape_names().end())
      throw ConfigError("unknown synthetic class '" + name + "'");
  if (spec.n_points == 0) throw ConfigError("synth.n_points must be positive");
  Dataset d;
  d.split = split;
  d.class_names = spec.classes;
  if (spec.segmentation)
    for (std::size_t c = 0; c < spec.classes.size(); ++c) d.part_ranges.push_back({static_cast<std::int64_t>(2 * c), 2});
  const std::uint64_t split_tag = tag_of(split);
  for (std::size_t c = 0; c < spec.classes.size(); ++c)
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      Rng rng = make_rng(spec.seed, {split_tag, c, i});
      PointCloud cloud = sample_shape(spec.classes[c], spec.n_points, rng);
      double axis_scale[3];
      for (double& s : axis_scale) s = uniform(rng, 0.8, 1.2);
      const double angle = 2 * kPi * uniform01(rng);
      const double co = std::cos(angle), si = std::sin(angle);
      for (std::size_t p = 0; p < cloud.size(); ++p) {
        double* q = cloud.point(p);
        for (int k = 0; k < 3; ++k) q[k] *= axis_scale[k];
        const double x = q[0], z = q[2];
        q[0] = co * x + si * z;
        q[2] = -si * x + co * z;
      }
      cloud = normalize_unit_sphere(std::move(cloud));
      cloud.label = static_cast<std::int64_t>(c);
      if (spec.segmentation)
        for (auto& p : cloud.part_labels) p += static_cast<std::int64_t>(2 * c);
      else
        cloud.part_labels.clear();
      cloud.source = split + "/" + spec.classes[c] + "/" + std::to_string(i);
      d.items.push_back(std::move(cloud));
    }
  return d;
}

std::vector<ManifestEntry> read_manifest(const fs::path& manifest) {
  auto in = open_input(manifest);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(manifest.string() + ": " + e.what());
  }
  if (!j.is_array()) throw ParseError(manifest.string() + ": manifest must be a JSON list");
  std::vector<ManifestEntry> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    if (!e.is_object() || !e.contains("path") || !e.contains("class") || !e["path"].is_string() ||
        !e["class"].is_number_integer())
      throw ParseError(manifest.string() + ": entry " + std::to_string(i) + " needs string 'path' and integer 'class'");
    fs::path p = e["path"].get<std::string>();
    if (p.is_relative()) p = manifest.parent_path() / p;
    out.push_back({p, e["class"].get<std::int64_t>()});
  }
  return out;
}

std::vector<ManifestEntry> scan_class_tree(const fs::path& root, const std::string& split,
                                           std::vector<std::string>* class_names) {
  if (!fs::is_directory(root)) throw IoError("not a directory: " + root.string());
  std::vector<std::string> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path().filename().string());
  std::sort(classes.begin(), classes.end());
  std::vector<ManifestEntry> out;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const fs::path dir = root / classes[c] / split;
    if (!fs::is_directory(dir)) continue;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (auto& f : files) out.push_back({f, static_cast<std::int64_t>(c)});
  }
  if (class_names) *class_names = classes;
  return out;
}

Dataset load_dataset(const std::vector<ManifestEntry>& entries, std::vector<std::string> class_names,
                     const std::string& split, std::size_t n_points, std::uint64_t seed, std::size_t channels,
                     std::vector<PartRange> part_ranges) {
  Dataset d;
  d.split = split;
  d.class_names = std::move(class_names);
  d.part_ranges = std::move(part_ranges);
  const std::uint64_t split_tag = tag_of(split);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Rng rng = make_rng(seed, {split_tag, i});
    PointCloud c = normalize_unit_sphere(load_mesh_and_sample(entries[i].path, n_points, rng, channels));
    c.label = entries[i].label;
    d.items.push_back(std::move(c));
  }
  d.validate();
  return d;
}

template <typename T>
Tensor<T> stack_points(const Dataset& data, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ContractError("stack_points: empty batch");
  const auto& first = data.items.at(idx[0]);
  const std::size_t n = first.size(), ch = first.channels;
  Tensor<T> out({idx.size(), n, ch});
  T* dst = out.raw();
  for (auto i : idx) {
    const auto& c = data.items.at(i);
    if (c.size() != n || c.channels != ch)
      throw DimensionError("stack_points: item " + std::to_string(i) + " has " + std::to_string(c.size()) + "x" +
                           std::to_string(c.channels) + " points, batch expects " + std::to_string(n) + "x" +
                           std::to_string(ch));
    for (double x : c.points) *dst++ = static_cast<T>(x);
  }
  return out;
}

std::vector<std::int64_t> stack_labels(const Dataset& data, const std::vector<std::size_t>& idx) {
  std::vector<std::int64_t> out;
  for (auto i : idx) out.push_back(data.items.at(i).label);
  return out;
}

std::vector<std::int64_t> stack_part_labels(const Dataset& data, const std::vector<std::size_t>& idx) {
  std::vector<std::int64_t> out;
  for (auto i : idx) {
    const auto& c = data.items.at(i);
    if (c.part_labels.size() != c.size())
      throw DataError("item " + std::to_string(i) + " (" + c.source + ") has no per-point part labels");
    out.insert(out.end(), c.part_labels.begin(), c.part_labels.end());
  }
  return out;
}

template Tensor<float> stack_points<float>(const Dataset&, const std::vector<std::size_t>&);
template Tensor<double> stack_points<double>(const Dataset&, const std::vector<std::size_t>&);

}  // namespace sawnet
