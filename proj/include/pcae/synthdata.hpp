#pragma once

// Synthetic vertebra-like clouds: an ellipsoidal body with cylindrical
// posterior processes. Fractures are modelled as an anterior wedge collapse of
// the body. Axes: x lateral, y anterior (+) / posterior (-), z cranial height.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pcae/errors.hpp"
#include "pcae/geometry.hpp"
#include "pcae/parallel.hpp"
#include "pcae/pointcloud_io.hpp"
#include "pcae/random.hpp"

namespace pcae::synth {

enum class Part : std::uint8_t { Body, Process };

enum class Label : std::uint8_t { Healthy, Fractured };

inline std::string label_name(Label l) { return l == Label::Healthy ? "healthy" : "fractured"; }

inline Label parse_label(std::string_view s) {
  if (s == "healthy") return Label::Healthy;
  if (s == "fractured") return Label::Fractured;
  throw FormatError("unknown label '" + std::string(s) + "'");
}

struct ShapeParams {
  double body_a = 1.0;   ///< lateral semi-axis
  double body_b = 0.8;   ///< antero-posterior semi-axis
  double body_c = 0.8;   ///< half height
  int process_count = 3;
  double process_length = 0.6;
  double process_radius = 0.12;
  double process_spread_deg = 60.0;  ///< outermost process angle from the posterior axis
  double body_sigma = 0.01;          ///< relative population variation of the body
  double process_sigma = 0.05;       ///< relative population variation of the processes
  double severity = 0.0;             ///< fracture severity in [0, 1]; 0 = healthy
  std::size_t num_points = 2048;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(body_a > 0 && body_b > 0 && body_c > 0)) throw ConfigError("body semi-axes must be positive");
    if (process_count < 0 || process_count > 16) throw ConfigError("process_count must be in [0, 16]");
    if (process_count > 0 && !(process_length > 0 && process_radius > 0))
      throw ConfigError("process length and radius must be positive");
    if (!(body_sigma >= 0 && process_sigma >= 0)) throw ConfigError("population sigmas must be non-negative");
    if (!(severity >= 0.0 && severity <= 1.0)) throw ConfigError("severity must lie in [0, 1]");
    if (num_points < 4) throw ConfigError("num_points must be at least 4");
  }
};

struct Cylinder {
  Point3 base{};
  Point3 axis{};  // unit
  double length = 0.0;
  double radius = 0.0;
};

/// One drawn member of the shape population (jitter applied, no deformation).
struct VertebraShape {
  double a = 0, b = 0, c = 0;
  std::vector<Cylinder> processes;
};

struct LabeledCloud {
  PointCloud cloud;
  std::vector<Part> parts;  ///< part of the surface each point was sampled from
};

namespace detail {

inline double ellipsoid_area(double a, double b, double c) {
  // Knud Thomsen's approximation, relative error below 1.1%.
  constexpr double p = 1.6075;
  const double ap = std::pow(a, p), bp = std::pow(b, p), cp = std::pow(c, p);
  return 4.0 * std::numbers::pi * std::pow((ap * bp + ap * cp + bp * cp) / 3.0, 1.0 / p);
}

inline double cylinder_area(const Cylinder& cyl) {
  return 2.0 * std::numbers::pi * cyl.radius * cyl.length + std::numbers::pi * cyl.radius * cyl.radius;
}

inline Point3 normalized(Point3 v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

inline Point3 cross(const Point3& u, const Point3& v) {
  return {u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
}

/// Splits `total` proportionally to `weights` (largest remainder, ties to the lowest index).
inline std::vector<std::size_t> allocate(const std::vector<double>& weights, std::size_t total) {
  double sum = 0.0;
  for (double w : weights) sum += w;
  std::vector<std::size_t> counts(weights.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / sum;
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    used += counts[i];
    rema.push_back({exact - std::floor(exact), i});
  }
  std::stable_sort(rema.begin(), rema.end(), [](auto& l, auto& r) { return l.first > r.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++counts[rema[k % rema.size()].second];
  return counts;
}

}  // namespace detail

/// Draws the jittered population member for `params.seed`.
inline VertebraShape draw_shape(const ShapeParams& params) {
  params.validate();
  Rng rng = make_rng(params.seed, "shape");
  std::normal_distribution<double> normal(0.0, 1.0);
  auto factor = [&](double sigma) { return std::max(0.3, 1.0 + sigma * normal(rng)); };
  VertebraShape s;
  s.a = params.body_a * factor(params.body_sigma);
  s.b = params.body_b * factor(params.body_sigma);
  s.c = params.body_c * factor(params.body_sigma);
  const double spread = params.process_spread_deg * std::numbers::pi / 180.0;
  for (int k = 0; k < params.process_count; ++k) {
    const double base_angle =
        params.process_count == 1 ? 0.0 : -spread + 2.0 * spread * k / (params.process_count - 1);
    const double angle = base_angle + params.process_sigma * 0.5 * normal(rng);
    const double tilt = params.process_sigma * 0.5 * normal(rng);
    Cylinder cyl;
    cyl.axis = detail::normalized({std::sin(angle), -std::cos(angle), tilt});
    // Anchor just inside the body surface along the axis direction.
    const double t = 1.0 / std::sqrt(std::pow(cyl.axis[0] / s.a, 2) + std::pow(cyl.axis[1] / s.b, 2) +
                                     std::pow(cyl.axis[2] / s.c, 2));
    for (int c = 0; c < 3; ++c) cyl.base[c] = 0.9 * t * cyl.axis[c];
    cyl.length = params.process_length * factor(params.process_sigma);
    cyl.radius = params.process_radius * factor(0.5 * params.process_sigma);
    s.processes.push_back(cyl);
  }
  return s;
}

/// Area-weighted uniform surface sample of `shape` (body ellipsoid, process
/// lateral surfaces and tip caps). Deterministic in `seed`.
inline LabeledCloud sample_surface(const VertebraShape& shape, std::size_t num_points, std::uint64_t seed) {
  Rng rng = make_rng(seed, "surface");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> areas{detail::ellipsoid_area(shape.a, shape.b, shape.c)};
  for (const auto& p : shape.processes) areas.push_back(detail::cylinder_area(p));
  const auto counts = detail::allocate(areas, num_points);

  LabeledCloud out;
  std::vector<Point3> pts;
  pts.reserve(num_points);
  // Ellipsoid: map a uniform sphere direction and accept with probability
  // proportional to the local area stretch.
  const double bc = shape.b * shape.c, ac = shape.a * shape.c, ab = shape.a * shape.b;
  const double mu_max = std::max({bc, ac, ab});
  while (pts.size() < counts[0]) {
    Point3 u = detail::normalized({normal(rng), normal(rng), normal(rng)});
    const double mu = std::sqrt(std::pow(bc * u[0], 2) + std::pow(ac * u[1], 2) + std::pow(ab * u[2], 2));
    if (unit(rng) * mu_max <= mu) pts.push_back({shape.a * u[0], shape.b * u[1], shape.c * u[2]});
  }
  out.parts.assign(pts.size(), Part::Body);
  for (std::size_t k = 0; k < shape.processes.size(); ++k) {
    const auto& cyl = shape.processes[k];
    const Point3 helper = std::abs(cyl.axis[2]) < 0.9 ? Point3{0, 0, 1} : Point3{1, 0, 0};
    const Point3 e1 = detail::normalized(detail::cross(cyl.axis, helper));
    const Point3 e2 = detail::cross(cyl.axis, e1);
    const double lateral = 2.0 * std::numbers::pi * cyl.radius * cyl.length;
    const double p_lateral = lateral / detail::cylinder_area(cyl);
    for (std::size_t i = 0; i < counts[k + 1]; ++i) {
      const double phi = 2.0 * std::numbers::pi * unit(rng);
      double t, r;
      if (unit(rng) < p_lateral) {
        t = cyl.length * unit(rng);
        r = cyl.radius;
      } else {
        t = cyl.length;
        r = cyl.radius * std::sqrt(unit(rng));
      }
      Point3 p;
      for (int c = 0; c < 3; ++c)
        p[c] = cyl.base[c] + t * cyl.axis[c] + r * (std::cos(phi) * e1[c] + std::sin(phi) * e2[c]);
      pts.push_back(p);
      out.parts.push_back(Part::Process);
    }
  }
  out.cloud = PointCloud(std::move(pts));
  return out;
}

/// Anterior wedge: body heights scaled by 1 - severity * w(y), w ramping from
/// 0 at the mid-coronal plane to 1 at the anterior tip. Process points are untouched.
inline LabeledCloud apply_wedge_fracture(const LabeledCloud& in, const VertebraShape& shape, double severity) {
  if (!(severity >= 0.0 && severity <= 1.0)) throw ConfigError("severity must lie in [0, 1]");
  std::vector<Point3> pts(in.cloud.points().begin(), in.cloud.points().end());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (in.parts[i] != Part::Body) continue;
    const double w = std::clamp(pts[i][1] / shape.b, 0.0, 1.0);
    pts[i][2] *= 1.0 - severity * w;
  }
  return {PointCloud(std::move(pts)), in.parts};
}

inline LabeledCloud make_vertebra_labeled(const ShapeParams& params) {
  const VertebraShape shape = draw_shape(params);
  LabeledCloud cloud = sample_surface(shape, params.num_points, params.seed);
  if (params.severity > 0.0) cloud = apply_wedge_fracture(cloud, shape, params.severity);
  return cloud;
}

inline PointCloud make_vertebra(const ShapeParams& params) { return make_vertebra_labeled(params).cloud; }

// ---------------------------------------------------------------------------
// Datasets

struct Sample {
  std::string id;
  std::string split;
  Label label = Label::Healthy;
  std::uint64_t seed = 0;
  double severity = 0.0;
  PointCloud cloud;          ///< normalised
  std::vector<Part> parts;   ///< empty when loaded from disk
};

using LabeledSet = std::vector<Sample>;

struct SplitSpec {
  std::size_t train_healthy = 200;
  std::size_t train_fractured = 0;
  std::size_t val_healthy = 50;
  std::size_t val_fractured = 55;
  std::size_t test_healthy = 100;
  std::size_t test_fractured = 100;
};

struct DatasetOptions {
  ShapeParams shape;  ///< template; seed and severity are set per sample
  double severity_min = 0.3;
  double severity_max = 0.7;
  std::uint64_t master_seed = 0;
  std::size_t threads = 1;  ///< generation only; output does not depend on it
};

struct Dataset {
  LabeledSet train;
  LabeledSet val;
  LabeledSet test;

  LabeledSet& split(std::string_view name) {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw UsageError("unknown split '" + std::string(name) + "'");
  }
};

inline std::vector<PointCloud> clouds_of(const LabeledSet& set) {
  std::vector<PointCloud> out;
  out.reserve(set.size());
  for (const auto& s : set) out.push_back(s.cloud);
  return out;
}

/// Generates normalised healthy (severity 0) and fractured clouds. Each split
/// and label draws seeds from its own sub-stream of the master seed.
inline Dataset make_dataset(const SplitSpec& spec, const DatasetOptions& options) {
  if (spec.train_fractured > 0)
    throw UsageError("the training split must contain healthy clouds only");
  if (!(options.severity_min >= 0.0 && options.severity_min <= options.severity_max && options.severity_max <= 1.0))
    throw ConfigError("severity range must satisfy 0 <= min <= max <= 1");
  options.shape.validate();
  Dataset ds;
  auto fill = [&](LabeledSet& set, const std::string& split, Label label, std::size_t count) {
    const std::uint64_t split_tag = derive_seed(options.master_seed, "data/" + split + "/" + label_name(label));
    Rng sev_rng = make_rng(split_tag, "severity");
    std::uniform_real_distribution<double> sev(options.severity_min, options.severity_max);
    for (std::size_t i = 0; i < count; ++i) {
      Sample s;
      char buf[64];
      std::snprintf(buf, sizeof buf, "%s_%c%04zu", split.c_str(), label == Label::Healthy ? 'h' : 'f', i);
      s.id = buf;
      s.split = split;
      s.label = label;
      s.seed = derive_seed(split_tag, "sample", {i});
      s.severity = label == Label::Healthy ? 0.0 : sev(sev_rng);
      set.push_back(std::move(s));
    }
  };
  fill(ds.train, "train", Label::Healthy, spec.train_healthy);
  fill(ds.val, "val", Label::Healthy, spec.val_healthy);
  fill(ds.val, "val", Label::Fractured, spec.val_fractured);
  fill(ds.test, "test", Label::Healthy, spec.test_healthy);
  fill(ds.test, "test", Label::Fractured, spec.test_fractured);

  std::vector<Sample*> all;
  for (auto* set : {&ds.train, &ds.val, &ds.test})
    for (auto& s : *set) all.push_back(&s);
  parallel_for(all.size(), options.threads, [&](std::size_t i) {
    ShapeParams p = options.shape;
    p.seed = all[i]->seed;
    p.severity = all[i]->severity;
    auto lc = make_vertebra_labeled(p);
    all[i]->cloud = normalize(lc.cloud).cloud;
    all[i]->parts = std::move(lc.parts);
  });
  return ds;
}

inline constexpr const char* kManifestName = "manifest.csv";
inline constexpr const char* kManifestHeader = "id,split,label,seed,severity";

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds, CloudFormat format = CloudFormat::Xyz) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir / kManifestName);
  if (!manifest) throw FormatError("cannot write manifest in " + dir.string());
  manifest << kManifestHeader << '\n';
  for (const LabeledSet* set : {&ds.train, &ds.val, &ds.test}) {
    for (const auto& s : *set) {
      const fs::path sub = dir / s.split / label_name(s.label);
      fs::create_directories(sub);
      write_cloud(sub / (s.id + cloud_extension(format)), s.cloud, format);
      char sev[40];
      std::snprintf(sev, sizeof sev, "%.17g", s.severity);
      manifest << s.id << ',' << s.split << ',' << label_name(s.label) << ',' << s.seed << ',' << sev << '\n';
    }
  }
  if (!manifest) throw FormatError("manifest write failed in " + dir.string());
}

/// Reads a directory written by save_dataset. Every manifest row must have a
/// cloud file and every cloud file must appear in the manifest.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(dir / kManifestName);
  if (!manifest) throw FormatError("missing manifest " + (dir / kManifestName).string());
  std::string line;
  if (!std::getline(manifest, line) || line != kManifestHeader)
    throw FormatError("manifest header must be '" + std::string(kManifestHeader) + "'");
  Dataset ds;
  std::set<fs::path> listed;
  std::size_t lineno = 1;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw FormatError("manifest line " + std::to_string(lineno) + ": expected 5 fields");
    Sample s;
    s.id = f[0];
    s.split = f[1];
    s.label = parse_label(f[2]);
    try {
      s.seed = std::stoull(f[3]);
      s.severity = std::stod(f[4]);
    } catch (const std::exception&) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": bad seed or severity");
    }
    const fs::path sub = dir / s.split / label_name(s.label);
    fs::path file;
    for (auto fmt : {CloudFormat::Xyz, CloudFormat::Binary})
      if (fs::exists(sub / (s.id + cloud_extension(fmt)))) file = sub / (s.id + cloud_extension(fmt));
    if (file.empty()) throw FormatError("cloud file for id " + s.id + " listed in manifest is missing");
    listed.insert(fs::weakly_canonical(file));
    s.cloud = read_cloud(file);
    if (s.split == "train" && s.label != Label::Healthy)
      throw FormatError("manifest puts fractured id " + s.id + " in the training split");
    ds.split(s.split).push_back(std::move(s));
  }
  for (const char* split : {"train", "val", "test"}) {
    if (!fs::exists(dir / split)) continue;
    for (const auto& entry : fs::recursive_directory_iterator(dir / split)) {
      if (!entry.is_regular_file()) continue;
      if (!listed.count(fs::weakly_canonical(entry.path())))
        throw FormatError("cloud file " + entry.path().stem().string() + " is not listed in the manifest");
    }
  }
  return ds;
}

}  // namespace pcae::synth
