#pragma once

// Flat key=value run configuration shared by every CLI subcommand.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pcae/errors.hpp"
#include "pcae/models.hpp"
#include "pcae/synthdata.hpp"
#include "pcae/training.hpp"

namespace pcae {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

/// Every recognised key with its default. Defaults mirror the library structs.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    const synth::ShapeParams sp;
    const synth::SplitSpec ss;
    const synth::DatasetOptions dopt;
    const TrainConfig tc;
    auto num = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    auto cnt = [](std::size_t v) { return std::to_string(v); };
    auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
    return std::vector<ConfigKey>{
        {"seed", "0", "master seed; every random stream is derived from it"},
        {"threads", "1", "worker threads for data generation and evaluation"},
        // model
        {"preset", "desk", "model size: full, desk or reduced"},
        {"variant", std::string(variant_name(tc.variant)), "ae, sigma-ae, vae or sigma-vae"},
        // synthetic shapes
        {"num_points", cnt(ModelConfig::desk().num_points), "points per generated cloud"},
        {"body_a", num(sp.body_a), "body semi-axis along x"},
        {"body_b", num(sp.body_b), "body semi-axis along y (anterior)"},
        {"body_c", num(sp.body_c), "body semi-axis along z (height)"},
        {"process_count", std::to_string(sp.process_count), "posterior processes"},
        {"process_length", num(sp.process_length), "process length"},
        {"process_radius", num(sp.process_radius), "process radius"},
        {"process_spread_deg", num(sp.process_spread_deg), "angular spread of the processes"},
        {"body_sigma", num(sp.body_sigma), "relative population jitter of the body"},
        {"process_sigma", num(sp.process_sigma), "relative population jitter of the processes"},
        {"severity_min", num(dopt.severity_min), "lowest fracture severity"},
        {"severity_max", num(dopt.severity_max), "highest fracture severity"},
        {"train_healthy", cnt(ss.train_healthy), "healthy clouds in train"},
        {"train_fractured", cnt(ss.train_fractured), "fractured clouds in train (must be 0)"},
        {"val_healthy", cnt(ss.val_healthy), "healthy clouds in val"},
        {"val_fractured", cnt(ss.val_fractured), "fractured clouds in val"},
        {"test_healthy", cnt(ss.test_healthy), "healthy clouds in test"},
        {"test_fractured", cnt(ss.test_fractured), "fractured clouds in test"},
        {"format", "xyz", "cloud file format: xyz or binary"},
        // training
        {"learning_rate", num(tc.learning_rate), "Adam step size"},
        {"lr_schedule", std::string(lr_schedule_name(tc.lr_schedule)), "constant or cosine decay over the epoch budget"},
        {"batch_size", cnt(tc.batch_size), "clouds per batch (>= 2)"},
        {"epochs", cnt(tc.epochs), "epoch budget"},
        {"beta_max", num(tc.beta_max), "final KL weight"},
        {"anneal_fraction", num(tc.anneal_fraction), "fraction of epochs over which beta ramps up"},
        {"augment", flag(tc.augment), "online rotation + jitter augmentation"},
        {"jitter_sigma", num(tc.augmentation.jitter_sigma), "augmentation jitter"},
        {"max_angle_deg", num(tc.augmentation.max_angle_deg), "augmentation rotation bound"},
        {"weighted_matching", flag(tc.weighted_matching), "variance-weighted correspondences"},
        {"recalibrate_bn", flag(tc.recalibrate_bn), "recompute batch-norm statistics on the training set after training"},
        {"patience", cnt(tc.patience), "early-stop patience in epochs (0 disables)"},
        {"min_delta", num(tc.min_delta), "early-stop improvement threshold"},
        {"smoothing", cnt(tc.smoothing), "early-stop smoothing window"},
    };
  }();
  return keys;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
  }

  static bool known(const std::string& key) {
    for (const auto& k : config_keys())
      if (k.name == key) return true;
    return false;
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// Parses "key=value".
  void set_assignment(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + kv + "'");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  /// Merges a key=value file; blank lines and '#' comments are skipped.
  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      const auto t = trim(line.substr(0, line.find('#')));
      if (t.empty()) continue;
      try {
        set_assignment(t);
      } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ":" + std::to_string(no) + ": " + e.what());
      }
    }
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out << "# resolved run configuration\n";
    for (const auto& [k, v] : values_) out << k << '=' << v << '\n';
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    const auto& s = str(key);
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError(key + ": '" + s + "' is not a number");
    return v;
  }

  std::uint64_t integer(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw ConfigError(key + ": '" + s + "' is not a non-negative integer");
    return v;
  }

  std::size_t count(const std::string& key) const { return static_cast<std::size_t>(integer(key)); }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + ": '" + s + "' is not a boolean");
  }

  std::uint64_t seed() const { return integer("seed"); }
  std::size_t threads() const { return std::max<std::size_t>(1, count("threads")); }

  synth::ShapeParams shape() const {
    synth::ShapeParams p;
    p.body_a = real("body_a");
    p.body_b = real("body_b");
    p.body_c = real("body_c");
    p.process_count = static_cast<int>(count("process_count"));
    p.process_length = real("process_length");
    p.process_radius = real("process_radius");
    p.process_spread_deg = real("process_spread_deg");
    p.body_sigma = real("body_sigma");
    p.process_sigma = real("process_sigma");
    p.num_points = count("num_points");
    p.validate();
    return p;
  }

  synth::SplitSpec split() const {
    synth::SplitSpec s;
    s.train_healthy = count("train_healthy");
    s.train_fractured = count("train_fractured");
    s.val_healthy = count("val_healthy");
    s.val_fractured = count("val_fractured");
    s.test_healthy = count("test_healthy");
    s.test_fractured = count("test_fractured");
    return s;
  }

  synth::DatasetOptions dataset() const {
    synth::DatasetOptions o;
    o.shape = shape();
    o.severity_min = real("severity_min");
    o.severity_max = real("severity_max");
    o.master_seed = seed();
    o.threads = threads();
    return o;
  }

  CloudFormat format() const {
    const auto& f = str("format");
    if (f == "xyz") return CloudFormat::Xyz;
    if (f == "binary") return CloudFormat::Binary;
    throw ConfigError("format: expected xyz or binary, got '" + f + "'");
  }

  ModelConfig model() const { return ModelConfig::preset(str("preset")); }

  TrainConfig train() const {
    TrainConfig c;
    c.variant = parse_variant(str("variant"));
    c.learning_rate = real("learning_rate");
    c.lr_schedule = parse_lr_schedule(str("lr_schedule"));
    c.batch_size = count("batch_size");
    c.epochs = count("epochs");
    c.beta_max = real("beta_max");
    c.anneal_fraction = real("anneal_fraction");
    c.seed = seed();
    c.augment = flag("augment");
    c.augmentation.jitter_sigma = real("jitter_sigma");
    c.augmentation.max_angle_deg = real("max_angle_deg");
    c.weighted_matching = flag("weighted_matching");
    c.recalibrate_bn = flag("recalibrate_bn");
    c.patience = count("patience");
    c.min_delta = real("min_delta");
    c.smoothing = count("smoothing");
    c.validate();
    return c;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace pcae
