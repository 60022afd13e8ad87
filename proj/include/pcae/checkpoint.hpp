#pragma once

// Self-describing model container, little-endian:
//
//   char[8]  "PCAECKPT"
//   u32      format version
//   str      variant name            (str = u32 byte length + bytes)
//   str      model config (key=value lines)
//   u32      array count
//   per array:
//     str    name
//     u8     element type (1 = float64, 2 = float32)
//     u32    rank, then u64 dims[rank]
//     bytes  values
//
// Arrays cover every trainable tensor and every batch-norm running statistic.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pcae/errors.hpp"
#include "pcae/models.hpp"

namespace pcae {

inline constexpr std::array<char, 8> kCheckpointMagic{'P', 'C', 'A', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class StoragePrecision : std::uint8_t { Float64 = 1, Float32 = 2 };

class CheckpointError : public FormatError {
 public:
  using FormatError::FormatError;
};

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> data) : data_(std::move(data)) {}

  template <typename T>
  T pod(const std::string& what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(const std::string& what) {
    const auto n = pod<std::uint32_t>(what);
    need(n, what);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  const char* take(std::size_t n, const std::string& what) {
    need(n, what);
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n, const std::string& what) const {
    if (data_.size() - pos_ < n) throw CheckpointError("checkpoint truncated while reading " + what);
  }
  std::vector<char> data_;
  std::size_t pos_ = 0;
};

struct StoredArray {
  Shape shape;
  std::vector<double> values;
};

}  // namespace detail

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

/// Names of every array a checkpoint of `model` contains, in file order.
inline std::vector<std::string> checkpoint_array_names(PointCloudAutoencoder& model) {
  std::vector<std::string> names;
  for (auto& p : model.named_parameters()) names.push_back(p.name);
  for (auto& b : model.named_buffers()) names.push_back(b.name);
  return names;
}

/// Writes to a temporary sibling and renames it into place.
inline void save_checkpoint(PointCloudAutoencoder& model, const std::filesystem::path& path,
                            StoragePrecision precision = StoragePrecision::Float64) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.pod(kCheckpointVersion);
  w.str(std::string(variant_name(model.variant())));
  w.str(serialize(model.config()));
  auto params = model.named_parameters();
  auto buffers = model.named_buffers();
  w.pod(static_cast<std::uint32_t>(params.size() + buffers.size()));
  auto write_array = [&](const std::string& name, const Shape& shape, std::span<const double> values) {
    w.str(name);
    w.pod(static_cast<std::uint8_t>(precision));
    w.pod(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) w.pod(static_cast<std::uint64_t>(d));
    for (double v : values) {
      if (precision == StoragePrecision::Float64)
        w.pod(v);
      else
        w.pod(static_cast<float>(v));
    }
  };
  for (auto& p : params) write_array(p.name, p.tensor.shape(), p.tensor.values());
  for (auto& b : buffers) write_array(b.name, Shape{b.values->size()}, *b.values);

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Reads and validates the whole file before building the model, so a failure
/// never yields a partially loaded model.
inline PointCloudAutoencoder load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::ByteReader r(std::move(data));

  std::array<char, 8> magic{};
  std::memcpy(magic.data(), r.take(8, "magic"), 8);
  if (magic != kCheckpointMagic) throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  Variant variant;
  ModelConfig config;
  try {
    variant = parse_variant(r.str("variant"));
    config = parse_model_config(r.str("config"));
  } catch (const std::logic_error& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }

  std::map<std::string, detail::StoredArray> arrays;
  const auto count = r.pod<std::uint32_t>("array count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str("array name");
    const auto dtype = r.pod<std::uint8_t>("element type of " + name);
    if (dtype != 1 && dtype != 2) throw CheckpointError("array " + name + ": unknown element type");
    const auto rank = r.pod<std::uint32_t>("rank of " + name);
    if (rank == 0 || rank > 8) throw CheckpointError("array " + name + ": bad rank");
    detail::StoredArray a;
    for (std::uint32_t d = 0; d < rank; ++d) a.shape.push_back(r.pod<std::uint64_t>("shape of " + name));
    const std::size_t n = shape_numel(a.shape);
    const std::size_t elem = dtype == 1 ? sizeof(double) : sizeof(float);
    if (n > (std::size_t{1} << 40) / elem) throw CheckpointError("array " + name + ": implausible size");
    const char* p = r.take(n * elem, "values of " + name);
    a.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      if (dtype == 1) {
        std::memcpy(&a.values[k], p + k * elem, elem);
      } else {
        float f;
        std::memcpy(&f, p + k * elem, elem);
        a.values[k] = f;
      }
    }
    if (!arrays.emplace(name, std::move(a)).second) throw CheckpointError("array " + name + " appears twice");
  }
  if (!r.at_end()) throw CheckpointError("trailing bytes after last array");

  PointCloudAutoencoder model(variant, config, 0);
  std::set<std::string> expected;
  for (auto& p : model.named_parameters()) {
    expected.insert(p.name);
    auto it = arrays.find(p.name);
    if (it == arrays.end()) throw CheckpointError("checkpoint is missing array " + p.name);
    if (it->second.shape != p.tensor.shape())
      throw CheckpointError("array " + p.name + ": shape " + shape_string(it->second.shape) + ", model expects " +
                            shape_string(p.tensor.shape()));
    std::copy(it->second.values.begin(), it->second.values.end(), p.tensor.mutable_values().begin());
  }
  for (auto& b : model.named_buffers()) {
    expected.insert(b.name);
    auto it = arrays.find(b.name);
    if (it == arrays.end()) throw CheckpointError("checkpoint is missing array " + b.name);
    if (it->second.shape != Shape{b.values->size()})
      throw CheckpointError("array " + b.name + ": shape " + shape_string(it->second.shape) + " does not match");
    *b.values = it->second.values;
  }
  for (const auto& [name, _] : arrays)
    if (!expected.count(name)) throw CheckpointError("checkpoint has unexpected array " + name);
  model.set_mode(Mode::Eval);
  return model;
}

}  // namespace pcae
