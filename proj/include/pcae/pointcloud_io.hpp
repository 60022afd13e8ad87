#pragma once

// XYZ text and compact binary point cloud files.
//
// Text: one "x y z" triple per line; blank lines and lines starting with '#'
// are skipped. Binary: 4-byte magic "PCB1", uint64 point count, then N*3
// float32 values, all little-endian.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pcae/errors.hpp"
#include "pcae/geometry.hpp"

namespace pcae {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline constexpr std::array<char, 4> kCloudMagic{'P', 'C', 'B', '1'};

enum class CloudFormat { Xyz, Binary };

inline std::string cloud_extension(CloudFormat f) { return f == CloudFormat::Xyz ? ".xyz" : ".pcb"; }

namespace detail {

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::vector<double> parse_numbers(std::string_view line, const std::string& where) {
  std::vector<double> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == ',' || line[i] == '\r')) ++i;
    if (i >= line.size()) break;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != ',' && line[j] != '\r') ++j;
    std::string token(line.substr(i, j - i));
    char* end = nullptr;
    const double v = std::strtod(token.c_str(), &end);
    if (end != token.c_str() + token.size()) throw FormatError(where + ": cannot parse number '" + token + "'");
    if (!std::isfinite(v)) throw FormatError(where + ": non-finite value '" + token + "'");
    out.push_back(v);
    i = j;
  }
  return out;
}

}  // namespace detail

/// Writes "x y z [s ...]" lines; `scalars` (optional) appends one value per point.
inline void write_xyz(const std::filesystem::path& path, const PointCloud& cloud,
                      const std::vector<std::vector<double>>& scalars = {}) {
  for (const auto& s : scalars)
    if (s.size() != cloud.size()) throw DimensionError("write_xyz: scalar column length mismatch");
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud[i];
    out << detail::format_number(p[0]) << ' ' << detail::format_number(p[1]) << ' ' << detail::format_number(p[2]);
    for (const auto& s : scalars) out << ' ' << detail::format_number(s[i]);
    out << '\n';
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

inline PointCloud read_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<Point3> pts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#' || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto v = detail::parse_numbers(line, path.string() + ":" + std::to_string(lineno));
    if (v.size() < 3)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 3 coordinates");
    pts.push_back({v[0], v[1], v[2]});
  }
  return PointCloud(std::move(pts));
}

inline void write_binary(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(kCloudMagic.data(), kCloudMagic.size());
  const std::uint64_t n = cloud.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  for (const auto& p : cloud)
    for (double c : p) {
      const float f = static_cast<float>(c);
      out.write(reinterpret_cast<const char*>(&f), sizeof f);
    }
  if (!out) throw FormatError("write failed for " + path.string());
}

inline PointCloud read_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kCloudMagic) throw FormatError(path.string() + ": bad magic");
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in) throw FormatError(path.string() + ": truncated header");
  const auto expected = static_cast<std::uintmax_t>(12 + n * 3 * sizeof(float));
  if (std::filesystem::file_size(path) != expected)
    throw FormatError(path.string() + ": size does not match point count " + std::to_string(n));
  std::vector<float> raw(n * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (!in) throw FormatError(path.string() + ": truncated body");
  std::vector<Point3> pts(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const float f = raw[3 * i + c];
      if (!std::isfinite(f)) throw FormatError(path.string() + ": non-finite value at point " + std::to_string(i));
      pts[i][c] = f;
    }
  }
  return PointCloud(std::move(pts));
}

/// Detects the format from the leading magic bytes.
inline PointCloud read_cloud(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::array<char, 4> head{};
  in.read(head.data(), head.size());
  if (in.gcount() == 4 && head == kCloudMagic) return read_binary(path);
  return read_xyz(path);
}

inline void write_cloud(const std::filesystem::path& path, const PointCloud& cloud, CloudFormat format) {
  if (format == CloudFormat::Xyz)
    write_xyz(path, cloud);
  else
    write_binary(path, cloud);
}

}  // namespace pcae
