// Artifact writers for the command-line harness: CSV tables that open with
// "# key: value" context lines, JSON reports, and the GXRM binary matrix.
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

namespace geox::io {

using json = nlohmann::ordered_json;

/// Shortest decimal form that reads back to the same double.
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Context carried into every artifact header.
using Context = std::vector<std::pair<std::string, std::string>>;

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const Context& ctx, const std::vector<std::string>& columns)
      : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    for (const auto& [k, v] : ctx) out_ << "# " << k << ": " << v << '\n';
    for (std::size_t i = 0; i < columns.size(); ++i) out_ << (i ? "," : "") << columns[i];
    out_ << '\n';
    width_ = columns.size();
  }

  /// One row; strings pass through, doubles use the round-trip format.
  template <class... T>
  void row(const T&... cells) {
    static_assert(sizeof...(T) > 0);
    if (sizeof...(T) != width_) throw std::logic_error("csv row width mismatch");
    std::size_t i = 0;
    ((out_ << (i++ ? "," : "") << cell(cells)), ...);
    out_ << '\n';
  }

 private:
  static std::string cell(double v) { return num(v); }
  static std::string cell(int v) { return std::to_string(v); }
  static std::string cell(long v) { return std::to_string(v); }
  static std::string cell(unsigned long v) { return std::to_string(v); }
  static std::string cell(unsigned long long v) { return std::to_string(v); }
  static std::string cell(bool v) { return v ? "1" : "0"; }
  static std::string cell(const std::string& v) { return v; }
  static std::string cell(const char* v) { return v; }

  std::ofstream out_;
  std::size_t width_ = 0;
};

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

/// GXRM layout, little-endian throughout:
///   char[4]  "GXRM"
///   uint32   version (1)
///   uint64   rows, cols
///   float64  weights[rows]
///   float64  entries[rows * cols], row-major
inline void write_gxrm(const std::filesystem::path& path, const Eigen::MatrixXd& a, const std::vector<double>& weights) {
  static_assert(std::endian::native == std::endian::little, "GXRM writer assumes a little-endian host");
  if (weights.size() != static_cast<std::size_t>(a.rows())) throw std::logic_error("gxrm: weight count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::uint32_t version = 1;
  const std::uint64_t rows = static_cast<std::uint64_t>(a.rows()), cols = static_cast<std::uint64_t>(a.cols());
  out.write("GXRM", 4);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
  out.write(reinterpret_cast<const char*>(&cols), sizeof cols);
  out.write(reinterpret_cast<const char*>(weights.data()), static_cast<std::streamsize>(rows * sizeof(double)));
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double v = a(i, j);
      out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
}

struct GxrmMatrix {
  Eigen::MatrixXd entries;
  std::vector<double> weights;
};

inline GxrmMatrix read_gxrm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t rows = 0, cols = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&rows), sizeof rows);
  in.read(reinterpret_cast<char*>(&cols), sizeof cols);
  if (!in || std::string(magic, 4) != "GXRM" || version != 1) throw std::runtime_error("not a GXRM v1 file");
  GxrmMatrix m;
  m.weights.resize(rows);
  in.read(reinterpret_cast<char*>(m.weights.data()), static_cast<std::streamsize>(rows * sizeof(double)));
  m.entries.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::uint64_t i = 0; i < rows; ++i)
    for (std::uint64_t j = 0; j < cols; ++j)
      in.read(reinterpret_cast<char*>(&m.entries(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))),
              sizeof(double));
  if (!in) throw std::runtime_error("truncated GXRM file");
  return m;
}

}  // namespace geox::io
