#pragma once

// Plain-text artifacts: CSV fields and curves, binary graymaps, JSON files.

#include "tensor.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <sstream>

namespace drkrnet {

using Json = nlohmann::ordered_json;

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Rank-2 tensor as CSV, one tensor row per line.
inline std::string field_csv(const Tensor &f) {
  if (f.rank() != 2)
    throw ShapeError("field CSV needs a rank-2 tensor, got " + shape_string(f.shape()));
  std::string out;
  for (std::size_t i = 0; i < f.rows(); ++i) {
    for (std::size_t j = 0; j < f.cols(); ++j)
      out += (j ? "," : "") + format_double(f.at(i, j));
    out += '\n';
  }
  return out;
}

inline std::vector<std::vector<double>> parse_csv_numbers(const std::string &text,
                                                          bool skip_header = false) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (std::exchange(first, false) && skip_header)
      continue;
    if (line.empty())
      continue;
    std::vector<double> row;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception &) {
        throw ValidationError("CSV: cannot parse '" + cell + "'");
      }
      if (used != cell.size())
        throw ValidationError("CSV: cannot parse '" + cell + "'");
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Tensor parse_field_csv(const std::string &text) {
  const auto rows = parse_csv_numbers(text);
  if (rows.empty() || rows.front().empty())
    throw ValidationError("field CSV is empty");
  const std::size_t W = rows.front().size();
  std::vector<double> v;
  for (const auto &r : rows) {
    if (r.size() != W)
      throw ValidationError("field CSV rows have unequal lengths");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor(Shape{rows.size(), W}, std::move(v));
}

inline std::string curve_csv(std::span<const double> curve) {
  std::string out = "epoch,loss\n";
  for (std::size_t e = 0; e < curve.size(); ++e)
    out += std::to_string(e) + "," + format_double(curve[e]) + "\n";
  return out;
}

/// Binary 8-bit graymap, min-max scaled; a constant field maps to mid-gray.
inline std::string field_pgm(const Tensor &f) {
  if (f.rank() != 2)
    throw ShapeError("graymap needs a rank-2 tensor");
  const auto d = f.data();
  const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
  std::string out = "P5\n" + std::to_string(f.cols()) + " " + std::to_string(f.rows()) + "\n255\n";
  for (double v : d) {
    const double t = *hi > *lo ? (v - *lo) / (*hi - *lo) : 0.5;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
  return out;
}

inline void write_text(const std::filesystem::path &p, const std::string &text) {
  write_bytes(p.string(), text);
}

inline void write_json(const std::filesystem::path &p, const Json &j) {
  write_text(p, j.dump(2) + "\n");
}

inline Json read_json(const std::filesystem::path &p) {
  try {
    return Json::parse(read_bytes(p.string()));
  } catch (const Json::parse_error &e) {
    throw ValidationError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

} // namespace drkrnet
