// Copyright 2026 The posediff Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "posediff/errors.hpp"

namespace posediff {

/// Header plus rows; non-numeric cells are NaN and mark their column as text.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  std::vector<bool> numeric;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw UsageError("no column named '" + name + "'");
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline bool parse_number(const std::string& s, double& v) {
  if (s.empty()) return false;
  char* end = nullptr;
  v = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace detail

inline CsvTable parse_csv(const std::string& text, const std::string& source) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto cells = detail::split_csv_line(line);
    if (t.header.empty()) {
      t.header = cells;
      t.numeric.assign(cells.size(), true);
      continue;
    }
    if (cells.size() != t.header.size())
      throw FormatError(source + ": line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                        " fields, expected " + std::to_string(t.header.size()));
    std::vector<double> row(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (!detail::parse_number(cells[i], row[i])) {
        row[i] = std::numeric_limits<double>::quiet_NaN();
        t.numeric[i] = false;
      }
    }
    t.rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw FormatError(source + ": empty CSV");
  if (t.rows.empty()) throw FormatError(source + ": CSV has a header but no rows");
  return t;
}

namespace detail {

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double kW = 640, kH = 400, kL = 60, kR = 20, kT = 30, kB = 40;
  double sx(double x) const { return kL + (x1 > x0 ? (x - x0) / (x1 - x0) : 0.5) * (kW - kL - kR); }
  double sy(double y) const { return kH - kB - (y1 > y0 ? (y - y0) / (y1 - y0) : 0.5) * (kH - kT - kB); }
};

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return colors[i % 8];
}

inline void svg_open(std::ostringstream& os, const Frame& f, const std::string& title, const std::string& xlabel) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::kW << "\" height=\"" << Frame::kH
     << "\" viewBox=\"0 0 " << Frame::kW << ' ' << Frame::kH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << Frame::kW / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << Frame::kL << "\" y1=\"" << Frame::kH - Frame::kB << "\" x2=\"" << Frame::kW - Frame::kR << "\" y2=\""
     << Frame::kH - Frame::kB << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << Frame::kL << "\" y1=\"" << Frame::kT << "\" x2=\"" << Frame::kL << "\" y2=\"" << Frame::kH - Frame::kB
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << Frame::kL << "\" y=\"" << Frame::kH - 8 << "\" font-size=\"11\">" << fmt(f.x0) << "</text>\n";
  os << "<text x=\"" << Frame::kW - Frame::kR << "\" y=\"" << Frame::kH - 8 << "\" font-size=\"11\" text-anchor=\"end\">"
     << fmt(f.x1) << "</text>\n";
  os << "<text x=\"" << Frame::kW / 2 << "\" y=\"" << Frame::kH - 8 << "\" font-size=\"11\" text-anchor=\"middle\">" << xlabel
     << "</text>\n";
  os << "<text x=\"4\" y=\"" << Frame::kH - Frame::kB << "\" font-size=\"11\">" << fmt(f.y0) << "</text>\n";
  os << "<text x=\"4\" y=\"" << Frame::kT + 4 << "\" font-size=\"11\">" << fmt(f.y1) << "</text>\n";
}

}  // namespace detail

/// One polyline per y column against the x column.
inline std::string line_plot_svg(const CsvTable& t, std::size_t x_col, std::vector<std::size_t> y_cols,
                                 const std::string& title = "") {
  if (y_cols.empty()) {
    for (std::size_t i = 0; i < t.header.size(); ++i)
      if (i != x_col && t.numeric[i]) y_cols.push_back(i);
  }
  if (!t.numeric.at(x_col)) throw FormatError("x column '" + t.header[x_col] + "' is not numeric");
  if (y_cols.empty()) throw FormatError("no numeric columns to plot");
  detail::Frame f{1e300, -1e300, 1e300, -1e300};
  for (const auto& r : t.rows) {
    f.x0 = std::min(f.x0, r[x_col]);
    f.x1 = std::max(f.x1, r[x_col]);
    for (std::size_t c : y_cols) {
      if (!t.numeric.at(c)) throw FormatError("column '" + t.header[c] + "' is not numeric");
      if (!std::isfinite(r[c])) continue;
      f.y0 = std::min(f.y0, r[c]);
      f.y1 = std::max(f.y1, r[c]);
    }
  }
  if (f.y0 > f.y1) f.y0 = f.y1 = 0.0;
  std::ostringstream os;
  detail::svg_open(os, f, title, t.header[x_col]);
  for (std::size_t k = 0; k < y_cols.size(); ++k) {
    const std::size_t c = y_cols[k];
    os << "<polyline fill=\"none\" stroke=\"" << detail::palette(k) << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (const auto& r : t.rows) {
      if (!std::isfinite(r[c])) continue;
      os << (first ? "" : " ") << detail::fmt(f.sx(r[x_col])) << ',' << detail::fmt(f.sy(r[c]));
      first = false;
    }
    os << "\"/>\n";
    os << "<text x=\"" << detail::Frame::kW - detail::Frame::kR - 4 << "\" y=\"" << detail::Frame::kT + 14 * (k + 1)
       << "\" font-size=\"11\" text-anchor=\"end\" fill=\"" << detail::palette(k) << "\">" << t.header[c] << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Histogram of one numeric column.
inline std::string histogram_svg(const CsvTable& t, std::size_t col, int bins, const std::string& title = "") {
  if (bins < 1) throw UsageError("histogram needs at least one bin");
  if (!t.numeric.at(col)) throw FormatError("column '" + t.header[col] + "' is not numeric");
  std::vector<double> v;
  for (const auto& r : t.rows)
    if (std::isfinite(r[col])) v.push_back(r[col]);
  if (v.empty()) throw FormatError("column '" + t.header[col] + "' has no finite values");
  const double lo = *std::min_element(v.begin(), v.end());
  double hi = *std::max_element(v.begin(), v.end());
  if (hi <= lo) hi = lo + 1.0;
  std::vector<int> count(static_cast<std::size_t>(bins), 0);
  for (double x : v) {
    const int b = std::min(bins - 1, static_cast<int>((x - lo) / (hi - lo) * bins));
    ++count[static_cast<std::size_t>(b)];
  }
  const int top = *std::max_element(count.begin(), count.end());
  detail::Frame f{lo, hi, 0.0, static_cast<double>(top)};
  std::ostringstream os;
  detail::svg_open(os, f, title, t.header[col]);
  const double w = (hi - lo) / bins;
  for (int b = 0; b < bins; ++b) {
    const double x0 = f.sx(lo + b * w), x1 = f.sx(lo + (b + 1) * w);
    const double y = f.sy(count[static_cast<std::size_t>(b)]), y0 = f.sy(0.0);
    os << "<rect x=\"" << detail::fmt(x0) << "\" y=\"" << detail::fmt(y) << "\" width=\"" << detail::fmt(x1 - x0)
       << "\" height=\"" << detail::fmt(y0 - y) << "\" fill=\"#1f77b4\" stroke=\"white\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace posediff
