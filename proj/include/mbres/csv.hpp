#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

// CSV tables with a one-line header and '#'-prefixed metadata comments
// (units, truth parameters, seed, rng id). Numeric output uses %.17g so a
// write/read cycle is value-exact and byte-reproducible.

namespace mbres::io {

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows; // row-major, rows[i].size() == columns.size()
  std::vector<std::pair<std::string, std::string>> metadata;

  size_t column(const std::string& name) const {
    for (size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw std::invalid_argument("Table: no column named '" + name + "'");
  }
  bool has_column(const std::string& name) const {
    for (const auto& c : columns)
      if (c == name) return true;
    return false;
  }
  std::vector<double> col(const std::string& name) const {
    const size_t j = column(name);
    std::vector<double> v(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) v[i] = rows[i][j];
    return v;
  }
  void add_row(std::vector<double> r) {
    if (r.size() != columns.size())
      throw std::invalid_argument("Table: row width mismatch");
    rows.push_back(std::move(r));
  }
  const std::string* meta(const std::string& key) const {
    for (const auto& [k, v] : metadata)
      if (k == key) return &v;
    return nullptr;
  }
};

inline std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_csv(std::ostream& os, const Table& t) {
  for (const auto& [k, v] : t.metadata) os << "# " << k << " = " << v << "\n";
  for (size_t j = 0; j < t.columns.size(); ++j)
    os << t.columns[j] << (j + 1 < t.columns.size() ? "," : "");
  os << "\n";
  for (const auto& row : t.rows) {
    for (size_t j = 0; j < row.size(); ++j)
      os << format_value(row[j]) << (j + 1 < row.size() ? "," : "");
    os << "\n";
  }
}

inline void write_csv(const std::string& path, const Table& t) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  write_csv(f, t);
}

namespace detail {
inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}
} // namespace detail

inline Table read_csv(std::istream& is) {
  Table t;
  std::string line;
  bool have_header = false;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string s = detail::trim(line);
    if (s.empty()) continue;
    if (s[0] == '#') {
      const std::string body = detail::trim(s.substr(1));
      const size_t eq = body.find('=');
      if (eq != std::string::npos)
        t.metadata.emplace_back(detail::trim(body.substr(0, eq)),
                                detail::trim(body.substr(eq + 1)));
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(detail::trim(cell));
    if (!have_header) {
      t.columns = std::move(cells);
      have_header = true;
      continue;
    }
    if (cells.size() != t.columns.size())
      throw std::runtime_error("csv line " + std::to_string(lineno) +
                               ": expected " + std::to_string(t.columns.size()) +
                               " cells, got " + std::to_string(cells.size()));
    std::vector<double> row(cells.size());
    for (size_t j = 0; j < cells.size(); ++j) {
      try {
        size_t pos = 0;
        row[j] = std::stod(cells[j], &pos);
        if (pos != cells[j].size()) throw std::invalid_argument(cells[j]);
      } catch (const std::exception&) {
        throw std::runtime_error("csv line " + std::to_string(lineno) +
                                 ": cannot parse '" + cells[j] + "'");
      }
    }
    t.rows.push_back(std::move(row));
  }
  if (!have_header) throw std::runtime_error("csv: no header line found");
  return t;
}

inline Table read_csv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  return read_csv(f);
}

/// Sweep-table contract: strictly monotone first column, no NaN anywhere.
inline void validate_sweep(const Table& t) {
  if (t.columns.empty() || t.rows.size() < 1)
    throw std::runtime_error("sweep table: empty");
  for (const auto& row : t.rows)
    for (const double v : row)
      if (std::isnan(v)) throw std::runtime_error("sweep table: NaN entry");
  for (size_t i = 1; i < t.rows.size(); ++i)
    if (!(t.rows[i][0] > t.rows[i - 1][0]))
      throw std::runtime_error("sweep table: first column must be strictly increasing");
}

inline void expect_columns(const Table& t, const std::vector<std::string>& want) {
  if (t.columns != want) {
    std::string msg = "csv schema mismatch: expected '";
    for (size_t i = 0; i < want.size(); ++i)
      msg += want[i] + (i + 1 < want.size() ? "," : "");
    msg += "', got '";
    for (size_t i = 0; i < t.columns.size(); ++i)
      msg += t.columns[i] + (i + 1 < t.columns.size() ? "," : "");
    msg += "'";
    throw std::runtime_error(msg);
  }
}

} // namespace mbres::io
