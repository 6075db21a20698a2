#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "sgflab/errors.hpp"

namespace sgflab::csv {

inline constexpr std::string_view kSchema = "v1";

// Shortest round-trip representation; deterministic across runs.
inline std::string cell(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}
inline std::string cell(const std::string& s) { return s; }
inline std::string cell(const char* s) { return s; }
template <class T>
  requires std::is_integral_v<T>
inline std::string cell(T v) {
  return std::to_string(v);
}

class Writer {
 public:
  Writer(const std::filesystem::path& path, const std::vector<std::string>& columns)
      : path_(path), out_(path, std::ios::binary), ncols_(columns.size()) {
    if (!out_) throw Error("io", "cannot open " + path.string() + " for writing");
    out_ << "# schema=" << kSchema << '\n';
    row_strings(columns);
  }

  template <class... Ts>
  void row(const Ts&... vals) {
    row_strings({cell(vals)...});
  }

  void row_strings(const std::vector<std::string>& cells) {
    if (cells.size() != ncols_) throw ShapeMismatch("csv row width differs from header");
    for (std::size_t k = 0; k < cells.size(); ++k) {
      if (k) out_ << ',';
      out_ << cells[k];
    }
    out_ << '\n';
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t ncols_;
};

struct Table {
  std::string schema;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t k = 0; k < columns.size(); ++k)
      if (columns[k] == name) return k;
    throw InvalidInput("csv column not found: " + name);
  }
  double number(std::size_t r, const std::string& name) const {
    return std::stod(rows.at(r).at(column(name)));
  }
};

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline Table read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open " + path.string());
  Table t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("# schema=", 0) == 0) {
      t.schema = line.substr(9);
      continue;
    }
    if (!line.empty() && line[0] == '#') continue;
    if (line.empty()) continue;
    if (t.columns.empty()) {
      t.columns = split(line);
    } else {
      t.rows.push_back(split(line));
    }
  }
  return t;
}

}  // namespace sgflab::csv
