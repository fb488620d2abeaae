#pragma once

// Minimal comma-separated tables: header row, no quoting. Fields must not
// contain commas or line breaks; writers reject such values.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "attnexit/error.hpp"

namespace attnexit::csv {

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      return out;
    }
    out.emplace_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string checked_field(std::string_view s) {
  if (s.find_first_of(",\n\r") != std::string_view::npos) {
    fail(ErrorKind::data, "table field '", s, "' contains a separator or line break");
  }
  return std::string(s);
}

// Shortest representation that round-trips exactly.
inline std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) return "nan";
  return std::string(buf, end);
}

inline double parse_double(const std::string& s, std::size_t row) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan" || s.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    fail(ErrorKind::data, "row ", row, ": '", s, "' is not a number");
  }
  return v;
}

template <typename Int>
Int parse_int(const std::string& s, std::size_t row) {
  Int v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    fail(ErrorKind::data, "row ", row, ": '", s, "' is not an integer");
  }
  return v;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    fail(ErrorKind::data, "table has no column '", name, "'");
  }
};

inline Table read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open ", path.string());
  Table t;
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::data, path.string(), ": empty table");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split(line);
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line);
    if (fields.size() != t.header.size()) {
      fail(ErrorKind::data, path.string(), " row ", row, ": expected ", t.header.size(),
           " fields, got ", fields.size());
    }
    t.rows.push_back(std::move(fields));
  }
  return t;
}

class Writer {
 public:
  Writer(const std::filesystem::path& path, const std::vector<std::string>& header)
      : out_(path, std::ios::trunc), path_(path) {
    if (!out_) fail(ErrorKind::io, "cannot open ", path.string(), " for writing");
    row(header);
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << checked_field(fields[i]);
    }
    out_ << '\n';
    if (!out_) fail(ErrorKind::io, "write failed for ", path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

}  // namespace attnexit::csv
