#include "drgrade/csv.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>

#include "drgrade/errors.hpp"

namespace drgrade::csv {

namespace {

std::string where(const std::string& origin, std::size_t line_no) {
  return origin + ":" + std::to_string(line_no);
}

}  // namespace

std::size_t Table::column(std::string_view name, const std::string& origin) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw ValidationError(origin + ": missing column '" + std::string(name) + "'");
}

std::vector<std::string> split_line(std::string_view line, std::size_t line_no,
                                    const std::string& origin) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (quoted) throw ValidationError(where(origin, line_no) + ": unterminated quoted field");
  fields.push_back(std::move(cur));
  return fields;
}

Table read(std::istream& in, const std::string& origin) {
  Table table;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_line(line, line_no, origin);
    if (!have_header) {
      table.header = std::move(fields);
      have_header = true;
      continue;
    }
    if (fields.size() != table.header.size()) {
      throw ValidationError(where(origin, line_no) + ": expected " +
                            std::to_string(table.header.size()) + " fields, got " +
                            std::to_string(fields.size()));
    }
    table.rows.push_back({line_no, std::move(fields)});
  }
  if (!have_header) throw ValidationError(origin + ": empty file (no header row)");
  return table;
}

Table read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open " + path.string());
  return read(in, path.string());
}

std::string escape(std::string_view field) {
  if (field.find_first_of(",\"\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += '"';
    out += ch;
  }
  out += '"';
  return out;
}

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_real(const std::string& field, std::size_t line_no, const std::string& origin,
                  std::string_view column) {
  double v = 0.0;
  const char* end = field.data() + field.size();
  auto res = std::from_chars(field.data(), end, v);
  if (field.empty() || res.ec != std::errc() || res.ptr != end) {
    throw ValidationError(where(origin, line_no) + ": column '" + std::string(column) +
                          "' is not a number: '" + field + "'");
  }
  return v;
}

long long parse_int(const std::string& field, std::size_t line_no, const std::string& origin,
                    std::string_view column) {
  long long v = 0;
  const char* end = field.data() + field.size();
  auto res = std::from_chars(field.data(), end, v);
  if (field.empty() || res.ec != std::errc() || res.ptr != end) {
    throw ValidationError(where(origin, line_no) + ": column '" + std::string(column) +
                          "' is not an integer: '" + field + "'");
  }
  return v;
}

}  // namespace drgrade::csv
