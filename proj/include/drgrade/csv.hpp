#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace drgrade::csv {

struct Row {
  std::size_t line = 0;  // 1-based line number in the source
  std::vector<std::string> fields;
};

struct Table {
  std::vector<std::string> header;
  std::vector<Row> rows;

  /// Column index by name; throws ValidationError naming the source if absent.
  std::size_t column(std::string_view name, const std::string& origin) const;
};

/// Splits one line on commas; double-quoted fields may contain commas and
/// doubled quotes. Throws ValidationError on an unterminated quote.
std::vector<std::string> split_line(std::string_view line, std::size_t line_no,
                                    const std::string& origin);

/// Reads header + rows, skipping blank lines. Every row must have as many
/// fields as the header.
Table read(std::istream& in, const std::string& origin);
Table read_file(const std::filesystem::path& path);

/// Quotes a field only when it contains a comma, quote or newline.
std::string escape(std::string_view field);

/// Shortest round-trip decimal form of a double.
std::string format_real(double v);

double parse_real(const std::string& field, std::size_t line_no, const std::string& origin,
                  std::string_view column);
long long parse_int(const std::string& field, std::size_t line_no, const std::string& origin,
                    std::string_view column);

}  // namespace drgrade::csv
