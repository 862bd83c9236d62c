#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "kdlab/weighting.hpp"

namespace kdlab::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  bool operator==(const Table&) const = default;
  /// Column index by header name, or FormatError.
  std::size_t column(std::string_view name) const;
};

/// Shortest representation that parses back to the same double.
std::string format_number(double value);
double parse_number(std::string_view text);

/// RFC 4180 style: fields holding commas, quotes or newlines are quoted.
std::string emit(const Table& table);
Table parse(std::string_view text);

void write_file(const std::filesystem::path& path, const Table& table);
Table read_file(const std::filesystem::path& path);

/// `sample_id,sigma_squared` rows.
Table variance_table_to_csv(const VarianceTable& table);
/// Accepts the file with or without its header line.
VarianceTable variance_table_from_csv(const Table& table);
void write_variance_table(const std::filesystem::path& path, const VarianceTable& table);
VarianceTable read_variance_table(const std::filesystem::path& path);

}  // namespace kdlab::csv
