#include "kdlab/csv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace kdlab::csv {

std::size_t Table::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw FormatError("csv: no column named '" + std::string(name) + "'");
}

std::string format_number(double value) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc{}) throw FormatError("csv: cannot format number");
  return std::string(buf, end);
}

double parse_number(std::string_view text) {
  double value = 0.0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || end != text.data() + text.size()) {
    throw FormatError("csv: '" + std::string(text) + "' is not a number");
  }
  return value;
}

namespace {

void emit_field(std::string& out, const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) {
    out += field;
    return;
  }
  out += '"';
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
}

void emit_row(std::string& out, const std::vector<std::string>& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out += ',';
    emit_field(out, row[i]);
  }
  out += '\n';
}

}  // namespace

std::string emit(const Table& table) {
  std::string out;
  emit_row(out, table.header);
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) throw FormatError("csv: row width differs from header");
    emit_row(out, row);
  }
  return out;
}

Table parse(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    any = true;
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      records.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      field += c;
    }
  }
  if (quoted) throw FormatError("csv: unterminated quoted field");
  if (any) {
    row.push_back(std::move(field));
    records.push_back(std::move(row));
  }
  if (records.empty()) throw FormatError("csv: missing header");
  Table t;
  t.header = std::move(records.front());
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].size() != t.header.size()) {
      throw FormatError("csv: record " + std::to_string(i) + " has " + std::to_string(records[i].size()) +
                        " fields, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(records[i]));
  }
  return t;
}

void write_file(const std::filesystem::path& path, const Table& table) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << emit(table);
}

Table read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

Table variance_table_to_csv(const VarianceTable& table) {
  Table t{{"sample_id", "sigma_squared"}, {}};
  for (const auto& [id, var] : table) t.rows.push_back({std::to_string(id), format_number(var)});
  return t;
}

VarianceTable variance_table_from_csv(const Table& table) {
  VarianceTable out;
  auto add_row = [&](const std::vector<std::string>& row) {
    if (row.size() != 2) throw FormatError("variance table rows need two fields");
    SampleId id = 0;
    const auto& s = row[0];
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), id);
    if (ec != std::errc{} || end != s.data() + s.size()) throw FormatError("variance table: bad sample id '" + s + "'");
    const double var = parse_number(row[1]);
    if (!(var > 0.0)) throw FormatError("variance table: sigma^2 must be positive for id " + s);
    if (!out.emplace(id, var).second) throw FormatError("variance table: duplicate id " + s);
  };
  if (table.header != std::vector<std::string>{"sample_id", "sigma_squared"}) add_row(table.header);
  for (const auto& row : table.rows) add_row(row);
  return out;
}

void write_variance_table(const std::filesystem::path& path, const VarianceTable& table) {
  write_file(path, variance_table_to_csv(table));
}

VarianceTable read_variance_table(const std::filesystem::path& path) {
  return variance_table_from_csv(read_file(path));
}

}  // namespace kdlab::csv
