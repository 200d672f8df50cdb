#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>

#include "dtr/cli.hpp"
#include "dtr/error.hpp"

namespace dtr::cli {

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t c = 0; c < header.size(); ++c)
    if (header[c] == name) return c;
  throw SpecError("column '" + name + "' not found");
}

CsvTable parse_csv(std::istream& in) {
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false, field_started = false;
  std::size_t line = 1, record_line = 1;

  const auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  const auto end_record = [&] {
    end_field();
    // A blank line is not a record.
    if (!(record.size() == 1 && record[0].empty())) records.push_back(std::move(record));
    record.clear();
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        if (ch == '\n') ++line;
        field += ch;
      }
      continue;
    }
    switch (ch) {
      case '"':
        if (field_started) throw DataError("line " + std::to_string(line) + ": stray quote inside unquoted field");
        quoted = field_started = true;
        break;
      case ',': end_field(); break;
      case '\r':
        if (i + 1 < text.size() && text[i + 1] == '\n') break;
        field += ch;
        break;
      case '\n':
        end_record();
        record_line = ++line;
        break;
      default:
        field += ch;
        field_started = true;
    }
  }
  if (quoted) throw DataError("line " + std::to_string(record_line) + ": unterminated quoted field");
  if (field_started || !field.empty() || !record.empty()) end_record();

  if (records.empty()) throw DataError("CSV input is empty");
  CsvTable table;
  table.header = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != table.header.size())
      throw DataError("row " + std::to_string(r) + ": expected " + std::to_string(table.header.size()) +
                      " fields, found " + std::to_string(records[r].size()));
    table.rows.push_back(std::move(records[r]));
  }
  return table;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SpecError("cannot open '" + path.string() + "'");
  return parse_csv(in);
}

std::string csv_field(const std::string& value) {
  if (value.find_first_of(",\"\r\n") == std::string::npos) return value;
  std::string out = "\"";
  for (char ch : value) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + '"';
}

void write_csv_row(std::ostream& out, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out << ',';
    out << csv_field(fields[i]);
  }
  out << '\n';
}

std::string format_double(double value) {
  if (std::isnan(value)) return "NaN";
  char buffer[64];
  const auto [end, ec] = std::to_chars(buffer, buffer + sizeof buffer, value);
  return std::string(buffer, end);
}

void write_dataset_csv(const Dataset& data, std::ostream& out) {
  const auto proxy = proxy_field(data.proxy_kind());
  std::vector<std::string> header{"id"};
  for (int j = 1; j <= data.stages(); ++j) {
    const auto s = std::to_string(j);
    for (const auto& name : data.covariate_names()) header.push_back(name + "_" + s);
    header.push_back("proxy_" + s);
    if (data.treatment(TreatmentField::Actual, j).size() > 0) header.push_back("actual_" + s);
    header.push_back("valid_" + s);
  }
  header.push_back("Y");
  write_csv_row(out, header);

  const auto cell = [](const Eigen::VectorXd& column, std::size_t i) {
    const double v = column(static_cast<Eigen::Index>(i));
    return std::isnan(v) ? std::string{} : format_double(v);
  };
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::vector<std::string> row{data.id(i)};
    for (int j = 1; j <= data.stages(); ++j) {
      for (const auto& name : data.covariate_names()) row.push_back(cell(data.covariate(name, j), i));
      row.push_back(cell(data.treatment(proxy, j), i));
      const auto& actual = data.treatment(TreatmentField::Actual, j);
      if (actual.size() > 0) row.push_back(cell(actual, i));
      row.push_back(data.validated(i, j) ? "1" : "0");
    }
    row.push_back(format_double(data.outcome()(static_cast<Eigen::Index>(i))));
    write_csv_row(out, row);
  }
}

}  // namespace dtr::cli
