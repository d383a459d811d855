#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mimforge {

/// One line of space-separated key=value fields, in insertion order.
/// Values are percent-escaped on output so they never contain spaces or '='.
struct Record {
  std::vector<std::pair<std::string, std::string>> fields;

  Record& add(std::string key, std::string value);
  Record& add(std::string key, const char* value) { return add(std::move(key), std::string(value)); }
  /// Shortest round-trip decimal form.
  Record& add(std::string key, double value);
  Record& add(std::string key, std::int64_t value);
  Record& add(std::string key, int value) { return add(std::move(key), static_cast<std::int64_t>(value)); }

  std::optional<std::string> get(std::string_view key) const;
  /// Throws FormatError when missing or not a number.
  double number(std::string_view key) const;
};

std::string format_record(const Record& record);
/// Throws FormatError on a field without '=' or an empty key.
Record parse_record(std::string_view line);

/// Fixed-width text table of the given columns; missing values render as "-".
std::string render_table(const std::vector<Record>& rows, const std::vector<std::string>& columns);

/// Appends records to a file, one flushed line each.
class RecordWriter {
 public:
  RecordWriter() = default;
  /// Throws std::runtime_error when the file cannot be opened.
  explicit RecordWriter(const std::string& path, bool append = false);
  void write(const Record& record);
  bool is_open() const { return out_.is_open(); }

 private:
  std::ofstream out_;
};

std::vector<Record> read_records(const std::string& path);

}  // namespace mimforge
