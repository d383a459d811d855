#include "mimforge/records.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>
#include <stdexcept>

#include "mimforge/errors.hpp"

namespace mimforge {

namespace {

bool needs_escape(char c) { return c == ' ' || c == '=' || c == '%' || c == '\n' || c == '\t' || c == '\r'; }

std::string escape(std::string_view s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (char c : s) {
    if (needs_escape(c)) {
      out += '%';
      out += hex[(static_cast<unsigned char>(c) >> 4) & 0xF];
      out += hex[static_cast<unsigned char>(c) & 0xF];
    } else {
      out += c;
    }
  }
  return out;
}

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  return -1;
}

std::string unescape(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '%' && i + 2 < s.size() && hex_value(s[i + 1]) >= 0 && hex_value(s[i + 2]) >= 0) {
      out += static_cast<char>(hex_value(s[i + 1]) * 16 + hex_value(s[i + 2]));
      i += 2;
    } else {
      out += s[i];
    }
  }
  return out;
}

}  // namespace

Record& Record::add(std::string key, std::string value) {
  if (key.empty() || std::any_of(key.begin(), key.end(), needs_escape))
    throw ArgumentError("record key '" + key + "' is empty or contains a separator");
  fields.emplace_back(std::move(key), std::move(value));
  return *this;
}

Record& Record::add(std::string key, double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, value);
  return add(std::move(key), std::string(buf, res.ptr));
}

Record& Record::add(std::string key, std::int64_t value) { return add(std::move(key), std::to_string(value)); }

std::optional<std::string> Record::get(std::string_view key) const {
  for (const auto& [k, v] : fields)
    if (k == key) return v;
  return std::nullopt;
}

double Record::number(std::string_view key) const {
  const auto v = get(key);
  if (!v) throw FormatError("record has no field '" + std::string(key) + "'");
  double out = 0.0;
  auto res = std::from_chars(v->data(), v->data() + v->size(), out);
  if (res.ec != std::errc() || res.ptr != v->data() + v->size())
    throw FormatError("record field '" + std::string(key) + "' is not a number: " + *v);
  return out;
}

std::string format_record(const Record& record) {
  std::string out;
  for (const auto& [k, v] : record.fields) {
    if (!out.empty()) out += ' ';
    out += k;
    out += '=';
    out += escape(v);
  }
  return out;
}

Record parse_record(std::string_view line) {
  Record r;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r' || line[i] == '\n')) ++i;
    if (i >= line.size()) break;
    auto j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r' && line[j] != '\n') ++j;
    const auto field = line.substr(i, j - i);
    const auto eq = field.find('=');
    if (eq == std::string_view::npos || eq == 0) throw FormatError("malformed record field '" + std::string(field) + "'");
    r.fields.emplace_back(std::string(field.substr(0, eq)), unescape(field.substr(eq + 1)));
    i = j;
  }
  return r;
}

std::string render_table(const std::vector<Record>& rows, const std::vector<std::string>& columns) {
  std::vector<std::size_t> widths;
  for (const auto& c : columns) widths.push_back(c.size());
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    auto& line = cells.emplace_back();
    for (std::size_t c = 0; c < columns.size(); ++c) {
      line.push_back(r.get(columns[c]).value_or("-"));
      widths[c] = std::max(widths[c], line.back().size());
    }
  }
  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& line) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      out << line[c];
      if (c + 1 < line.size()) out << std::string(widths[c] - line[c].size() + 2, ' ');
    }
    out << '\n';
  };
  emit(columns);
  std::vector<std::string> rule;
  for (auto w : widths) rule.emplace_back(w, '-');
  emit(rule);
  for (const auto& line : cells) emit(line);
  return out.str();
}

RecordWriter::RecordWriter(const std::string& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot open " + path + " for writing");
}

void RecordWriter::write(const Record& record) {
  out_ << format_record(record) << '\n';
  out_.flush();
}

std::vector<Record> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Record> out;
  std::string line;
  while (std::getline(in, line))
    if (line.find_first_not_of(" \t\r") != std::string::npos) out.push_back(parse_record(line));
  return out;
}

}  // namespace mimforge
