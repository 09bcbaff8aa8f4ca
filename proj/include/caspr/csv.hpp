// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "caspr/error.hpp"

namespace caspr {

/// A parsed CSV file: header plus data rows, all fields as raw strings.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw SchemaMismatch("column '" + std::string(name) + "' not found in CSV header");
  }
};

/// RFC-4180 parser: comma separated, double-quote quoting with "" escapes,
/// CRLF or LF record terminators. Quoted fields may span lines.
inline std::vector<std::vector<std::string>> parse_csv_records(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t i = 0;
  // skip UTF-8 BOM
  if (text.substr(0, 3) == "\xEF\xBB\xBF") i = 3;

  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(record));
    record.clear();
  };

  for (; i < text.size(); ++i) {
    char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (field_started && !field.empty())
          throw ParseError("stray quote inside unquoted field (record " + std::to_string(records.size()) + ")");
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
        end_record();
        break;
      case '\n':
        end_record();
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (in_quotes) throw ParseError("unterminated quoted field at end of input");
  if (field_started || !record.empty()) end_record();
  return records;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a sibling temp file then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

inline CsvTable parse_csv(std::string_view text) {
  auto records = parse_csv_records(text);
  if (records.empty()) throw ParseError("CSV input has no header row");
  CsvTable table;
  table.header = std::move(records.front());
  table.rows.reserve(records.size() - 1);
  for (std::size_t r = 1; r < records.size(); ++r) {
    // tolerate a trailing blank line
    if (records[r].size() == 1 && records[r][0].empty()) continue;
    table.rows.push_back(std::move(records[r]));
  }
  return table;
}

/// Shortest round-trip decimal representation.
template <typename T>
std::string format_real(T value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

inline CsvTable read_csv(const std::filesystem::path& path) { return parse_csv(read_text_file(path)); }

inline std::string csv_escape(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline void append_csv_row(std::string& out, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out.push_back(',');
    out += csv_escape(fields[i]);
  }
  out.push_back('\n');
}

inline std::string format_csv(const CsvTable& table) {
  std::string out;
  append_csv_row(out, table.header);
  for (const auto& row : table.rows) append_csv_row(out, row);
  return out;
}

}  // namespace caspr
