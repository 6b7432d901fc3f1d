#pragma once

// Minimal delimited-text reading/writing. The on-disk formats in this
// project are plain comma-separated values without quoting; fields may not
// contain the delimiter or newlines.

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace kdlab::csv {

inline std::vector<std::string> split(std::string_view line, char delim = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == delim) {
      out.emplace_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline std::string strip(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n' || s.back() == ' ' || s.back() == '\t'))
    s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
  return s.substr(i);
}

struct Row {
  std::size_t line_number = 0;  // 1-based, header included
  std::vector<std::string> fields;
};

// Reads all non-empty rows. If `expect_header` the first non-empty line is
// returned separately through `header`.
inline std::vector<Row> read_rows(const std::string& path, std::vector<std::string>* header,
                                  char delim = ',') {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::vector<Row> rows;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = (header == nullptr);
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = strip(line);
    if (stripped.empty()) continue;
    if (!header_seen) {
      *header = split(stripped, delim);
      header_seen = true;
      continue;
    }
    rows.push_back(Row{line_no, split(stripped, delim)});
  }
  return rows;
}

class Writer {
 public:
  explicit Writer(const std::string& path, char delim = ',') : out_(path), delim_(delim) {
    if (!out_) throw std::runtime_error("cannot open file for writing: " + path);
  }

  template <typename... Fields>
  void row(const Fields&... fields) {
    bool first = true;
    ((write_field(fields, first), first = false), ...);
    out_ << '\n';
  }

  void raw_line(const std::string& line) { out_ << line << '\n'; }

  void flush() { out_.flush(); }

 private:
  template <typename T>
  void write_field(const T& value, bool first) {
    if (!first) out_ << delim_;
    if constexpr (std::is_convertible_v<T, std::string_view>) {
      const std::string_view sv{value};
      if (sv.find(delim_) != std::string_view::npos || sv.find('\n') != std::string_view::npos)
        throw std::runtime_error("field contains delimiter or newline");
      out_ << sv;
    } else {
      out_ << value;
    }
  }

  std::ofstream out_;
  char delim_;
};

inline long long parse_int(const std::string& s, std::size_t line_no, const char* what) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != s.size() || s.empty()) {
    std::ostringstream msg;
    msg << "row " << line_no << ": cannot parse " << what << " from '" << s << "'";
    throw std::runtime_error(msg.str());
  }
  return v;
}

inline double parse_real(const std::string& s, std::size_t line_no, const char* what) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != s.size() || s.empty()) {
    std::ostringstream msg;
    msg << "row " << line_no << ": cannot parse " << what << " from '" << s << "'";
    throw std::runtime_error(msg.str());
  }
  return v;
}

}  // namespace kdlab::csv
