#pragma once

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sesim {

// Shortest round-trippable decimal rendering via %.10g: the same value always
// prints the same bytes, which the determinism contract relies on.
inline std::string csv_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string csv_number(long v) { return std::to_string(v); }
inline std::string csv_number(int v) { return std::to_string(v); }

// Minimal writer: comma-joined cells, '\n' line ends, no quoting (callers
// only emit numbers and plain identifiers).
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("csv: cannot open '" + path + "' for writing");
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

}  // namespace sesim
