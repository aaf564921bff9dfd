#include "diffmm/csv.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>

#include "diffmm/errors.hpp"

namespace diffmm::csv {

namespace {

void strip_cr(std::string& s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
}

}  // namespace

Reader::Reader(const std::filesystem::path& path, std::string_view expected_header)
    : path_(path), in_(path) {
  if (!in_) {
    throw DataError("cannot open " + path.string());
  }
  std::string header;
  if (!std::getline(in_, header)) {
    throw DataError(path.string() + ": empty file, expected header '" +
                    std::string(expected_header) + "'");
  }
  line_ = 1;
  strip_cr(header);
  if (header != expected_header) {
    throw DataError(path.string() + ": bad header '" + header + "', expected '" +
                    std::string(expected_header) + "'");
  }
}

bool Reader::next(std::vector<std::string>& fields) {
  std::string row;
  while (std::getline(in_, row)) {
    ++line_;
    strip_cr(row);
    if (row.empty()) continue;
    fields = split(row, ',');
    return true;
  }
  return false;
}

std::string Reader::where(std::string_view msg) const {
  return path_.string() + ":" + std::to_string(line_) + ": " + std::string(msg);
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(s.substr(start));
      break;
    }
    out.emplace_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

long long parse_int(std::string_view s, std::string_view what) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw DataError("invalid integer for " + std::string(what) + ": '" + std::string(s) + "'");
  }
  return v;
}

double parse_double(std::string_view s, std::string_view what) {
  // from_chars for double is available in libstdc++ 11
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty() || !std::isfinite(v)) {
    throw DataError("invalid number for " + std::string(what) + ": '" + std::string(s) + "'");
  }
  return v;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  return out;
}

}  // namespace diffmm::csv
