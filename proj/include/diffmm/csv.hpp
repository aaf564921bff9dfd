#ifndef DIFFMM_CSV_HPP_
#define DIFFMM_CSV_HPP_

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace diffmm::csv {

/// Minimal reader for headered, comma separated, LF terminated files.
/// Fields never contain commas in the formats used here.
class Reader {
 public:
  /// Opens `path` and checks the header row matches `expected_header` exactly
  /// (a trailing CR is tolerated). Throws DataError otherwise.
  Reader(const std::filesystem::path& path, std::string_view expected_header);

  /// Next non-empty row split on ','; false at end of file.
  bool next(std::vector<std::string>& fields);

  /// 1-based line number of the last row returned by next().
  std::size_t line() const { return line_; }
  const std::filesystem::path& path() const { return path_; }

  /// "path:line: msg", for DataError messages.
  std::string where(std::string_view msg) const;

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::size_t line_ = 0;
};

std::vector<std::string> split(std::string_view s, char sep);

/// Strict numeric parsing; throws DataError naming `what` on failure.
long long parse_int(std::string_view s, std::string_view what);
double parse_double(std::string_view s, std::string_view what);

/// Shortest decimal representation that round-trips exactly.
std::string format_double(double v);

/// Opens a file for writing, throwing DataError when it cannot be created.
std::ofstream open_for_write(const std::filesystem::path& path);

}  // namespace diffmm::csv

#endif  // DIFFMM_CSV_HPP_
