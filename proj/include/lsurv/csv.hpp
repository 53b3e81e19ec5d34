// Minimal comma-separated helpers. Numeric parsing goes through
// std::from_chars, so it never depends on the process locale.
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace lsurv::csv {

std::vector<std::string_view> split(std::string_view line, char sep = ',');
std::string_view trim(std::string_view s);

std::optional<double> parse_double(std::string_view s);
std::optional<long long> parse_int(std::string_view s);

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

// Reads a whole file into lines, stripping a trailing '\r'. Throws
// std::runtime_error when the file cannot be opened.
std::vector<std::string> read_lines(const std::string& path);

}  // namespace lsurv::csv
