#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace mmfusion::io {

/// Shortest decimal form that parses back to the same bits.
std::string format_double(double x);

/// Parses a whole field as a double; throws ValidationError naming `context`.
double parse_double(std::string_view field, std::string_view context);
long long parse_int(std::string_view field, std::string_view context);

std::string read_file(const std::filesystem::path& path);

/// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace mmfusion::io
