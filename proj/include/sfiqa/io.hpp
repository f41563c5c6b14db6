#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace sfiqa::io {

/// Opens a file for reading through the project's single read path so that
/// every input file touched by a run can be audited.
std::ifstream open_input(const std::filesystem::path& path, bool binary = false);

/// Paths opened through open_input since the last reset (process-wide).
std::vector<std::filesystem::path> accessed_paths();
void reset_access_log();

/// Reads a whole text file; throws an io error naming the path on failure.
std::string read_text(const std::filesystem::path& path);

/// Writes `contents` to `path`, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& contents);

/// Little-endian float32 blob helpers.
std::vector<float> read_f32_blob(const std::filesystem::path& path);
void write_f32_blob(const std::filesystem::path& path, const std::vector<float>& values);

/// Parses `key = value` lines; `#` and `;` start comments. Keys under a
/// `[section]` header are returned as `section.key`.
std::map<std::string, std::string> parse_key_values(const std::string& text);

std::vector<std::string> split_csv_line(const std::string& line);
std::string trim(const std::string& s);

/// Shortest text that reads back to the same double.
std::string format_number(double value);

}  // namespace sfiqa::io
