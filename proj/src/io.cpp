#include "sfiqa/io.hpp"

#include <fmt/format.h>

#include <bit>
#include <cstring>
#include <mutex>
#include <sstream>

#include "sfiqa/error.hpp"

namespace sfiqa::io {

namespace {

std::mutex g_access_mutex;
std::vector<std::filesystem::path> g_access_log;

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

}  // namespace

std::ifstream open_input(const std::filesystem::path& path, bool binary) {
  {
    std::lock_guard lock(g_access_mutex);
    g_access_log.push_back(path);
  }
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open '" + path.string() + "'");
  return in;
}

std::vector<std::filesystem::path> accessed_paths() {
  std::lock_guard lock(g_access_mutex);
  return g_access_log;
}

void reset_access_log() {
  std::lock_guard lock(g_access_mutex);
  g_access_log.clear();
}

std::string read_text(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write '" + path.string() + "'");
  out << contents;
  require(static_cast<bool>(out), ErrorKind::kIo, "write failed for '" + path.string() + "'");
}

std::vector<float> read_f32_blob(const std::filesystem::path& path) {
  auto in = open_input(path, true);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(bytes.size() % 4 == 0, ErrorKind::kData, "blob size is not a multiple of 4: '" + path.string() + "'");
  std::vector<float> values(bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t raw;
    std::memcpy(&raw, bytes.data() + 4 * i, 4);
    values[i] = std::bit_cast<float>(to_little(raw));
  }
  return values;
}

void write_f32_blob(const std::filesystem::path& path, const std::vector<float>& values) {
  std::string bytes(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t raw = to_little(std::bit_cast<std::uint32_t>(values[i]));
    std::memcpy(bytes.data() + 4 * i, &raw, 4);
  }
  write_text(path, bytes);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      require(line.back() == ']' && line.size() > 2, ErrorKind::kConfig,
              "line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2)) + ".";
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::kConfig, "line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    require(!key.empty(), ErrorKind::kConfig, "line " + std::to_string(lineno) + ": empty key");
    out[section + key] = trim(line.substr(eq + 1));
  }
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string format_number(double value) { return fmt::format("{}", value); }

}  // namespace sfiqa::io
