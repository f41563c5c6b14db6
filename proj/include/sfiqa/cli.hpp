#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "sfiqa/error.hpp"

namespace sfiqa::cli {

/// Process exit code for a library error: 2 config, 3 data/IO, 4 numeric/fit.
int exit_code(ErrorKind kind);

/// Flat configuration: `section.key` -> value, after --set overrides.
class Settings {
 public:
  Settings() = default;
  explicit Settings(std::map<std::string, std::string> values) : values_(std::move(values)) {}

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string text(const std::string& key, const std::string& fallback) const;
  std::string text(const std::string& key) const;  // required
  double number(const std::string& key, double fallback) const;
  int integer(const std::string& key, int fallback) const;
  bool flag(const std::string& key, bool fallback) const;
  std::vector<std::string> list(const std::string& key) const;  // comma separated, empty if absent
  std::vector<double> numbers(const std::string& key, const std::vector<double>& fallback) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// Entry point shared by the executable and the tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sfiqa::cli
