#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace teamprod::cli {

/// Flat `key = value` configuration. Values are bare words, numbers, booleans,
/// double-quoted strings or one-level arrays `[a, b]`; `#` starts a comment.
/// Table headers and repeated keys are ConfigErrors.
class Config {
 public:
  static Config parse(const std::string& text);
  static Config load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string str(const std::string& key, const std::string& fallback) const;
  long integer(const std::string& key, long fallback) const;
  double number(const std::string& key, double fallback) const;
  bool boolean(const std::string& key, bool fallback) const;
  std::vector<long> integers(const std::string& key, const std::vector<long>& fallback) const;

  /// Throws ConfigError naming the first key outside `known`.
  void check_keys(const std::vector<std::string>& known) const;

  /// Canonical `key=value` lines in key order.
  std::string canonical() const;
  std::uint64_t hash() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Splits a 64-bit task stream off the run seed (splitmix64).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t task);

/// Runs the command line. Exit codes: 0 success, 2 usage/config/input errors,
/// 3 estimation failures, 1 anything else.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace teamprod::cli
