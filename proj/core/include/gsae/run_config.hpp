#pragma once

// Plain-text key=value run configuration. Lines are `key=value`, `#` starts a
// comment, blank lines are ignored. Keys keep first-appearance order.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gsae {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::size_t line, const std::string& message);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class RunConfig {
 public:
  /// Throws ConfigError naming the first malformed line. A repeated key keeps
  /// its last value and emits a warning.
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);

  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

  void set(const std::string& key, const std::string& value);
  bool contains(std::string_view key) const;
  std::optional<std::string> get(std::string_view key) const;
  std::string get_or(std::string_view key, const std::string& fallback) const;
  /// Typed accessors; throw std::invalid_argument when the value does not parse.
  double get_double(std::string_view key, double fallback) const;
  std::int64_t get_int(std::string_view key, std::int64_t fallback) const;
  std::uint64_t get_uint(std::string_view key, std::uint64_t fallback) const;

  /// Copies every entry of `other` over this one.
  void merge(const RunConfig& other);

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  bool operator==(const RunConfig&) const = default;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Deterministic per-consumer seed derived from a master seed (splitmix64 of
/// the master seed mixed with a hash of `consumer`).
std::uint64_t derive_seed(std::uint64_t master, std::string_view consumer);

}  // namespace gsae
