#include "gsae/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>

#include "gsae/binary_io.hpp"
#include "gsae/log.hpp"

namespace gsae {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool valid_key(std::string_view key) {
  return !key.empty() && std::all_of(key.begin(), key.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

}  // namespace

ConfigError::ConfigError(std::size_t line, const std::string& message)
    : std::runtime_error("config line " + std::to_string(line) + ": " + message), line_(line) {}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig cfg;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(line_no, "expected key=value, got '" + std::string(line) + "'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (!valid_key(key)) {
      throw ConfigError(line_no, "invalid key '" + std::string(key) + "'");
    }
    if (cfg.contains(key)) {
      warn("config line " + std::to_string(line_no) + ": duplicate key '" + std::string(key) +
           "', last value wins");
    }
    cfg.set(std::string(key), std::string(value));
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  return parse(io::read_file(path));
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
  return out;
}

void RunConfig::save(const std::filesystem::path& path) const {
  io::write_file_atomic(path, serialize());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

bool RunConfig::contains(std::string_view key) const { return get(key).has_value(); }

std::optional<std::string> RunConfig::get(std::string_view key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

std::string RunConfig::get_or(std::string_view key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

double RunConfig::get_double(std::string_view key, double fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  char* end = nullptr;
  const double d = std::strtod(v->c_str(), &end);
  if (v->empty() || end != v->c_str() + v->size()) {
    throw std::invalid_argument("config key '" + std::string(key) + "': not a number: " + *v);
  }
  return d;
}

std::int64_t RunConfig::get_int(std::string_view key, std::int64_t fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  std::int64_t out = 0;
  const auto res = std::from_chars(v->data(), v->data() + v->size(), out);
  if (res.ec != std::errc() || res.ptr != v->data() + v->size()) {
    throw std::invalid_argument("config key '" + std::string(key) + "': not an integer: " + *v);
  }
  return out;
}

std::uint64_t RunConfig::get_uint(std::string_view key, std::uint64_t fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  std::uint64_t out = 0;
  const auto res = std::from_chars(v->data(), v->data() + v->size(), out);
  if (res.ec != std::errc() || res.ptr != v->data() + v->size()) {
    throw std::invalid_argument("config key '" + std::string(key) +
                                "': not an unsigned integer: " + *v);
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view consumer) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : consumer) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::uint64_t z = master ^ h;
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void RunConfig::merge(const RunConfig& other) {
  for (const auto& [k, v] : other.entries_) set(k, v);
}

}  // namespace gsae
