#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace rangecal {

/// Plain-text `key=value` records, one per line; '#' starts a comment.
/// Keys are kept sorted so writing is deterministic.
class KeyValues {
 public:
  static KeyValues read(const std::filesystem::path& path);
  static KeyValues parse(const std::string& text);
  void write(const std::filesystem::path& path) const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set(const std::string& key, double value);

  std::string get(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// Round-trippable decimal rendering of a double ("%.17g").
std::string format_double(double value);

}  // namespace rangecal
