#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace storm {

using KeyValues = std::map<std::string, std::string>;

/// Shortest decimal text that reads back to the same double.
std::string format_double(double value);
std::optional<double> parse_double(std::string_view text);
std::optional<std::uint64_t> parse_u64(std::string_view text);
std::optional<bool> parse_bool(std::string_view text);
std::string_view trim(std::string_view text);
std::vector<std::string> split(std::string_view text, char delimiter);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

/// INI-style file: `[section]` headers and `key = value` lines, `#` comments.
class ConfigFile {
 public:
  static ConfigFile parse(std::string_view text, const std::string& origin = "<string>");
  static ConfigFile load(const std::string& path);

  /// Override from `section.key=value` text.
  void set_override(std::string_view assignment);
  void set(const std::string& section, const std::string& key, const std::string& value);
  bool has_section(const std::string& name) const { return sections_.count(name) != 0; }
  KeyValues section(const std::string& name) const;
  const std::map<std::string, KeyValues>& sections() const { return sections_; }

  /// Canonical text (sorted sections and keys); hashing uses this form.
  std::string serialize() const;
  std::uint64_t hash() const { return fnv1a64(serialize()); }

 private:
  std::map<std::string, KeyValues> sections_;
};

/// Typed access to one section that rejects keys nobody asked for.
class SectionReader {
 public:
  SectionReader(std::string section, KeyValues values);

  double get_double(const std::string& key, double fallback);
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
  std::size_t get_size(const std::string& key, std::size_t fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::string get_string(const std::string& key, const std::string& fallback);
  std::vector<std::size_t> get_size_list(const std::string& key, const std::vector<std::size_t>& fallback);
  std::vector<std::string> get_string_list(const std::string& key, const std::vector<std::string>& fallback);
  bool contains(const std::string& key) const { return values_.count(key) != 0; }

  /// Throws ConfigError naming the first key that was never read.
  void finish() const;

 private:
  const std::string* lookup(const std::string& key);
  std::string section_;
  KeyValues values_;
  std::set<std::string> used_;
};

}  // namespace storm
