#include "storm/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "storm/errors.hpp"

namespace storm {

std::string format_double(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc()) throw FormatError("cannot format number");
  return std::string(buf, end);
}

std::optional<double> parse_double(std::string_view text) {
  text = trim(text);
  if (text.empty()) return std::nullopt;
  if (text.front() == '+') text.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
  return v;
}

std::optional<std::uint64_t> parse_u64(std::string_view text) {
  text = trim(text);
  if (text.empty()) return std::nullopt;
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
  return v;
}

std::optional<bool> parse_bool(std::string_view text) {
  text = trim(text);
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  return std::nullopt;
}

std::string_view trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return text.substr(first, last - first + 1);
}

std::vector<std::string> split(std::string_view text, char delimiter) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(delimiter, start);
    parts.emplace_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

ConfigFile ConfigFile::parse(std::string_view text, const std::string& origin) {
  ConfigFile cfg;
  std::string current;
  std::size_t line_no = 0;
  for (const std::string& raw : split(text, '\n')) {
    ++line_no;
    std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#' || line.front() == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw FormatError(origin + ":" + std::to_string(line_no) + ": unterminated section header");
      current = std::string(trim(line.substr(1, line.size() - 2)));
      if (current.empty()) throw FormatError(origin + ":" + std::to_string(line_no) + ": empty section name");
      cfg.sections_[current];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw FormatError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    if (current.empty()) throw FormatError(origin + ":" + std::to_string(line_no) + ": key outside of a section");
    std::string key(trim(line.substr(0, eq)));
    std::string_view value = line.substr(eq + 1);
    if (const auto hash = value.find(" #"); hash != std::string_view::npos) value = value.substr(0, hash);
    if (key.empty()) throw FormatError(origin + ":" + std::to_string(line_no) + ": empty key");
    cfg.sections_[current][key] = std::string(trim(value));
  }
  return cfg;
}

ConfigFile ConfigFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

void ConfigFile::set_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq) {
    throw ConfigError("override must look like section.key=value: " + std::string(assignment));
  }
  set(std::string(trim(assignment.substr(0, dot))), std::string(trim(assignment.substr(dot + 1, eq - dot - 1))),
      std::string(trim(assignment.substr(eq + 1))));
}

void ConfigFile::set(const std::string& section, const std::string& key, const std::string& value) {
  sections_[section][key] = value;
}

KeyValues ConfigFile::section(const std::string& name) const {
  auto it = sections_.find(name);
  return it == sections_.end() ? KeyValues{} : it->second;
}

std::string ConfigFile::serialize() const {
  std::string out;
  for (const auto& [name, values] : sections_) {
    out += "[" + name + "]\n";
    for (const auto& [k, v] : values) out += k + " = " + v + "\n";
  }
  return out;
}

SectionReader::SectionReader(std::string section, KeyValues values)
    : section_(std::move(section)), values_(std::move(values)) {}

const std::string* SectionReader::lookup(const std::string& key) {
  auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  used_.insert(key);
  return &it->second;
}

double SectionReader::get_double(const std::string& key, double fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  auto parsed = parse_double(*v);
  if (!parsed) throw ConfigError(section_ + "." + key + ": expected a number, got '" + *v + "'");
  return *parsed;
}

std::uint64_t SectionReader::get_u64(const std::string& key, std::uint64_t fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  auto parsed = parse_u64(*v);
  if (!parsed) throw ConfigError(section_ + "." + key + ": expected a non-negative integer, got '" + *v + "'");
  return *parsed;
}

std::size_t SectionReader::get_size(const std::string& key, std::size_t fallback) {
  return static_cast<std::size_t>(get_u64(key, fallback));
}

bool SectionReader::get_bool(const std::string& key, bool fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  auto parsed = parse_bool(*v);
  if (!parsed) throw ConfigError(section_ + "." + key + ": expected true/false, got '" + *v + "'");
  return *parsed;
}

std::string SectionReader::get_string(const std::string& key, const std::string& fallback) {
  const std::string* v = lookup(key);
  return v ? *v : fallback;
}

std::vector<std::size_t> SectionReader::get_size_list(const std::string& key,
                                                      const std::vector<std::size_t>& fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  std::vector<std::size_t> out;
  for (const auto& part : split(*v, ',')) {
    auto parsed = parse_u64(part);
    if (!parsed) throw ConfigError(section_ + "." + key + ": bad list entry '" + part + "'");
    out.push_back(static_cast<std::size_t>(*parsed));
  }
  return out;
}

std::vector<std::string> SectionReader::get_string_list(const std::string& key,
                                                        const std::vector<std::string>& fallback) {
  const std::string* v = lookup(key);
  if (!v) return fallback;
  std::vector<std::string> out;
  for (const auto& part : split(*v, ',')) {
    std::string item(trim(part));
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void SectionReader::finish() const {
  for (const auto& [k, v] : values_) {
    if (!used_.count(k)) throw ConfigError("unknown config key " + section_ + "." + k);
  }
}

}  // namespace storm
