#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "taillab/workload.hpp"

namespace taillab {

namespace detail {

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// One `[name]` section: ordered key/value pairs, each remembering the
/// line it came from so later validation can point at the source.
struct ConfigSection {
  std::string name;
  int line = 0;
  struct Entry {
    std::string key;
    std::string value;
    int line = 0;
  };
  std::vector<Entry> entries;

  const Entry* find(const std::string& key) const {
    for (const auto& e : entries) {
      if (e.key == key) return &e;
    }
    return nullptr;
  }
};

struct ConfigFile {
  std::string path;
  std::vector<ConfigSection> sections;
};

/// Parses the flat section/key-value format used by scenario and sweep
/// files. Full-line comments start with '#' or ';'. Every diagnostic is
/// prefixed `path:line:`.
inline ConfigFile parse_config_text(const std::string& text,
                                    const std::string& path) {
  ConfigFile file;
  file.path = path;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    line_no++;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    std::string where = path + ":" + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError(where + ": unterminated section header");
      }
      std::string name = detail::trim(line.substr(1, line.size() - 2));
      if (name.empty()) throw ConfigError(where + ": empty section name");
      ConfigSection section;
      section.name = name;
      section.line = line_no;
      file.sections.push_back(std::move(section));
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + ": expected 'key = value' or '[section]'");
    }
    if (file.sections.empty()) {
      throw ConfigError(where + ": key outside of any section");
    }
    ConfigSection::Entry entry;
    entry.key = detail::trim(line.substr(0, eq));
    entry.value = detail::trim(line.substr(eq + 1));
    entry.line = line_no;
    if (entry.key.empty()) throw ConfigError(where + ": empty key");
    auto& section = file.sections.back();
    if (section.find(entry.key)) {
      throw ConfigError(where + ": duplicate key '" + entry.key + "' in [" +
                        section.name + "]");
    }
    section.entries.push_back(std::move(entry));
  }
  return file;
}

inline ConfigFile parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path);
}

/// Typed access to one section. Every read marks its key as consumed;
/// finish() rejects keys nobody asked about, which is how typos in
/// scenario files surface as errors instead of silently applied defaults.
class SectionReader {
 public:
  SectionReader(const ConfigFile& file, const ConfigSection& section)
      : file_(file), section_(section) {}

  bool has(const std::string& key) {
    const auto* e = section_.find(key);
    if (e) consumed_.insert(key);
    return e != nullptr;
  }

  std::string get_str(const std::string& key) {
    const auto* e = section_.find(key);
    if (!e) {
      throw ConfigError(file_.path + ":" + std::to_string(section_.line) +
                        ": [" + section_.name + "] is missing required key '" +
                        key + "'");
    }
    consumed_.insert(key);
    return e->value;
  }

  std::string get_str(const std::string& key, const std::string& def) {
    const auto* e = section_.find(key);
    if (!e) return def;
    consumed_.insert(key);
    return e->value;
  }

  uint64_t get_u64(const std::string& key) { return parse_u64(get_entry(key)); }
  uint64_t get_u64(const std::string& key, uint64_t def) {
    const auto* e = section_.find(key);
    if (!e) return def;
    consumed_.insert(key);
    return parse_u64(*e);
  }

  double get_double(const std::string& key) {
    return parse_double(get_entry(key));
  }
  double get_double(const std::string& key, double def) {
    const auto* e = section_.find(key);
    if (!e) return def;
    consumed_.insert(key);
    return parse_double(*e);
  }

  int entry_line(const std::string& key) const {
    const auto* e = section_.find(key);
    return e ? e->line : section_.line;
  }

  /// Call after all expected keys were read.
  void finish() {
    for (const auto& e : section_.entries) {
      if (!consumed_.count(e.key)) {
        throw ConfigError(file_.path + ":" + std::to_string(e.line) +
                          ": unknown key '" + e.key + "' in [" +
                          section_.name + "]");
      }
    }
  }

 private:
  const ConfigSection::Entry& get_entry(const std::string& key) {
    const auto* e = section_.find(key);
    if (!e) {
      throw ConfigError(file_.path + ":" + std::to_string(section_.line) +
                        ": [" + section_.name + "] is missing required key '" +
                        key + "'");
    }
    consumed_.insert(key);
    return *e;
  }

  uint64_t parse_u64(const ConfigSection::Entry& e) const {
    try {
      size_t pos = 0;
      uint64_t v = std::stoull(e.value, &pos);
      if (pos != e.value.size()) throw std::invalid_argument(e.value);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(file_.path + ":" + std::to_string(e.line) +
                        ": key '" + e.key + "' expects an integer, got '" +
                        e.value + "'");
    }
  }

  double parse_double(const ConfigSection::Entry& e) const {
    try {
      size_t pos = 0;
      double v = std::stod(e.value, &pos);
      if (pos != e.value.size()) throw std::invalid_argument(e.value);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(file_.path + ":" + std::to_string(e.line) +
                        ": key '" + e.key + "' expects a number, got '" +
                        e.value + "'");
    }
  }

  const ConfigFile& file_;
  const ConfigSection& section_;
  std::set<std::string> consumed_;
};

}  // namespace taillab
