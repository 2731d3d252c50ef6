#include "seibw/config.hpp"

#include <fstream>
#include <sstream>

namespace seibw {

namespace {
std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}
}  // namespace

Config Config::from_file(const std::string& path) {
  std::ifstream f(path);
  SEIBW_CHECK_VALUE(f.good(), "config: cannot open: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_string(ss.str());
}

Config Config::from_string(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    SEIBW_CHECK_VALUE(eq != std::string::npos,
                      "config: line " + std::to_string(lineno) + " has no '='");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    SEIBW_CHECK_VALUE(!key.empty(), "config: empty key at line " + std::to_string(lineno));
    cfg.entries_[key] = value;
  }
  return cfg;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    SEIBW_CHECK_VALUE(pos == it->second.size(), "config: bad number for " + key);
    return v;
  } catch (const std::invalid_argument&) {
    throw ValueError("config: bad number for " + key + ": " + it->second);
  }
}

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(it->second, &pos);
    SEIBW_CHECK_VALUE(pos == it->second.size(), "config: bad integer for " + key);
    return v;
  } catch (const std::invalid_argument&) {
    throw ValueError("config: bad integer for " + key + ": " + it->second);
  }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ValueError("config: bad boolean for " + key + ": " + v);
}

std::vector<std::size_t> Config::get_size_list(const std::string& key,
                                               std::vector<std::size_t> fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  std::vector<std::size_t> out;
  std::istringstream ss(it->second);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(static_cast<std::size_t>(std::stoull(item)));
    } catch (const std::exception&) {
      throw ValueError("config: bad list entry for " + key + ": " + item);
    }
  }
  SEIBW_CHECK_VALUE(!out.empty(), "config: empty list for " + key);
  return out;
}

void Config::check_known(const std::set<std::string>& known) const {
  std::string unknown;
  for (const auto& [k, v] : entries_)
    if (known.find(k) == known.end()) unknown += (unknown.empty() ? "" : ", ") + k;
  if (!unknown.empty()) throw ValueError("config: unknown keys: " + unknown);
}

}  // namespace seibw
