#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "pef/tensor.hpp"

namespace pef {

// Flat key=value text with dotted section keys, '#' comments.
inline std::map<std::string, std::string> parse_kv(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  auto trim = [](std::string s) {
    const char* ws = " \t\r\n";
    const auto a = s.find_first_not_of(ws);
    if (a == std::string::npos) return std::string();
    const auto b = s.find_last_not_of(ws);
    return s.substr(a, b - a + 1);
  };
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ValueError("config line " + std::to_string(lineno) +
                       ": expected key=value");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty())
      throw ValueError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(t.substr(eq + 1));
  }
  return kv;
}

inline std::map<std::string, std::string> parse_kv_string(
    const std::string& text) {
  std::istringstream in(text);
  return parse_kv(in);
}

inline std::map<std::string, std::string> parse_kv_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValueError("cannot open config file: " + path);
  return parse_kv(in);
}

inline std::string kv_to_string(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

}  // namespace pef
