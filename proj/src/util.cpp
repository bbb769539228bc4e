// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/util.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mmfuse {

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t mix64(uint64_t a, uint64_t b) { return mix64(mix64(a) ^ b); }

uint64_t mix64(uint64_t a, uint64_t b, uint64_t c) {
  return mix64(mix64(a, b) ^ c);
}

double Rng::normal() {
  double u1 = uniform();
  double u2 = uniform();
  // avoid log(0)
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw NumericError("uniform_int: n must be positive");
  // widening-multiply range reduction
  unsigned __int128 m =
      static_cast<unsigned __int128>(next_u64()) * static_cast<uint64_t>(n);
  return static_cast<int64_t>(m >> 64);
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << eng_;
  return os.str();
}

Rng Rng::deserialize(const std::string& s) {
  Rng r(0);
  std::istringstream is(s);
  is >> r.eng_;
  if (is.fail()) throw IoError("rng state parse failure");
  return r;
}

uint64_t fnv1a64(const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

static std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value, got '" + t + "'");
    }
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key");
    }
    out[key] = val;
  }
  return out;
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
  return parse_kv_text(read_file(path));
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write file: " + path);
  f << content;
  if (!f) throw IoError("write failure: " + path);
}

std::string join_tokens(const std::vector<int>& toks, char sep) {
  std::string s;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) s += sep;
    s += std::to_string(toks[i]);
  }
  return s;
}

}  // namespace mmfuse
