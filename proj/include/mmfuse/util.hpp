// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmfuse {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LengthError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; used to derive independent rng streams from
// (seed, step, slot) style tuples so resume never replays or skips draws.
uint64_t mix64(uint64_t x);
uint64_t mix64(uint64_t a, uint64_t b);
uint64_t mix64(uint64_t a, uint64_t b, uint64_t c);

// Deterministic rng. Double/normal generation is done from raw 64-bit
// draws so a stream is fully described by the engine state (no cached
// spare values as in std::normal_distribution).
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }
  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  // standard normal via Box-Muller
  double normal();
  // uniform integer in [0, n)
  int64_t uniform_int(int64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[uniform_int(i + 1)]);
    }
  }

  std::string serialize() const;
  static Rng deserialize(const std::string& s);

 private:
  std::mt19937_64 eng_;
};

uint64_t fnv1a64(const void* data, size_t len);

// fixed 6-decimal formatting for diffable CSV/report output
std::string fmt6(double v);

// "key = value" config files; '#' starts a comment
std::map<std::string, std::string> parse_kv_file(const std::string& path);
std::map<std::string, std::string> parse_kv_text(const std::string& text);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

std::string join_tokens(const std::vector<int>& toks, char sep = ' ');

}  // namespace mmfuse
