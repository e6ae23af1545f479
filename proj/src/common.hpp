#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace pp {

// Error categories shared by the whole library. The C API and the CLI map
// these onto status values and exit codes, so the set is part of the contract.
enum class ErrorCode {
  InvalidArgument,
  Parse,
  Io,
  Numeric,
  Mismatch,
  Internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

// splitmix64; used to derive independent sub-seeds from (seed, salt...) so
// that resuming or re-running a phase replays the exact same random stream.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t sub_seed(uint64_t seed, uint64_t a, uint64_t b = 0,
                         uint64_t c = 0) {
  uint64_t h = mix64(seed ^ 0x853c49e6748fea9bULL);
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  h = mix64(h ^ c);
  return h;
}

inline std::mt19937_64 make_rng(uint64_t seed, uint64_t a, uint64_t b = 0,
                                uint64_t c = 0) {
  return std::mt19937_64(sub_seed(seed, a, b, c));
}

// FNV-1a, used for tree hashes in checkpoint/manifest consistency checks.
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace pp
