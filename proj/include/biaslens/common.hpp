#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace biaslens {

// Input that violates a documented contract (bad file, bad flag, bad record).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed serialized input; carries the 1-based line when known.
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : ValidationError(what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Failure while running an otherwise valid computation (NaN loss, I/O).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

// Uniform integer in [0, n). Rejection sampling on the raw engine output so
// the stream is identical across standard library implementations.
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

// Uniform real in [0, 1) built from the top 53 bits of one engine draw.
double uniform_unit(Rng& rng);

// Standard normal via Box-Muller; consumes two draws.
double standard_normal(Rng& rng);

// FNV-1a over the bytes of `text`, stable across platforms.
std::uint64_t stable_hash(std::string_view text, std::uint64_t basis = 1469598103934665603ULL);

// Mix two 64-bit values into a derived seed (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace biaslens
