#pragma once

#include <bit>
#include <cmath>

#include "beacon/bytes.hpp"

// Frequency-style smoke tests for bit streams (SP 800-22 monobit and runs).
// Passing is necessary, not sufficient.
namespace beacon::randtest {

inline std::size_t popcount(const BitString& s) {
  std::size_t ones = 0;
  for (auto b : s.bytes()) ones += static_cast<std::size_t>(std::popcount(b));
  return ones;
}

inline double monobit_p(const BitString& s) {
  require(s.size() > 0, Errc::InvalidArgument, "empty bit string");
  double n = static_cast<double>(s.size());
  double sum = 2.0 * static_cast<double>(popcount(s)) - n;
  return std::erfc(std::fabs(sum) / std::sqrt(2 * n));
}

// Returns 0 when the frequency prerequisite fails, as the reference test does.
inline double runs_p(const BitString& s) {
  require(s.size() > 1, Errc::InvalidArgument, "bit string too short");
  double n = static_cast<double>(s.size());
  double pi = static_cast<double>(popcount(s)) / n;
  if (std::fabs(pi - 0.5) >= 2 / std::sqrt(n)) return 0;
  std::size_t runs = 1;
  for (std::size_t i = 1; i < s.size(); ++i) runs += s[i] != s[i - 1];
  double v = static_cast<double>(runs);
  double q = 2 * n * pi * (1 - pi);
  return std::erfc(std::fabs(v - q) / (2 * std::sqrt(2 * n) * pi * (1 - pi)));
}

}  // namespace beacon::randtest
