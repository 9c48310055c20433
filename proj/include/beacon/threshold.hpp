#pragma once

#include <cmath>
#include <cstdint>

#include "beacon/error.hpp"

namespace beacon {

// Entropy the raw data must carry for the extractor to emit `sigma` bits
// within error eps_x.
inline std::int64_t entropy_threshold(std::int64_t sigma, double eps_x) {
  require(sigma >= 1 && eps_x > 0 && eps_x < 1, Errc::InvalidArgument, "entropy_threshold domain");
  long double s = static_cast<long double>(sigma);
  return static_cast<std::int64_t>(
      std::ceil(s + 4 * std::log2(s) + 6 - 4 * std::log2(static_cast<long double>(eps_x))));
}

}  // namespace beacon
