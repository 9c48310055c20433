#pragma once

#include <fstream>
#include <memory>
#include <string>

#include "beacon/bytes.hpp"
#include "beacon/crypto.hpp"
#include "beacon/error.hpp"

namespace beacon {

// Anything that can hand out fresh random bytes. Failures raise
// Error(SourceUnavailable).
class RandomSource {
 public:
  virtual ~RandomSource() = default;
  virtual Bytes read(std::size_t n) = 0;
  virtual std::string name() const = 0;
};

class SystemRandom : public RandomSource {
 public:
  Bytes read(std::size_t n) override {
    try {
      return crypto::random_bytes(n);
    } catch (const Error& e) {
      fail(Errc::SourceUnavailable, e.what());
    }
  }
  std::string name() const override { return "system-csprng"; }
};

// Reproducible stream: SHAKE256(seed || counter) in 64-byte blocks. For
// tests and simulations only.
class SeededRandom : public RandomSource {
 public:
  explicit SeededRandom(Bytes seed) : seed_(std::move(seed)) {}
  explicit SeededRandom(std::uint64_t seed) { append_be64(seed_, seed); }

  Bytes read(std::size_t n) override {
    Bytes out;
    out.reserve(n);
    while (out.size() < n) {
      if (pos_ == block_.size()) refill();
      std::size_t k = std::min(n - out.size(), block_.size() - pos_);
      out.insert(out.end(), block_.begin() + static_cast<std::ptrdiff_t>(pos_),
                 block_.begin() + static_cast<std::ptrdiff_t>(pos_ + k));
      pos_ += k;
    }
    return out;
  }
  std::string name() const override { return "seeded-shake256"; }

 private:
  void refill() {
    Bytes in = seed_;
    append_be64(in, counter_++);
    block_ = crypto::shake256(in, 64);
    pos_ = 0;
  }

  Bytes seed_;
  Bytes block_;
  std::size_t pos_ = 0;
  std::uint64_t counter_ = 0;
};

// Reads an entropy device such as /dev/hwrng.
class DeviceRandom : public RandomSource {
 public:
  explicit DeviceRandom(std::string path) : path_(std::move(path)) {}
  Bytes read(std::size_t n) override {
    std::ifstream in(path_, std::ios::binary);
    require(in.good(), Errc::SourceUnavailable, "cannot open entropy device " + path_);
    Bytes out(n);
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n));
    require(static_cast<std::size_t>(in.gcount()) == n, Errc::SourceUnavailable, "short read from " + path_);
    return out;
  }
  std::string name() const override { return "device:" + path_; }

 private:
  std::string path_;
};

// The "external" source slot: a hardware device when one is readable,
// otherwise a second CSPRNG instance. name() records which one was chosen.
inline std::unique_ptr<RandomSource> external_source(const std::string& device = "/dev/hwrng") {
  try {
    DeviceRandom d(device);
    d.read(1);
    return std::make_unique<DeviceRandom>(device);
  } catch (const Error&) {
    struct SecondCsprng : SystemRandom {
      std::string name() const override { return "system-csprng-2"; }
    };
    return std::make_unique<SecondCsprng>();
  }
}

}  // namespace beacon
