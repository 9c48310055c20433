#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "beacon/error.hpp"

namespace beacon {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;
using Digest512 = std::array<std::uint8_t, 64>;

inline Bytes to_bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }

inline std::string to_hex(ByteView data) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  out.reserve(data.size() * 2);
  for (auto b : data) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xf]);
  }
  return out;
}

inline Bytes from_hex(std::string_view hex) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  if (hex.size() >= 2 && hex[0] == '0' && (hex[1] == 'x' || hex[1] == 'X')) hex.remove_prefix(2);
  require(hex.size() % 2 == 0, Errc::MalformedEncoding, "odd-length hex string");
  Bytes out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    int hi = nibble(hex[2 * i]);
    int lo = nibble(hex[2 * i + 1]);
    require(hi >= 0 && lo >= 0, Errc::MalformedEncoding, "invalid hex digit");
    out[i] = static_cast<std::uint8_t>((hi << 4) | lo);
  }
  return out;
}

// RFC 4648 base32, lowercase alphabet, no padding (multibase 'b').
inline std::string base32_lower(ByteView data) {
  static constexpr char alphabet[] = "abcdefghijklmnopqrstuvwxyz234567";
  std::string out;
  out.reserve((data.size() * 8 + 4) / 5);
  std::uint32_t buffer = 0;
  int bits = 0;
  for (auto b : data) {
    buffer = (buffer << 8) | b;
    bits += 8;
    while (bits >= 5) {
      out.push_back(alphabet[(buffer >> (bits - 5)) & 0x1f]);
      bits -= 5;
    }
  }
  if (bits > 0) out.push_back(alphabet[(buffer << (5 - bits)) & 0x1f]);
  return out;
}

inline Bytes base32_lower_decode(std::string_view text) {
  Bytes out;
  std::uint32_t buffer = 0;
  int bits = 0;
  for (char c : text) {
    int v;
    if (c >= 'a' && c <= 'z') v = c - 'a';
    else if (c >= '2' && c <= '7') v = c - '2' + 26;
    else fail(Errc::MalformedEncoding, "invalid base32 character");
    buffer = (buffer << 5) | static_cast<std::uint32_t>(v);
    bits += 5;
    if (bits >= 8) {
      out.push_back(static_cast<std::uint8_t>(buffer >> (bits - 8)));
      bits -= 8;
    }
  }
  require(bits < 5 && (buffer & ((1u << bits) - 1)) == 0, Errc::MalformedEncoding,
          "non-canonical base32 tail");
  return out;
}

inline std::string base64url(ByteView data) {
  static constexpr char alphabet[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_";
  std::string out;
  std::uint32_t buffer = 0;
  int bits = 0;
  for (auto b : data) {
    buffer = (buffer << 8) | b;
    bits += 8;
    while (bits >= 6) {
      out.push_back(alphabet[(buffer >> (bits - 6)) & 0x3f]);
      bits -= 6;
    }
  }
  if (bits > 0) out.push_back(alphabet[(buffer << (6 - bits)) & 0x3f]);
  return out;
}

inline Bytes base64url_decode(std::string_view text) {
  Bytes out;
  std::uint32_t buffer = 0;
  int bits = 0;
  for (char c : text) {
    int v;
    if (c >= 'A' && c <= 'Z') v = c - 'A';
    else if (c >= 'a' && c <= 'z') v = c - 'a' + 26;
    else if (c >= '0' && c <= '9') v = c - '0' + 52;
    else if (c == '-') v = 62;
    else if (c == '_') v = 63;
    else fail(Errc::MalformedEncoding, "invalid base64url character");
    buffer = (buffer << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      out.push_back(static_cast<std::uint8_t>(buffer >> (bits - 8)));
      bits -= 8;
    }
  }
  return out;
}

inline void append_be64(Bytes& out, std::uint64_t v) {
  for (int i = 7; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void append_le64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t read_le64(ByteView in) {
  require(in.size() >= 8, Errc::MalformedEncoding, "truncated 64-bit field");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | in[static_cast<std::size_t>(i)];
  return v;
}

// Packed bit string, MSB-first within each byte: bit i lives in byte i/8 at
// position 7 - i%8.
class BitString {
 public:
  BitString() = default;
  explicit BitString(std::size_t nbits) : bits_(nbits), data_((nbits + 7) / 8, 0) {}
  BitString(Bytes packed, std::size_t nbits) : bits_(nbits), data_(std::move(packed)) {
    require(data_.size() * 8 >= nbits, Errc::InvalidArgument, "packed buffer shorter than bit length");
    data_.resize((nbits + 7) / 8);
    if (nbits % 8) data_.back() &= static_cast<std::uint8_t>(0xff << (8 - nbits % 8));
  }

  std::size_t size() const noexcept { return bits_; }
  bool operator[](std::size_t i) const { return (data_[i >> 3] >> (7 - (i & 7))) & 1u; }
  void set(std::size_t i, bool v) {
    auto mask = static_cast<std::uint8_t>(1u << (7 - (i & 7)));
    if (v) data_[i >> 3] |= mask;
    else data_[i >> 3] &= static_cast<std::uint8_t>(~mask);
  }
  void flip(std::size_t i) { data_[i >> 3] ^= static_cast<std::uint8_t>(1u << (7 - (i & 7))); }
  const Bytes& bytes() const noexcept { return data_; }

  BitString prefix(std::size_t n) const {
    require(n <= bits_, Errc::InvalidArgument, "prefix longer than bit string");
    return BitString(Bytes(data_.begin(), data_.begin() + static_cast<std::ptrdiff_t>((n + 7) / 8)), n);
  }

  friend bool operator==(const BitString& a, const BitString& b) {
    return a.bits_ == b.bits_ && a.data_ == b.data_;
  }

 private:
  std::size_t bits_ = 0;
  Bytes data_;
};

}  // namespace beacon
