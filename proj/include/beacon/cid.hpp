#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>

#include "beacon/bytes.hpp"
#include "beacon/crypto.hpp"

namespace beacon {

namespace multicodec {
inline constexpr std::uint64_t dag_cbor = 0x71;
inline constexpr std::uint64_t raw = 0x55;
inline constexpr std::uint64_t sha2_256 = 0x12;
inline constexpr std::uint64_t sha3_512 = 0x14;
}  // namespace multicodec

namespace detail {

inline void put_varint(Bytes& out, std::uint64_t v) {
  while (v >= 0x80) {
    out.push_back(static_cast<std::uint8_t>(v | 0x80));
    v >>= 7;
  }
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint64_t get_varint(ByteView in, std::size_t& pos) {
  std::uint64_t v = 0;
  for (int shift = 0; shift < 64; shift += 7) {
    require(pos < in.size(), Errc::MalformedEncoding, "truncated varint");
    std::uint8_t b = in[pos++];
    v |= static_cast<std::uint64_t>(b & 0x7f) << shift;
    if (!(b & 0x80)) {
      require(b != 0 || shift == 0, Errc::MalformedEncoding, "non-minimal varint");
      return v;
    }
  }
  fail(Errc::MalformedEncoding, "varint overflow");
}

inline std::size_t digest_length(std::uint64_t hash_alg) {
  switch (hash_alg) {
    case multicodec::sha3_512: return 64;
    case multicodec::sha2_256: return 32;
    default: fail(Errc::UnsupportedAlgorithm, "unsupported multihash code " + std::to_string(hash_alg));
  }
}

}  // namespace detail

// Self-describing content identifier (CIDv1): version, content codec and a
// multihash of the referenced bytes.
struct Cid {
  std::uint64_t version = 1;
  std::uint64_t codec = multicodec::dag_cbor;
  std::uint64_t hash_alg = multicodec::sha3_512;
  Bytes digest;

  Bytes to_binary() const {
    Bytes out;
    detail::put_varint(out, version);
    detail::put_varint(out, codec);
    detail::put_varint(out, hash_alg);
    detail::put_varint(out, digest.size());
    out.insert(out.end(), digest.begin(), digest.end());
    return out;
  }

  static Cid from_binary(ByteView bin) {
    std::size_t pos = 0;
    Cid c;
    c.version = detail::get_varint(bin, pos);
    require(c.version == 1, Errc::MalformedEncoding, "only CIDv1 is supported");
    c.codec = detail::get_varint(bin, pos);
    c.hash_alg = detail::get_varint(bin, pos);
    std::uint64_t len = detail::get_varint(bin, pos);
    require(len == detail::digest_length(c.hash_alg), Errc::MalformedEncoding,
            "digest length does not match hash algorithm");
    require(bin.size() - pos == len, Errc::MalformedEncoding, "CID digest length mismatch");
    c.digest.assign(bin.begin() + static_cast<std::ptrdiff_t>(pos), bin.end());
    return c;
  }

  // Multibase base32 lowercase without padding, prefix 'b'.
  std::string to_string() const { return "b" + base32_lower(to_binary()); }

  static Cid parse(std::string_view text) {
    require(!text.empty() && text.front() == 'b', Errc::MalformedEncoding,
            "CID text must use multibase prefix 'b'");
    return from_binary(base32_lower_decode(text.substr(1)));
  }

  bool empty() const noexcept { return digest.empty(); }

  friend auto operator<=>(const Cid&, const Cid&) = default;
  friend bool operator==(const Cid&, const Cid&) = default;
};

inline Cid compute_cid(ByteView bytes, std::uint64_t hash_alg = multicodec::sha3_512,
                       std::uint64_t codec = multicodec::dag_cbor) {
  require(!bytes.empty(), Errc::InvalidArgument, "cannot address empty content");
  Cid c;
  c.codec = codec;
  c.hash_alg = hash_alg;
  switch (hash_alg) {
    case multicodec::sha3_512: c.digest = crypto::sha3_512_bytes(bytes); break;
    case multicodec::sha2_256: c.digest = crypto::sha256(bytes); break;
    default: fail(Errc::UnsupportedAlgorithm, "unsupported hash algorithm " + std::to_string(hash_alg));
  }
  return c;
}

}  // namespace beacon

template <>
struct std::hash<beacon::Cid> {
  std::size_t operator()(const beacon::Cid& c) const noexcept {
    std::size_t h = 0;
    for (std::size_t i = 0; i < c.digest.size() && i < sizeof(std::size_t); ++i)
      h = (h << 8) | c.digest[i];
    return h ^ c.codec;
  }
};
