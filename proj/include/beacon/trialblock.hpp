#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <iterator>

#include "beacon/cbor.hpp"
#include "beacon/crypto.hpp"
#include "beacon/polytope.hpp"

namespace beacon::pef {

struct TrialRecord {
  std::uint8_t x = 0, y = 0, a = 0, b = 0;

  int cz() const { return cz_index(a, b, x, y); }
  std::uint8_t nibble() const { return static_cast<std::uint8_t>(x << 3 | y << 2 | a << 1 | b); }
  static TrialRecord from_nibble(std::uint8_t n) {
    return {static_cast<std::uint8_t>(n >> 3 & 1), static_cast<std::uint8_t>(n >> 2 & 1),
            static_cast<std::uint8_t>(n >> 1 & 1), static_cast<std::uint8_t>(n & 1)};
  }
};

using Counts = std::array<std::uint64_t, 16>;

// Packed trials, two per byte, first trial in the high nibble.
class TrialBlock {
 public:
  static constexpr std::string_view kMagic = "TWBT1\n";

  void push(const TrialRecord& t) {
    require(t.x < 2 && t.y < 2 && t.a < 2 && t.b < 2, Errc::InvalidArgument, "trial fields must be bits");
    if (n_ % 2 == 0)
      packed_.push_back(static_cast<std::uint8_t>(t.nibble() << 4));
    else
      packed_.back() |= t.nibble();
    ++counts_[static_cast<std::size_t>(t.cz())];
    ++n_;
  }

  static TrialBlock from_packed(std::uint64_t n, Bytes packed) {
    require(packed.size() == (n + 1) / 2, Errc::MalformedEncoding, "packed size does not match trial count");
    TrialBlock t;
    t.n_ = n;
    t.packed_ = std::move(packed);
    if (n % 2 == 1) t.packed_.back() &= 0xf0;
    t.counts_ = t.recount();
    return t;
  }

  void reserve(std::uint64_t n) { packed_.reserve(static_cast<std::size_t>((n + 1) / 2)); }

  std::uint64_t size() const { return n_; }
  const Bytes& packed() const { return packed_; }
  const Counts& counts() const { return counts_; }
  const cbor::Value& meta() const { return meta_; }
  void set_meta(cbor::Value m) { meta_ = std::move(m); }

  std::uint8_t nibble(std::uint64_t j) const {
    std::uint8_t byte = packed_[static_cast<std::size_t>(j / 2)];
    return j % 2 == 0 ? byte >> 4 : byte & 0x0f;
  }
  TrialRecord operator[](std::uint64_t j) const { return TrialRecord::from_nibble(nibble(j)); }

  // Index in cz_index order for each of the 16 nibble values.
  static const std::array<std::uint8_t, 16>& nibble_to_cz() {
    static const std::array<std::uint8_t, 16> table = [] {
      std::array<std::uint8_t, 16> t{};
      for (int n = 0; n < 16; ++n) t[static_cast<std::size_t>(n)] = static_cast<std::uint8_t>(TrialRecord::from_nibble(static_cast<std::uint8_t>(n)).cz());
      return t;
    }();
    return table;
  }

  Counts recount() const {
    Counts c{};
    const auto& map = nibble_to_cz();
    for (std::uint64_t j = 0; j < n_; ++j) ++c[map[nibble(j)]];
    return c;
  }

  // Extractor input: a_0 b_0 a_1 b_1 ... (2n bits).
  BitString outcome_bits() const {
    Bytes out(static_cast<std::size_t>((2 * n_ + 7) / 8), 0);
    for (std::size_t i = 0; i < packed_.size(); ++i) {
      auto v = static_cast<std::uint8_t>((packed_[i] >> 4 & 3) << 2 | (packed_[i] & 3));
      out[i / 2] |= static_cast<std::uint8_t>(i % 2 == 0 ? v << 4 : v);
    }
    return BitString(std::move(out), static_cast<std::size_t>(2 * n_));
  }

  TrialBlock slice(std::uint64_t begin, std::uint64_t end) const {
    require(begin <= end && end <= n_, Errc::InvalidArgument, "slice out of range");
    TrialBlock out;
    out.reserve(end - begin);
    for (std::uint64_t j = begin; j < end; ++j) out.push(TrialRecord::from_nibble(nibble(j)));
    out.meta_ = meta_;
    return out;
  }

  void append(const TrialBlock& other) {
    for (std::uint64_t j = 0; j < other.size(); ++j) push(other[j]);
  }

  Bytes to_file_bytes() const {
    Bytes out(kMagic.begin(), kMagic.end());
    append_le64(out, n_);
    out.insert(out.end(), packed_.begin(), packed_.end());
    Bytes m = cbor::serialize(meta_);
    out.insert(out.end(), m.begin(), m.end());
    return out;
  }

  static TrialBlock from_file_bytes(ByteView b) {
    require(b.size() >= kMagic.size() + 8 && std::equal(kMagic.begin(), kMagic.end(), b.begin()),
            Errc::MalformedEncoding, "not a trial block file");
    TrialBlock t;
    std::uint64_t n = read_le64(b.subspan(kMagic.size()));
    std::size_t off = kMagic.size() + 8;
    std::size_t nbytes = static_cast<std::size_t>((n + 1) / 2);
    require(n <= (b.size() - off) * 2 && b.size() - off >= nbytes, Errc::MalformedEncoding, "truncated trial block");
    t.n_ = n;
    t.packed_.assign(b.begin() + static_cast<std::ptrdiff_t>(off), b.begin() + static_cast<std::ptrdiff_t>(off + nbytes));
    if (n % 2 == 1) require((t.packed_.back() & 0x0f) == 0, Errc::MalformedEncoding, "nonzero padding nibble");
    t.counts_ = t.recount();
    t.meta_ = cbor::parse(b.subspan(off + nbytes));
    return t;
  }

  Digest512 file_digest() const { return crypto::sha3_512(to_file_bytes()); }

  void save(const std::string& path) const {
    Bytes b = to_file_bytes();
    std::ofstream f(path, std::ios::binary);
    require(static_cast<bool>(f), Errc::Io, "cannot write " + path);
    f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  }

  static TrialBlock load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(static_cast<bool>(f), Errc::Io, "cannot read " + path);
    Bytes b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_file_bytes(b);
  }

 private:
  std::uint64_t n_ = 0;
  Bytes packed_;
  Counts counts_{};
  cbor::Value meta_ = cbor::Map{};
};

}  // namespace beacon::pef
