#pragma once

// Deterministic CBOR profile used for everything that gets hashed:
// definite lengths, shortest-form integers, map keys ordered by encoded
// length then bytewise, no floats, CID links as tag 42 over 0x00 || CID.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "beacon/bytes.hpp"
#include "beacon/cid.hpp"
#include "beacon/error.hpp"

namespace beacon::cbor {

struct Value;
using Array = std::vector<Value>;
using Map = std::map<std::string, Value>;

struct Null {
  friend bool operator==(Null, Null) { return true; }
};

struct Value {
  // `double` is representable so that callers get UnsupportedValue at
  // serialisation time rather than silently converting.
  using Storage = std::variant<Null, bool, std::int64_t, std::string, Bytes, Array, Map, Cid, double>;
  Storage v;

  Value() : v(Null{}) {}
  Value(Null) : v(Null{}) {}
  Value(bool b) : v(b) {}
  Value(int i) : v(static_cast<std::int64_t>(i)) {}
  Value(long i) : v(static_cast<std::int64_t>(i)) {}
  Value(long long i) : v(static_cast<std::int64_t>(i)) {}
  Value(unsigned i) : v(static_cast<std::int64_t>(i)) {}
  Value(unsigned long i) : v(checked(i)) {}
  Value(unsigned long long i) : v(checked(i)) {}
  Value(double d) : v(d) {}
  Value(const char* s) : v(std::string(s)) {}
  Value(std::string s) : v(std::move(s)) {}
  Value(std::string_view s) : v(std::string(s)) {}
  Value(Bytes b) : v(std::move(b)) {}
  Value(Array a) : v(std::move(a)) {}
  Value(Map m) : v(std::move(m)) {}
  Value(Cid c) : v(std::move(c)) {}

  template <class T>
  bool is() const noexcept { return std::holds_alternative<T>(v); }

  template <class T>
  const T& as(std::string_view what = "value") const {
    if (const T* p = std::get_if<T>(&v)) return *p;
    fail(Errc::MalformedEncoding, "unexpected type for " + std::string(what));
  }

  template <class T>
  T& as_mut() {
    if (T* p = std::get_if<T>(&v)) return *p;
    fail(Errc::MalformedEncoding, "unexpected CBOR type");
  }

  const Value& at(const std::string& key) const {
    const Map& m = as<Map>(key);
    auto it = m.find(key);
    require(it != m.end(), Errc::MalformedEncoding, "missing field '" + key + "'");
    return it->second;
  }

  bool has(const std::string& key) const {
    const Map* m = std::get_if<Map>(&v);
    return m && m->count(key);
  }

  std::int64_t as_int(std::string_view what = "integer") const { return as<std::int64_t>(what); }
  const std::string& as_text(std::string_view what = "text") const { return as<std::string>(what); }
  const Bytes& as_bytes(std::string_view what = "bytes") const { return as<Bytes>(what); }

  friend bool operator==(const Value& a, const Value& b) { return a.v == b.v; }

 private:
  template <class U>
  static std::int64_t checked(U i) {
    require(i <= static_cast<U>(INT64_MAX), Errc::UnsupportedValue, "integer exceeds int64 range");
    return static_cast<std::int64_t>(i);
  }
};

// Reals travel as shortest round-trip decimal text so hashed bytes never
// contain IEEE floats.
inline Value real(double d) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, d);
  return Value(std::string(buf, res.ptr));
}

inline double as_real(const Value& v, std::string_view what = "real") {
  const std::string& s = v.as_text(what);
  double d = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), d);
  require(res.ec == std::errc() && res.ptr == s.data() + s.size(), Errc::MalformedEncoding,
          "invalid real '" + s + "'");
  return d;
}

namespace detail {

inline void put_head(Bytes& out, std::uint8_t major, std::uint64_t arg) {
  std::uint8_t mt = static_cast<std::uint8_t>(major << 5);
  if (arg < 24) {
    out.push_back(static_cast<std::uint8_t>(mt | arg));
  } else if (arg <= 0xff) {
    out.push_back(mt | 24);
    out.push_back(static_cast<std::uint8_t>(arg));
  } else if (arg <= 0xffff) {
    out.push_back(mt | 25);
    for (int i = 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(arg >> (8 * i)));
  } else if (arg <= 0xffffffffULL) {
    out.push_back(mt | 26);
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(arg >> (8 * i)));
  } else {
    out.push_back(mt | 27);
    for (int i = 7; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(arg >> (8 * i)));
  }
}

inline bool canonical_key_less(const std::string& a, const std::string& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end(), [](char x, char y) {
    return static_cast<unsigned char>(x) < static_cast<unsigned char>(y);
  });
}

inline void encode(Bytes& out, const Value& value) {
  std::visit(
      [&](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, Null>) {
          out.push_back(0xf6);
        } else if constexpr (std::is_same_v<T, bool>) {
          out.push_back(x ? 0xf5 : 0xf4);
        } else if constexpr (std::is_same_v<T, std::int64_t>) {
          if (x >= 0) put_head(out, 0, static_cast<std::uint64_t>(x));
          else put_head(out, 1, static_cast<std::uint64_t>(-(x + 1)));
        } else if constexpr (std::is_same_v<T, std::string>) {
          put_head(out, 3, x.size());
          out.insert(out.end(), x.begin(), x.end());
        } else if constexpr (std::is_same_v<T, Bytes>) {
          put_head(out, 2, x.size());
          out.insert(out.end(), x.begin(), x.end());
        } else if constexpr (std::is_same_v<T, Array>) {
          put_head(out, 4, x.size());
          for (const auto& e : x) encode(out, e);
        } else if constexpr (std::is_same_v<T, Map>) {
          std::vector<const Map::value_type*> entries;
          entries.reserve(x.size());
          for (const auto& kv : x) entries.push_back(&kv);
          std::sort(entries.begin(), entries.end(),
                    [](auto* a, auto* b) { return canonical_key_less(a->first, b->first); });
          put_head(out, 5, entries.size());
          for (const auto* kv : entries) {
            put_head(out, 3, kv->first.size());
            out.insert(out.end(), kv->first.begin(), kv->first.end());
            encode(out, kv->second);
          }
        } else if constexpr (std::is_same_v<T, Cid>) {
          put_head(out, 6, 42);
          Bytes bin = x.to_binary();
          put_head(out, 2, bin.size() + 1);
          out.push_back(0x00);
          out.insert(out.end(), bin.begin(), bin.end());
        } else {
          fail(Errc::UnsupportedValue, "floating-point values are not allowed in canonical records");
        }
      },
      value.v);
}

class Decoder {
 public:
  explicit Decoder(ByteView in) : in_(in) {}

  Value value(int depth = 0) {
    require(depth < 64, Errc::MalformedEncoding, "nesting too deep");
    auto [major, info, arg] = head();
    switch (major) {
      case 0:
        require(arg <= static_cast<std::uint64_t>(INT64_MAX), Errc::UnsupportedValue, "integer out of range");
        return Value(static_cast<std::int64_t>(arg));
      case 1:
        require(arg <= static_cast<std::uint64_t>(INT64_MAX), Errc::UnsupportedValue, "integer out of range");
        return Value(-1 - static_cast<std::int64_t>(arg));
      case 2: return Value(take(arg));
      case 3: {
        Bytes b = take(arg);
        return Value(std::string(b.begin(), b.end()));
      }
      case 4: {
        Array a;
        for (std::uint64_t i = 0; i < arg; ++i) a.push_back(value(depth + 1));
        return Value(std::move(a));
      }
      case 5: {
        Map m;
        std::string prev;
        for (std::uint64_t i = 0; i < arg; ++i) {
          auto [kmajor, kinfo, klen] = head();
          require(kmajor == 3, Errc::UnsupportedValue, "map keys must be text");
          Bytes kb = take(klen);
          std::string key(kb.begin(), kb.end());
          require(i == 0 || canonical_key_less(prev, key), Errc::MalformedEncoding,
                  "map keys not in canonical order");
          prev = key;
          m.emplace(std::move(key), value(depth + 1));
        }
        return Value(std::move(m));
      }
      case 6: {
        require(arg == 42, Errc::UnsupportedValue, "only tag 42 (CID link) is permitted");
        auto [bmajor, binfo, blen] = head();
        require(bmajor == 2 && blen >= 1, Errc::MalformedEncoding, "tag 42 must wrap a byte string");
        Bytes b = take(blen);
        require(b[0] == 0x00, Errc::MalformedEncoding, "CID link must start with identity multibase");
        return Value(Cid::from_binary(ByteView(b).subspan(1)));
      }
      default:
        if (info == 20) return Value(false);
        if (info == 21) return Value(true);
        if (info == 22) return Value(Null{});
        fail(Errc::UnsupportedValue, "floats and simple values are not allowed");
    }
  }

  bool done() const { return pos_ == in_.size(); }

 private:
  struct Head {
    std::uint8_t major;
    std::uint8_t info;
    std::uint64_t arg;
  };

  Head head() {
    require(pos_ < in_.size(), Errc::MalformedEncoding, "truncated CBOR");
    std::uint8_t ib = in_[pos_++];
    std::uint8_t major = ib >> 5;
    std::uint8_t info = ib & 0x1f;
    if (major == 7) {
      require(info == 20 || info == 21 || info == 22, Errc::UnsupportedValue,
              "floats and simple values are not allowed");
      return {major, info, 0};
    }
    std::uint64_t arg = 0;
    if (info < 24) {
      arg = info;
    } else if (info <= 27) {
      int n = 1 << (info - 24);
      require(pos_ + static_cast<std::size_t>(n) <= in_.size(), Errc::MalformedEncoding, "truncated CBOR");
      for (int i = 0; i < n; ++i) arg = (arg << 8) | in_[pos_++];
      static constexpr std::uint64_t min_for[] = {24, 0x100, 0x10000, 0x100000000ULL};
      require(arg >= min_for[info - 24], Errc::MalformedEncoding, "non-minimal integer encoding");
    } else {
      fail(Errc::MalformedEncoding, "indefinite lengths are not allowed");
    }
    return {major, info, arg};
  }

  Bytes take(std::uint64_t n) {
    require(n <= in_.size() - pos_, Errc::MalformedEncoding, "truncated CBOR");
    Bytes out(in_.begin() + static_cast<std::ptrdiff_t>(pos_),
              in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }

  ByteView in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Bytes serialize(const Value& value) {
  Bytes out;
  detail::encode(out, value);
  return out;
}

// Strict decoder: accepts exactly the canonical encodings `serialize` emits.
inline Value parse(ByteView bytes) {
  detail::Decoder d(bytes);
  Value v = d.value();
  require(d.done(), Errc::MalformedEncoding, "trailing bytes after CBOR item");
  return v;
}

}  // namespace beacon::cbor
