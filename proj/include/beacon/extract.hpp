#pragma once

#if defined(__PCLMUL__)
#include <wmmintrin.h>
#endif

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <thread>
#include <vector>

#include "beacon/bytes.hpp"
#include "beacon/crypto.hpp"
#include "beacon/primes.hpp"
#include "beacon/threshold.hpp"

namespace beacon::trevisan {

using u64 = std::uint64_t;

using nt::is_prime;

// ---------------------------------------------------------------------------
// GF(2)[x] arithmetic. Bit i of word i/64 is the coefficient of x^i.

namespace gf2 {

inline void clmul(u64 a, u64 b, u64& lo, u64& hi) {
#if defined(__PCLMUL__)
  __m128i r = _mm_clmulepi64_si128(_mm_set_epi64x(0, static_cast<long long>(a)),
                                   _mm_set_epi64x(0, static_cast<long long>(b)), 0);
  lo = static_cast<u64>(_mm_cvtsi128_si64(r));
  hi = static_cast<u64>(_mm_cvtsi128_si64(_mm_unpackhi_epi64(r, r)));
#else
  lo = hi = 0;
  for (int i = 0; i < 64; ++i)
    if ((b >> i) & 1) {
      lo ^= a << i;
      if (i) hi ^= a >> (64 - i);
    }
#endif
}

using Poly = std::vector<u64>;

inline int degree(const Poly& p) {
  for (std::size_t i = p.size(); i-- > 0;)
    if (p[i]) return static_cast<int>(i * 64 + 63 - static_cast<std::size_t>(std::countl_zero(p[i])));
  return -1;
}

inline void xor_shifted(Poly& acc, const Poly& p, int shift) {
  std::size_t ws = static_cast<std::size_t>(shift / 64);
  int bs = shift % 64;
  std::size_t need = p.size() + ws + 1;
  if (acc.size() < need) acc.resize(need, 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc[i + ws] ^= p[i] << bs;
    if (bs) acc[i + ws + 1] ^= p[i] >> (64 - bs);
  }
}

inline Poly mod(Poly a, const Poly& m) {
  int dm = degree(m);
  require(dm >= 0, Errc::InvalidArgument, "polynomial modulus is zero");
  for (int da = degree(a); da >= dm; da = degree(a)) xor_shifted(a, m, da - dm);
  a.resize(static_cast<std::size_t>(dm / 64 + 1), 0);
  return a;
}

inline Poly gcd(Poly a, Poly b) {
  while (degree(b) >= 0) {
    a = mod(std::move(a), b);
    std::swap(a, b);
  }
  return a;
}

}  // namespace gf2

// GF(2^s) for 2 <= s <= 256 with modulus x^s + g(x).
class Gf2Field {
 public:
  static constexpr int kWords = 4;
  using Elem = std::array<u64, kWords>;

  Gf2Field(int s, gf2::Poly low) : s_(s), words_((s + 63) / 64), g_(std::move(low)) {
    require(s >= 2 && s <= 64 * kWords, Errc::InvalidArgument, "field degree out of range");
    require(gf2::degree(g_) < s, Errc::InvalidArgument, "modulus tail must have degree below s");
    g_.resize(static_cast<std::size_t>(gf2::degree(g_) / 64 + 1), 0);
  }

  // The irreducible x^s + g with the smallest g (as an integer).
  static const Gf2Field& standard(int s) {
    static std::mutex mu;
    static std::map<int, std::unique_ptr<Gf2Field>> cache;
    std::lock_guard lk(mu);
    auto& slot = cache[s];
    if (!slot) {
      for (u64 g = 1;; g += 2) {
        Gf2Field f(s, gf2::Poly{g});
        if (f.modulus_irreducible()) {
          slot = std::make_unique<Gf2Field>(std::move(f));
          break;
        }
        require(g < (u64{1} << 40), Errc::InvalidState, "no irreducible polynomial found");
      }
    }
    return *slot;
  }

  int degree() const { return s_; }
  const gf2::Poly& tail() const { return g_; }
  gf2::Poly modulus() const {
    gf2::Poly m = g_;
    gf2::xor_shifted(m, gf2::Poly{1}, s_);
    return m;
  }

  Elem mul(const Elem& a, const Elem& b) const {
    std::array<u64, 2 * kWords + 1> h{};
    for (int i = 0; i < words_; ++i)
      for (int j = 0; j < words_; ++j) {
        u64 lo, hi;
        gf2::clmul(a[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(j)], lo, hi);
        h[static_cast<std::size_t>(i + j)] ^= lo;
        h[static_cast<std::size_t>(i + j + 1)] ^= hi;
      }
    reduce(h);
    Elem out{};
    for (int i = 0; i < words_; ++i) out[static_cast<std::size_t>(i)] = h[static_cast<std::size_t>(i)];
    return out;
  }

  static Elem add(const Elem& a, const Elem& b) {
    Elem out;
    for (std::size_t i = 0; i < kWords; ++i) out[i] = a[i] ^ b[i];
    return out;
  }

  // `count` bits starting at `start`, first bit most significant; bits past
  // the end of the string read as zero.
  Elem from_bits(const BitString& bits, std::size_t start, std::size_t count) const {
    Elem e{};
    for (std::size_t i = 0; i < count; ++i) {
      std::size_t pos = start + i;
      if (pos < bits.size() && bits[pos]) {
        std::size_t k = count - 1 - i;
        e[k / 64] |= u64{1} << (k % 64);
      }
    }
    return e;
  }

  static bool parity_and(const Elem& a, const Elem& b) {
    int c = 0;
    for (std::size_t i = 0; i < kWords; ++i) c += std::popcount(a[i] & b[i]);
    return c & 1;
  }

  // Rabin: x^(2^s) = x mod f and gcd(x^(2^(s/q)) - x, f) = 1 for primes q | s.
  bool modulus_irreducible() const {
    if ((g_[0] & 1) == 0) return false;
    Elem x{};
    x[0] = 2;
    auto frob = [&](int times) {
      Elem y = x;
      for (int i = 0; i < times; ++i) y = mul(y, y);
      return y;
    };
    if (frob(s_) != x) return false;
    gf2::Poly m = modulus();
    for (int q = 2; q <= s_; ++q) {
      if (s_ % q || !is_prime(static_cast<u64>(q))) continue;
      Elem y = add(frob(s_ / q), x);
      gf2::Poly p(y.begin(), y.end());
      if (gf2::degree(gf2::gcd(m, p)) != 0) return false;
    }
    return true;
  }

 private:
  template <std::size_t N>
  void reduce(std::array<u64, N>& h) const {
    const std::size_t sw = static_cast<std::size_t>(s_ / 64);
    const int sb = s_ % 64;
    for (;;) {
      // hi = h >> s
      std::array<u64, N> hi{};
      bool any = false;
      for (std::size_t i = sw; i < N; ++i) {
        u64 v = h[i] >> sb;
        if (sb && i + 1 < N) v |= h[i + 1] << (64 - sb);
        hi[i - sw] = v;
        any |= v != 0;
      }
      if (!any) return;
      // h = (h mod x^s) ^ hi * g
      for (std::size_t i = sw + 1; i < N; ++i) h[i] = 0;
      if (sb) h[sw] &= (u64{1} << sb) - 1;
      else h[sw] = 0;
      for (std::size_t i = 0; i + sw < N; ++i) {
        if (!hi[i]) continue;
        for (std::size_t j = 0; j < g_.size(); ++j) {
          u64 lo, up;
          gf2::clmul(hi[i], g_[j], lo, up);
          if (i + j < N) h[i + j] ^= lo;
          if (i + j + 1 < N) h[i + j + 1] ^= up;
        }
      }
    }
  }

  int s_;
  int words_;
  gf2::Poly g_;
};

// ---------------------------------------------------------------------------
// Parameters

inline std::uint64_t find_prime(std::uint64_t m, std::uint64_t k, double eps) {
  require(m >= 1 && k >= 1 && eps > 0 && eps < 1, Errc::InvalidArgument, "find_prime domain");
  long double lg = 2 + std::log2(static_cast<long double>(m)) + 2 * std::log2(static_cast<long double>(k)) -
                   2 * std::log2(static_cast<long double>(eps));
  auto bound = static_cast<std::uint64_t>(2 * std::ceil(lg));
  std::uint64_t p = bound + 1;
  while (!is_prime(p)) ++p;
  return p;
}

struct SeedLength {
  std::uint64_t r;
  std::uint64_t l;
};

inline SeedLength seed_length(std::uint64_t w, std::uint64_t sigma) {
  require(w >= 3 && sigma >= 1, Errc::InvalidArgument, "seed_length domain");
  const long double e = std::exp(1.0L);
  std::int64_t r = 2;
  if (sigma > 3) {
    long double num = std::log2(static_cast<long double>(sigma) - e) - std::log2(static_cast<long double>(w) - e);
    long double den = std::log2(e) - std::log2(e - 1);
    r = std::max<std::int64_t>(2, 1 + static_cast<std::int64_t>(std::ceil(num / den)));
  }
  return {static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(r) * w * w};
}

struct ExtractorParams {
  std::uint64_t m = 0;
  double k = 0;
  std::uint64_t sigma = 0;
  double eps_x = 0;
  std::uint64_t w = 0;
  std::uint64_t r = 0;
  std::uint64_t l = 0;

  static ExtractorParams derive(std::uint64_t m, double k, std::uint64_t sigma, double eps_x) {
    ExtractorParams p{m, k, sigma, eps_x};
    p.w = find_prime(m, sigma, eps_x);
    auto sl = seed_length(p.w, sigma);
    p.r = sl.r;
    p.l = sl.l;
    return p;
  }
};

// ---------------------------------------------------------------------------
// Weak design

struct WeakDesign {
  std::uint64_t w = 0;
  std::uint64_t r = 0;
  int degree = 0;
  std::vector<std::vector<std::uint32_t>> sets;
  std::vector<std::uint32_t> block;  // block of each set
};

// Output i goes to block j (outputs split evenly, in order); within a block
// the local index in base w gives the coefficients of p_i, constant term
// first, and S_i = { j*w^2 + x*w + p_i(x) : x in GF(w) }.
inline WeakDesign weak_design(std::uint64_t sigma, std::uint64_t w, std::uint64_t r, int max_degree = -1) {
  require(is_prime(w), Errc::InvalidArgument, "design parameter must be prime");
  require(r >= 1 && sigma >= 1, Errc::InvalidArgument, "weak_design domain");
  std::uint64_t per_block = (sigma + r - 1) / r;
  int c = 0;
  for (long double cap = static_cast<long double>(w); cap < per_block; cap *= w) ++c;
  if (max_degree >= 0 && c > max_degree)
    fail(Errc::CapacityExceeded, std::to_string(sigma) + " sets do not fit degree " + std::to_string(max_degree));
  require(c < static_cast<int>(w), Errc::CapacityExceeded, "design would need degree >= w");
  WeakDesign d{w, r, c, {}, {}};
  std::uint64_t base = sigma / r, rem = sigma % r, next = 0;
  for (std::uint64_t j = 0; j < r; ++j) {
    std::uint64_t count = base + (j < rem ? 1 : 0);
    for (std::uint64_t local = 0; local < count; ++local, ++next) {
      std::vector<std::uint64_t> coef;
      for (std::uint64_t v = local; v; v /= w) coef.push_back(v % w);
      std::vector<std::uint32_t> set;
      for (std::uint64_t x = 0; x < w; ++x) {
        std::uint64_t px = 0;
        for (std::size_t t = coef.size(); t-- > 0;) px = (px * x + coef[t]) % w;
        set.push_back(static_cast<std::uint32_t>(j * w * w + x * w + px));
      }
      d.sets.push_back(std::move(set));
      d.block.push_back(static_cast<std::uint32_t>(j));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Reed-Solomon then Hadamard one-bit extractor

// x is cut into s-bit coefficients, first chunk the constant term, each
// chunk read most significant bit first. The seed block supplies the
// evaluation point (first s bits) and the mask (next s-1 bits plus the last
// seed bit again).
class RshExtractor {
 public:
  RshExtractor(const BitString& x, std::uint64_t w)
      : w_(w), s_(static_cast<int>((w + 1) / 2)), field_(Gf2Field::standard(s_)) {
    std::size_t chunks = (x.size() + static_cast<std::size_t>(s_) - 1) / static_cast<std::size_t>(s_);
    coef_.reserve(chunks);
    for (std::size_t j = 0; j < chunks; ++j) coef_.push_back(field_.from_bits(x, j * static_cast<std::size_t>(s_), static_cast<std::size_t>(s_)));
  }

  bool bit(const BitString& seed_block) const {
    require(seed_block.size() == w_, Errc::SeedLengthMismatch, "seed block must have w bits");
    auto s = static_cast<std::size_t>(s_);
    Gf2Field::Elem alpha = field_.from_bits(seed_block, 0, s);
    BitString mask_bits(s);
    for (std::size_t i = 0; i + 1 < s; ++i) mask_bits.set(i, seed_block[s + i]);
    mask_bits.set(s - 1, seed_block[w_ - 1]);
    Gf2Field::Elem mask = field_.from_bits(mask_bits, 0, s);
    return Gf2Field::parity_and(evaluate(alpha), mask);
  }

  Gf2Field::Elem evaluate(const Gf2Field::Elem& alpha) const {
    Gf2Field::Elem acc{};
    for (std::size_t j = coef_.size(); j-- > 0;) acc = Gf2Field::add(field_.mul(acc, alpha), coef_[j]);
    return acc;
  }

  const Gf2Field& field() const { return field_; }

 private:
  std::uint64_t w_;
  int s_;
  const Gf2Field& field_;
  std::vector<Gf2Field::Elem> coef_;
};

inline bool rsh_bit(const BitString& x, const BitString& seed_block) {
  return RshExtractor(x, seed_block.size()).bit(seed_block);
}

inline BitString select_bits(const BitString& seed, const std::vector<std::uint32_t>& positions) {
  BitString out(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) out.set(i, seed[positions[i]]);
  return out;
}

inline BitString extract(const BitString& x, const BitString& seed, double k, std::uint64_t sigma, double eps_x,
                         unsigned threads = 0) {
  auto p = ExtractorParams::derive(x.size(), k, sigma, eps_x);
  require(k >= static_cast<double>(entropy_threshold(static_cast<std::int64_t>(sigma), eps_x)), Errc::EntropyTooLow,
          "certified entropy " + std::to_string(k) + " below threshold");
  require(seed.size() == p.l, Errc::SeedLengthMismatch,
          "seed has " + std::to_string(seed.size()) + " bits, need " + std::to_string(p.l));
  WeakDesign design = weak_design(sigma, p.w, p.r);
  RshExtractor rsh(x, p.w);
  BitString out(sigma);
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::uint64_t>(threads, sigma));
  std::vector<std::vector<bool>> parts(threads);
  std::vector<std::thread> pool;
  auto work = [&](unsigned t) {
    for (std::uint64_t i = t; i < sigma; i += threads) parts[t].push_back(rsh.bit(select_bits(seed, design.sets[i])));
  };
  if (threads == 1) {
    work(0);
  } else {
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  for (unsigned t = 0; t < threads; ++t)
    for (std::size_t j = 0; j < parts[t].size(); ++j) out.set(t + j * threads, parts[t][j]);
  return out;
}

// First l bits of SHAKE256(pulse), most significant bit of each byte first.
inline BitString expand_seed(ByteView pulse512, std::uint64_t l) {
  require(pulse512.size() == 64, Errc::InvalidArgument, "external pulse must be 512 bits");
  return BitString(crypto::shake256(pulse512, static_cast<std::size_t>((l + 7) / 8)), static_cast<std::size_t>(l));
}

}  // namespace beacon::trevisan
