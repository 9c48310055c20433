#pragma once

#include <gmpxx.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include "beacon/bytes.hpp"
#include "beacon/cbor.hpp"
#include "beacon/crypto.hpp"
#include "beacon/error.hpp"
#include "beacon/primes.hpp"
#include "beacon/random_source.hpp"

// Iterated RSA encryption x <- x^e mod n as a bit generator, emitting the
// least significant bit of every state.
namespace beacon::rsa {

using Factorization = std::vector<std::pair<mpz_class, unsigned>>;

inline constexpr unsigned kProductionPrimeBits = 1536;
inline constexpr unsigned kToyPrimeBits = 32;

inline mpz_class from_bytes(ByteView b) {
  mpz_class r;
  if (!b.empty()) mpz_import(r.get_mpz_t(), b.size(), 1, 1, 1, 0, b.data());
  return r;
}

inline Bytes to_bytes(const mpz_class& v) {
  Bytes out((mpz_sizeinbase(v.get_mpz_t(), 2) + 7) / 8);
  std::size_t written = 0;
  if (v != 0) mpz_export(out.data(), &written, 1, 1, 1, 0, v.get_mpz_t());
  out.resize(written);
  return out;
}

inline bool fits_u64(const mpz_class& v) { return v >= 0 && mpz_sizeinbase(v.get_mpz_t(), 2) <= 64; }

inline nt::u64 to_u64(const mpz_class& v) {
  require(fits_u64(v), Errc::TooLarge, "value exceeds 64 bits");
  nt::u64 r = 0;
  mpz_export(&r, nullptr, -1, sizeof r, 0, 0, v.get_mpz_t());
  return r;
}

inline mpz_class from_u64(nt::u64 v) {
  mpz_class r;
  mpz_import(r.get_mpz_t(), 1, -1, sizeof v, 0, 0, &v);
  return r;
}

// Deterministic below 2^64; 128 Miller-Rabin rounds (after BPSW) above.
inline bool is_probable_prime(const mpz_class& n) {
  if (n < 2) return false;
  if (fits_u64(n)) return nt::is_prime(to_u64(n));
  return mpz_probab_prime_p(n.get_mpz_t(), 128) > 0;
}

inline mpz_class lcm(const mpz_class& a, const mpz_class& b) {
  mpz_class r;
  mpz_lcm(r.get_mpz_t(), a.get_mpz_t(), b.get_mpz_t());
  return r;
}

inline mpz_class gcd(const mpz_class& a, const mpz_class& b) {
  mpz_class r;
  mpz_gcd(r.get_mpz_t(), a.get_mpz_t(), b.get_mpz_t());
  return r;
}

inline mpz_class carmichael(const Factorization& f) {
  mpz_class lam = 1;
  std::vector<mpz_class> seen;
  for (const auto& [p, a] : f) {
    require(a >= 1 && is_probable_prime(p), Errc::InvalidFactorization, "factor is not a prime power");
    require(std::find(seen.begin(), seen.end(), p) == seen.end(), Errc::InvalidFactorization,
            "repeated prime in factorization");
    seen.push_back(p);
    mpz_class part;
    if (p == 2) {
      part = a == 1 ? mpz_class(1) : a == 2 ? mpz_class(2) : mpz_class(mpz_class(1) << (a - 2));
    } else {
      mpz_pow_ui(part.get_mpz_t(), p.get_mpz_t(), a - 1);
      part *= p - 1;
    }
    lam = lcm(lam, part);
  }
  return lam;
}

namespace detail {

inline nt::u64 pollard_rho(nt::u64 n) {
  if (n % 2 == 0) return 2;
  for (nt::u64 c = 1;; ++c) {
    auto f = [&](nt::u64 v) { return (nt::mulmod(v, v, n) + c) % n; };
    nt::u64 x = 2, y = 2, d = 1;
    while (d == 1) {
      x = f(x);
      y = f(f(y));
      d = std::gcd(x > y ? x - y : y - x, n);
    }
    if (d != n) return d;
  }
}

inline void factor_into(nt::u64 n, std::map<nt::u64, unsigned>& out) {
  if (n == 1) return;
  for (nt::u64 p : {2u, 3u, 5u, 7u, 11u, 13u})
    while (n % p == 0) {
      ++out[p];
      n /= p;
    }
  if (n == 1) return;
  if (nt::is_prime(n)) {
    ++out[n];
    return;
  }
  nt::u64 d = pollard_rho(n);
  factor_into(d, out);
  factor_into(n / d, out);
}

}  // namespace detail

// Complete factorization of a 64-bit integer.
inline Factorization factor(const mpz_class& n) {
  require(n >= 1, Errc::InvalidArgument, "can only factor positive integers");
  std::map<nt::u64, unsigned> m;
  detail::factor_into(to_u64(n), m);
  Factorization f;
  for (const auto& [p, a] : m) f.emplace_back(from_u64(p), a);
  return f;
}

inline mpz_class product(const Factorization& f) {
  mpz_class n = 1;
  for (const auto& [p, a] : f) {
    mpz_class pa;
    mpz_pow_ui(pa.get_mpz_t(), p.get_mpz_t(), a);
    n *= pa;
  }
  return n;
}

inline mpz_class phi(const Factorization& f) {
  mpz_class r = 1;
  for (const auto& [p, a] : f) {
    mpz_class pa;
    mpz_pow_ui(pa.get_mpz_t(), p.get_mpz_t(), a - 1);
    r *= pa * (p - 1);
  }
  return r;
}

// Multiplicative order of x modulo n, given the primes dividing a multiple
// `m` of it (m = lambda(n) in practice).
inline mpz_class order(const mpz_class& x, const mpz_class& n, const mpz_class& m, const std::vector<mpz_class>& primes) {
  require(n > 1 && gcd(x, n) == 1, Errc::InvalidArgument, "order needs a unit");
  mpz_class t = m, r;
  for (const auto& q : primes) {
    while (t % q == 0) {
      mpz_class s = t / q;
      mpz_powm(r.get_mpz_t(), x.get_mpz_t(), s.get_mpz_t(), n.get_mpz_t());
      if (r != 1) break;
      t = s;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Structured primes p = 2 a1 p1 + 1, p1 = 2 a2 p2 + 1

struct PrimeChainSpec {
  unsigned total_bits = kProductionPrimeBits;
  double frac1 = 0.75;
  double frac2 = 2.0 / 3.0;

  void validate() const {
    require(total_bits >= 5, Errc::InvalidArgument, "chain primes need at least 5 bits");
    require(frac1 > 0.5 && frac1 < 1 && frac2 > 0.5 && frac2 < 1, Errc::InvalidArgument,
            "fractions must lie in (1/2, 1)");
  }
};

struct ChainPrime {
  mpz_class p, p1, p2, a1, a2;
};

inline bool size_ok(const mpz_class& big, const mpz_class& small, double frac) {
  // small > big^frac, compared in logs with a margin far above double error
  double lb = std::log2(big.get_d()), ls = std::log2(small.get_d());
  if (std::fabs(ls - frac * lb) > 1e-6 * lb) return ls > frac * lb;
  // Borderline: exact integer check with frac ~ num/720 (exact for 3/4, 2/3).
  long den = 720;
  auto num = static_cast<unsigned long>(std::lround(frac * static_cast<double>(den)));
  mpz_class l, r;
  mpz_pow_ui(l.get_mpz_t(), small.get_mpz_t(), static_cast<unsigned long>(den));
  mpz_pow_ui(r.get_mpz_t(), big.get_mpz_t(), num);
  return l > r;
}

inline bool check_chain(const ChainPrime& c, const PrimeChainSpec& spec) {
  return c.a1 >= 1 && c.a2 >= 1 && c.p == 2 * c.a1 * c.p1 + 1 && c.p1 == 2 * c.a2 * c.p2 + 1 &&
         mpz_sizeinbase(c.p.get_mpz_t(), 2) == spec.total_bits && is_probable_prime(c.p) &&
         is_probable_prime(c.p1) && is_probable_prime(c.p2) && size_ok(c.p, c.p1, spec.frac1) &&
         size_ok(c.p1, c.p2, spec.frac2);
}

// Uniform integer with exactly `bits` bits.
inline mpz_class random_bits(RandomSource& rng, unsigned bits) {
  require(bits >= 1, Errc::InvalidArgument, "zero-width random integer");
  Bytes b = rng.read((bits + 7) / 8);
  if (bits % 8) b[0] &= static_cast<std::uint8_t>((1u << (bits % 8)) - 1);
  mpz_class r = from_bytes(b);
  mpz_setbit(r.get_mpz_t(), bits - 1);
  return r;
}

// Uniform in [lo, hi].
inline mpz_class random_range(RandomSource& rng, const mpz_class& lo, const mpz_class& hi) {
  require(lo <= hi, Errc::InvalidArgument, "empty range");
  mpz_class span = hi - lo + 1;
  auto bits = static_cast<unsigned>(mpz_sizeinbase(span.get_mpz_t(), 2));
  for (;;) {
    Bytes b = rng.read((bits + 7) / 8);
    if (bits % 8) b[0] &= static_cast<std::uint8_t>((1u << (bits % 8)) - 1);
    mpz_class r = from_bytes(b);
    if (r < span) return lo + r;
  }
}

namespace detail {

// Searches cofactors a from a random start for prime 2 a q + 1 of exactly
// `bits` bits.
inline std::optional<std::pair<mpz_class, mpz_class>> lift(const mpz_class& q, unsigned bits, RandomSource& rng,
                                                           unsigned attempts) {
  mpz_class lo = ((mpz_class(1) << (bits - 1)) - 1 + 2 * q - 1) / (2 * q);
  mpz_class hi = ((mpz_class(1) << bits) - 2) / (2 * q);
  if (lo < 1) lo = 1;
  if (lo > hi) return std::nullopt;
  mpz_class a = random_range(rng, lo, hi);
  for (unsigned k = 0; k < attempts; ++k) {
    mpz_class p = 2 * a * q + 1;
    if (is_probable_prime(p)) return std::pair{a, p};
    a = a == hi ? lo : a + 1;
  }
  return std::nullopt;
}

}  // namespace detail

inline ChainPrime gen_chain_prime(const PrimeChainSpec& spec, RandomSource& rng, unsigned max_rounds = 64) {
  spec.validate();
  // One spare bit at each level makes the size conditions hold by bit
  // length alone; tiny primes have no room and rely on the final check.
  unsigned spare = spec.total_bits >= 24 ? 1 : 0;
  auto b1 = static_cast<unsigned>(std::ceil(spec.frac1 * spec.total_bits)) + spare;
  auto b2 = static_cast<unsigned>(std::ceil(spec.frac2 * b1)) + spare;
  unsigned attempts = 40 * spec.total_bits + 64;
  for (unsigned round = 0; round < max_rounds; ++round) {
    mpz_class p2;
    do p2 = random_bits(rng, b2);
    while (!is_probable_prime(p2));
    auto l1 = detail::lift(p2, b1, rng, attempts);
    if (!l1) continue;
    auto l0 = detail::lift(l1->second, spec.total_bits, rng, attempts);
    if (!l0) continue;
    ChainPrime c{l0->second, l1->second, p2, l0->first, l1->first};
    if (check_chain(c, spec)) return c;
  }
  fail(Errc::GenerationTimeout, "no chain prime found within the attempt budget");
}

// ---------------------------------------------------------------------------
// Generator state

struct RsaPrngState {
  mpz_class n, e, x;
  std::uint64_t bits_emitted = 0;

  void validate() const {
    require(n > 3, Errc::InvalidState, "modulus too small");
    require(e > 1, Errc::InvalidState, "exponent must exceed 1");
    require(x > 1 && x < n, Errc::InvalidState, "state must satisfy 1 < x < n");
    require(gcd(x, n) == 1, Errc::InvalidState, "state must be coprime to the modulus");
  }

  cbor::Value to_value() const {
    return cbor::Map{{"bits_emitted", bits_emitted}, {"e", to_bytes(e)}, {"n", to_bytes(n)}, {"x", to_bytes(x)}};
  }
  static RsaPrngState from_value(const cbor::Value& v) {
    RsaPrngState s;
    s.n = from_bytes(v.at("n").as<Bytes>("n"));
    s.e = from_bytes(v.at("e").as<Bytes>("e"));
    s.x = from_bytes(v.at("x").as<Bytes>("x"));
    s.bits_emitted = static_cast<std::uint64_t>(v.at("bits_emitted").as_int("bits_emitted"));
    s.validate();
    return s;
  }
};

// Smallest prime >= 65537 coprime to phi.
inline mpz_class choose_exponent(const mpz_class& phi_n) {
  mpz_class e = 65537;
  while (!is_probable_prime(e) || gcd(e, phi_n) != 1) ++e;
  return e;
}

inline RsaPrngState make_state(const mpz_class& n, const mpz_class& e, const mpz_class& x0) {
  RsaPrngState s{n, e, x0, 0};
  s.validate();
  return s;
}

// Draws x0 from `rng` until 1 < x0 < n and gcd(x0, n) = 1.
inline mpz_class draw_seed(const mpz_class& n, RandomSource& rng) {
  for (;;) {
    mpz_class x = random_range(rng, 2, n - 1);
    if (gcd(x, n) == 1) return x;
  }
}

inline RsaPrngState state_from_primes(const mpz_class& p, const mpz_class& q, RandomSource& rng) {
  require(p != q && is_probable_prime(p) && is_probable_prime(q), Errc::InvalidFactorization,
          "modulus needs two distinct primes");
  mpz_class n = p * q;
  return make_state(n, choose_exponent((p - 1) * (q - 1)), draw_seed(n, rng));
}

// Fresh generator with two chain primes of `prime_bits` bits each and a
// modulus of exactly 2 * prime_bits bits. Key generation uses `rng`
// throughout, so a seeded source reproduces a key.
inline RsaPrngState generate(unsigned prime_bits, RandomSource& rng) {
  PrimeChainSpec spec;
  spec.total_bits = prime_bits;
  mpz_class p = gen_chain_prime(spec, rng).p, q;
  do q = gen_chain_prime(spec, rng).p;
  while (q == p || mpz_sizeinbase(mpz_class(p * q).get_mpz_t(), 2) != 2 * prime_bits);
  return state_from_primes(p, q, rng);
}

inline void next_state(RsaPrngState& s) {
  mpz_powm(s.x.get_mpz_t(), s.x.get_mpz_t(), s.e.get_mpz_t(), s.n.get_mpz_t());
  ++s.bits_emitted;
}

inline bool next_bit(RsaPrngState& s) {
  next_state(s);
  return mpz_odd_p(s.x.get_mpz_t()) != 0;
}

inline BitString next_bits(RsaPrngState& s, std::size_t count) {
  BitString out(count);
  for (std::size_t i = 0; i < count; ++i) out.set(i, next_bit(s));
  return out;
}

inline Bytes next_block512(RsaPrngState& s) { return next_bits(s, 512).bytes(); }

// RandomSource adapter; reads whole bytes from the bit stream.
class RsaRandom : public RandomSource {
 public:
  explicit RsaRandom(RsaPrngState s) : s_(std::move(s)) { s_.validate(); }
  Bytes read(std::size_t n) override { return next_bits(s_, 8 * n).bytes(); }
  std::string name() const override { return "rsa-iteration"; }
  const RsaPrngState& state() const { return s_; }

 private:
  RsaPrngState s_;
};

// ---------------------------------------------------------------------------
// Period analysis for factorable moduli

struct PeriodDiagnostics {
  mpz_class order;          // ord_n(x0)
  mpz_class period;         // steps until the state returns to x0
  mpz_class lambda;         // lambda(n)
  mpz_class lambda_lambda;  // lambda(lambda(n))
};

inline PeriodDiagnostics period_diagnostics(const Factorization& n_factored, const mpz_class& e, const mpz_class& x0) {
  for (const auto& [p, a] : n_factored)
    require(fits_u64(p - 1), Errc::TooLarge, "modulus too large to analyse");
  mpz_class n = product(n_factored);
  RsaPrngState probe{n, e, x0, 0};
  probe.validate();
  require(gcd(e, phi(n_factored)) == 1, Errc::InvalidArgument, "exponent not coprime to phi(n)");

  PeriodDiagnostics d;
  d.lambda = carmichael(n_factored);
  // Primes of lambda(n): the primes of n with exponent > 1 and those of p - 1.
  std::map<mpz_class, unsigned> lam_primes;
  for (const auto& [p, a] : n_factored) {
    if (a > 1) lam_primes[p] = 0;
    for (const auto& [q, b] : factor(p - 1)) lam_primes[q] = 0;
  }
  std::vector<mpz_class> primes;
  for (const auto& [q, b] : lam_primes) primes.push_back(q);
  d.order = order(x0, n, d.lambda, primes);

  Factorization lam_f;
  for (const auto& q : primes) {
    unsigned a = 0;
    mpz_class l = d.lambda;
    while (l % q == 0) {
      l /= q;
      ++a;
    }
    if (a) lam_f.emplace_back(q, a);
  }
  d.lambda_lambda = carmichael(lam_f);

  // x_k = x0^(e^k), which is x0 again exactly when e^k = 1 mod ord_n(x0).
  Factorization t_f;
  for (const auto& [q, a] : lam_f) {
    unsigned b = 0;
    mpz_class t = d.order;
    while (t % q == 0) {
      t /= q;
      ++b;
    }
    if (b) t_f.emplace_back(q, b);
  }
  std::map<mpz_class, unsigned> lt_primes;
  for (const auto& [q, b] : t_f) {
    if (b > 1) lt_primes[q] = 0;
    for (const auto& [r, c] : factor(q - 1)) lt_primes[r] = 0;
  }
  std::vector<mpz_class> lt;
  for (const auto& [q, b] : lt_primes) lt.push_back(q);
  d.period = d.order == 1 ? mpz_class(1) : order(e % d.order, d.order, carmichael(t_f), lt);
  return d;
}

// ---------------------------------------------------------------------------
// Encrypted persistence

inline Bytes seal_state(const RsaPrngState& s, std::string_view passphrase) {
  return crypto::seal(passphrase, cbor::serialize(s.to_value()));
}

inline RsaPrngState open_state(ByteView sealed, std::string_view passphrase) {
  return RsaPrngState::from_value(cbor::parse(crypto::open(passphrase, sealed)));
}

}  // namespace beacon::rsa
