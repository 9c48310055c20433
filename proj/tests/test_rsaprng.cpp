#include <gtest/gtest.h>

#include <random>

#include "beacon/randtests.hpp"
#include "beacon/rsaprng.hpp"

using namespace beacon;
using namespace beacon::rsa;

namespace {

using u64 = std::uint64_t;

bool trial_prime(u64 n) {
  if (n < 2) return false;
  for (u64 d = 2; d * d <= n; ++d)
    if (n % d == 0) return false;
  return true;
}

u64 gcd_u(u64 a, u64 b) { return b ? gcd_u(b, a % b) : a; }

u64 mulmod(u64 a, u64 b, u64 m) { return static_cast<u64>(static_cast<unsigned __int128>(a) * b % m); }

u64 brute_order(u64 x, u64 n) {
  u64 k = 1, y = x % n;
  while (y != 1) {
    y = mulmod(y, x, n);
    ++k;
  }
  return k;
}

// Largest multiplicative order over all units: the definition of lambda.
u64 brute_lambda(u64 n) {
  u64 best = 1;
  for (u64 a = 1; a < n; ++a)
    if (gcd_u(a, n) == 1) best = std::max(best, brute_order(a, n));
  return best;
}

u64 brute_cycle(u64 n, u64 e, u64 x0) {
  auto step = [&](u64 x) {
    u64 r = 1;
    for (u64 b = x, ee = e; ee; ee >>= 1, b = mulmod(b, b, n))
      if (ee & 1) r = mulmod(r, b, n);
    return r;
  };
  u64 x = step(x0), k = 1;
  while (x != x0) {
    x = step(x);
    ++k;
  }
  return k;
}

Factorization trial_factor(u64 n) {
  Factorization f;
  for (u64 d = 2; d * d <= n; ++d) {
    unsigned a = 0;
    while (n % d == 0) {
      n /= d;
      ++a;
    }
    if (a) f.emplace_back(from_u64(d), a);
  }
  if (n > 1) f.emplace_back(from_u64(n), 1);
  return f;
}

u64 random_prime(std::mt19937_64& rng, u64 lo, u64 hi) {
  std::uniform_int_distribution<u64> d(lo, hi);
  for (;;) {
    u64 p = d(rng);
    if (trial_prime(p)) return p;
  }
}

}  // namespace

TEST(Carmichael, Examples) {
  EXPECT_EQ(carmichael({{7, 1}}), 6);
  EXPECT_EQ(carmichael({{2, 3}}), 2);
  EXPECT_EQ(carmichael({{7, 1}, {11, 1}}), 30);
  EXPECT_EQ(carmichael({{2, 1}}), 1);
  EXPECT_EQ(carmichael({{2, 2}}), 2);
  EXPECT_EQ(carmichael({{2, 5}}), 8);
  EXPECT_EQ(carmichael({{3, 2}}), 6);
}

TEST(Carmichael, MatchesMaximalOrder) {
  for (u64 n = 2; n <= 600; ++n) EXPECT_EQ(carmichael(trial_factor(n)), from_u64(brute_lambda(n))) << n;
}

TEST(Carmichael, RejectsBadFactorizations) {
  EXPECT_THROW(carmichael({{6, 1}}), Error);
  EXPECT_THROW(carmichael({{7, 0}}), Error);
  EXPECT_THROW(carmichael({{7, 1}, {7, 2}}), Error);
  try {
    carmichael({{9, 1}});
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InvalidFactorization);
  }
}

TEST(Primality, DeterministicBelow64BitsAndLargeKnownPrimes) {
  for (u64 n = 0; n < 20000; ++n) EXPECT_EQ(is_probable_prime(from_u64(n)), trial_prime(n)) << n;
  mpz_class m127 = (mpz_class(1) << 127) - 1, m128 = (mpz_class(1) << 128) + 1;
  EXPECT_TRUE(is_probable_prime(m127));
  EXPECT_FALSE(is_probable_prime(m128));
  EXPECT_FALSE(is_probable_prime(m127 * m127));
}

TEST(Factor, ReproducesInput) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 200; ++t) {
    u64 n = rng() >> (rng() % 40) | 1;
    auto f = factor(from_u64(n));
    EXPECT_EQ(product(f), from_u64(n));
    for (const auto& [p, a] : f) EXPECT_TRUE(is_probable_prime(p));
  }
}

TEST(ChainPrime, ToyShape) {
  SeededRandom rng(5);
  auto c = gen_chain_prime({5}, rng);
  EXPECT_EQ(c.p, 23);
  EXPECT_EQ(c.p1, 11);
  EXPECT_EQ(c.p2, 5);
  EXPECT_EQ(c.a1, 1);
  EXPECT_EQ(c.a2, 1);
  for (u64 v : {23u, 11u, 5u}) EXPECT_TRUE(trial_prime(v));
}

TEST(ChainPrime, StructureAtSeveralSizes) {
  for (unsigned bits : {24u, 32u, 48u, 64u, 256u, 512u}) {
    SeededRandom rng(bits);
    PrimeChainSpec spec;
    spec.total_bits = bits;
    auto c = gen_chain_prime(spec, rng);
    EXPECT_TRUE(check_chain(c, spec)) << bits;
    EXPECT_EQ(mpz_sizeinbase(c.p.get_mpz_t(), 2), bits);
    EXPECT_GE(static_cast<double>(mpz_sizeinbase(c.p1.get_mpz_t(), 2)), 0.75 * bits - 1);
    EXPECT_EQ(c.p, 2 * c.a1 * c.p1 + 1);
    EXPECT_EQ(c.p1, 2 * c.a2 * c.p2 + 1);
    if (bits <= 48) {
      EXPECT_TRUE(trial_prime(to_u64(c.p)));
      EXPECT_TRUE(trial_prime(to_u64(c.p1)));
      EXPECT_TRUE(trial_prime(to_u64(c.p2)));
      // p1 divides lambda(p) = p - 1, p2 divides lambda(p - 1).
      EXPECT_EQ((c.p - 1) % c.p1, 0);
      EXPECT_EQ(carmichael(trial_factor(to_u64(c.p - 1))) % c.p2, 0);
    }
  }
}

TEST(ChainPrime, LambdaOfModulusCarriesTheLargePrimes) {
  SeededRandom rng(11);
  PrimeChainSpec spec;
  spec.total_bits = 30;
  auto a = gen_chain_prime(spec, rng);
  ChainPrime b;
  do b = gen_chain_prime(spec, rng);
  while (b.p == a.p);
  mpz_class lam = carmichael({{a.p, 1}, {b.p, 1}});
  EXPECT_EQ(lam % a.p1, 0);
  EXPECT_EQ(lam % b.p1, 0);
  auto lam_f = trial_factor(to_u64(lam));
  EXPECT_EQ(carmichael(lam_f) % a.p2, 0);
  EXPECT_EQ(carmichael(lam_f) % b.p2, 0);
}

TEST(ChainPrime, Timeout) {
  SeededRandom rng(1);
  PrimeChainSpec spec;
  spec.total_bits = 2048;
  EXPECT_THROW(gen_chain_prime(spec, rng, 0), Error);
  spec.frac1 = 1.2;
  EXPECT_THROW(gen_chain_prime(spec, rng), Error);
}

TEST(Iteration, SmallTrace) {
  auto s = make_state(77, 7, 2);
  EXPECT_TRUE(next_bit(s));
  EXPECT_EQ(s.x, 51);
  EXPECT_FALSE(next_bit(s));
  EXPECT_EQ(s.x, 72);
  EXPECT_EQ(s.bits_emitted, 2u);
}

TEST(Iteration, MatchesModularExponentiationOracle) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    u64 p = random_prime(rng, 1000, 30000), q = random_prime(rng, 1000, 30000);
    if (p == q) continue;
    u64 n = p * q, phi = (p - 1) * (q - 1);
    u64 e = to_u64(choose_exponent(from_u64(phi)));
    u64 x = 2 + rng() % (n - 3);
    if (gcd_u(x, n) != 1) continue;
    auto s = make_state(from_u64(n), from_u64(e), from_u64(x));
    auto bits = next_bits(s, 64);
    for (int k = 0; k < 64; ++k) {
      u64 y = 1, b = x, ee = e;
      for (; ee; ee >>= 1, b = mulmod(b, b, n))
        if (ee & 1) y = mulmod(y, b, n);
      x = y;
      EXPECT_EQ(bits[static_cast<std::size_t>(k)], (x & 1) == 1);
    }
    EXPECT_EQ(s.x, from_u64(x));
  }
}

TEST(Iteration, RejectsBadStates) {
  EXPECT_THROW(make_state(77, 7, 1), Error);
  EXPECT_THROW(make_state(77, 7, 0), Error);
  EXPECT_THROW(make_state(77, 7, 77), Error);
  EXPECT_THROW(make_state(77, 7, 14), Error);
}

TEST(Iteration, DeterministicStreams) {
  SeededRandom rng(4);
  auto s = generate(kToyPrimeBits, rng);
  auto a = s, b = s;
  EXPECT_EQ(next_bits(a, 4096), next_bits(b, 4096));
  Bytes blk = next_block512(a);
  EXPECT_EQ(blk.size(), 64u);
  EXPECT_EQ(blk, next_block512(b));
}

TEST(Exponent, SmallestCoprimePrime) {
  EXPECT_EQ(choose_exponent(30), 65537);
  EXPECT_EQ(choose_exponent(mpz_class(65537) * 4), 65539);
  EXPECT_EQ(choose_exponent(mpz_class(65537) * 65539 * 2), 65543);
}

TEST(Period, SmallExample) {
  auto d = period_diagnostics({{7, 1}, {11, 1}}, 7, 2);
  EXPECT_EQ(d.order, 30);
  EXPECT_EQ(d.lambda, 30);
  EXPECT_EQ(d.period, 4);
  EXPECT_EQ(brute_order(2, 77), 30u);
  EXPECT_EQ(brute_cycle(77, 7, 2), 4u);
  EXPECT_EQ(d.lambda_lambda % d.period, 0);
}

TEST(Period, RandomToyInstancesAgainstBruteForce) {
  std::mt19937_64 rng(21);
  int done = 0;
  while (done < 100) {
    u64 p = random_prime(rng, 100, 1000), q = random_prime(rng, 100, 1000);
    if (p == q) continue;
    u64 n = p * q;
    u64 x0 = 2 + rng() % (n - 3);
    if (gcd_u(x0, n) != 1) continue;
    Factorization f = p < q ? Factorization{{from_u64(p), 1}, {from_u64(q), 1}}
                            : Factorization{{from_u64(q), 1}, {from_u64(p), 1}};
    u64 e = to_u64(choose_exponent(from_u64((p - 1) * (q - 1))));
    auto d = period_diagnostics(f, from_u64(e), from_u64(x0));
    EXPECT_EQ(d.order, from_u64(brute_order(x0, n)));
    EXPECT_EQ(d.lambda % d.order, 0);
    EXPECT_EQ(d.period, from_u64(brute_cycle(n, e, x0)));
    EXPECT_EQ(d.lambda_lambda % d.period, 0);
    ++done;
  }
}

TEST(Period, OrderDividesLambdaAtToySize) {
  SeededRandom rng(99);
  for (int t = 0; t < 20; ++t) {
    PrimeChainSpec spec;
    spec.total_bits = kToyPrimeBits;
    mpz_class p = gen_chain_prime(spec, rng).p, q;
    do q = gen_chain_prime(spec, rng).p;
    while (q == p);
    if (p > q) std::swap(p, q);
    auto s = state_from_primes(p, q, rng);
    auto d = period_diagnostics({{p, 1}, {q, 1}}, s.e, s.x);
    mpz_class r;
    mpz_powm(r.get_mpz_t(), s.x.get_mpz_t(), d.order.get_mpz_t(), s.n.get_mpz_t());
    EXPECT_EQ(r, 1);
    EXPECT_EQ(d.lambda % d.order, 0);
    // Stepping `period` times returns to x0.
    mpz_class ek;
    mpz_powm(ek.get_mpz_t(), s.e.get_mpz_t(), d.period.get_mpz_t(), d.order.get_mpz_t());
    EXPECT_EQ(ek, 1);
  }
}

TEST(Period, TooLargeForProductionModuli) {
  mpz_class big = (mpz_class(1) << 127) - 1;
  try {
    period_diagnostics({{big, 1}, {7, 1}}, 65537, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TooLarge);
  }
}

TEST(Persistence, SealedRoundTrip) {
  SeededRandom rng(6);
  auto s = generate(kToyPrimeBits, rng);
  next_bits(s, 100);
  Bytes sealed = seal_state(s, "pw");
  auto back = open_state(sealed, "pw");
  EXPECT_EQ(back.n, s.n);
  EXPECT_EQ(back.e, s.e);
  EXPECT_EQ(back.x, s.x);
  EXPECT_EQ(back.bits_emitted, 100u);
  EXPECT_EQ(next_bits(back, 256), next_bits(s, 256));
  EXPECT_THROW(open_state(sealed, "wrong"), Error);
  // The modulus does not appear in clear.
  Bytes nb = to_bytes(s.n);
  EXPECT_EQ(std::search(sealed.begin(), sealed.end(), nb.begin(), nb.end()), sealed.end());
}

TEST(Statistics, ProductionSizeMonobit) {
  SeededRandom rng(2024);
  auto s = generate(kProductionPrimeBits, rng);
  EXPECT_EQ(mpz_sizeinbase(s.n.get_mpz_t(), 2), 3072u);
  auto bits = next_bits(s, 100000);
  EXPECT_GE(randtest::monobit_p(bits), 1e-4);
  EXPECT_GE(randtest::runs_p(bits), 1e-4);
}

TEST(RandTests, KnownValues) {
  // SP 800-22 worked examples: 1011010101 -> 0.527089, 1001101011 -> runs 0.147232.
  BitString a(10), b(10);
  std::string sa = "1011010101", sb = "1001101011";
  for (std::size_t i = 0; i < 10; ++i) {
    a.set(i, sa[i] == '1');
    b.set(i, sb[i] == '1');
  }
  EXPECT_NEAR(randtest::monobit_p(a), 0.527089, 1e-6);
  EXPECT_NEAR(randtest::runs_p(b), 0.147232, 1e-6);
  BitString zeros(1000);
  EXPECT_LT(randtest::monobit_p(zeros), 1e-100);
}
