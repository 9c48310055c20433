#pragma once

#include <gmpxx.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "beacon/error.hpp"

namespace beacon::pef {

// Outcome/setting index for p(ab|xy): a*8 + b*4 + x*2 + y.
constexpr int cz_index(int a, int b, int x, int y) { return a * 8 + b * 4 + x * 2 + y; }
constexpr int setting_of(int i) { return i & 3; }

struct ConditionalDistribution {
  std::array<double, 16> p{};

  double operator[](int i) const { return p[static_cast<std::size_t>(i)]; }
  double& operator[](int i) { return p[static_cast<std::size_t>(i)]; }
  double at(int a, int b, int x, int y) const { return p[static_cast<std::size_t>(cz_index(a, b, x, y))]; }

  bool normalized(double tol = 1e-12) const {
    for (int z = 0; z < 4; ++z) {
      double s = 0;
      for (int c = 0; c < 4; ++c) s += p[static_cast<std::size_t>(c * 4 + z)];
      if (std::abs(s - 1) > tol) return false;
    }
    for (double v : p)
      if (v < -tol) return false;
    return true;
  }

  bool no_signaling(double tol = 1e-9) const {
    for (int x = 0; x < 2; ++x) {
      double a0y0 = at(0, 0, x, 0) + at(0, 1, x, 0), a0y1 = at(0, 0, x, 1) + at(0, 1, x, 1);
      if (std::abs(a0y0 - a0y1) > tol) return false;
    }
    for (int y = 0; y < 2; ++y) {
      double b0x0 = at(0, 0, 0, y) + at(1, 0, 0, y), b0x1 = at(0, 0, 1, y) + at(1, 0, 1, y);
      if (std::abs(b0x0 - b0x1) > tol) return false;
    }
    return true;
  }

  bool valid() const { return normalized() && no_signaling(); }
};

using Settings = std::array<double, 4>;

inline double correlator(const ConditionalDistribution& p, int x, int y) {
  return p.at(0, 0, x, y) + p.at(1, 1, x, y) - p.at(0, 1, x, y) - p.at(1, 0, x, y);
}

// The 8 CHSH symmetrizations: sign * (sum of E_xy with one term negated).
// Returned as integer coefficient vectors over the 16 coordinates.
inline std::array<std::array<int, 16>, 8> chsh_forms() {
  std::array<std::array<int, 16>, 8> out{};
  int k = 0;
  for (int flip = 0; flip < 4; ++flip)
    for (int sign : {1, -1}) {
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          for (int x = 0; x < 2; ++x)
            for (int y = 0; y < 2; ++y) {
              int s = sign * ((a ^ b) ? -1 : 1) * ((x * 2 + y) == flip ? -1 : 1);
              out[static_cast<std::size_t>(k)][static_cast<std::size_t>(cz_index(a, b, x, y))] = s;
            }
      ++k;
    }
  return out;
}

inline double chsh_value(const ConditionalDistribution& p, int k) {
  static const auto forms = chsh_forms();
  double s = 0;
  for (int i = 0; i < 16; ++i) s += forms[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)] * p[i];
  return s;
}

// 16 local deterministic boxes followed by the 8 PR-type boxes.
inline std::vector<ConditionalDistribution> ns_vertices() {
  std::vector<ConditionalDistribution> out;
  for (int f = 0; f < 16; ++f) {
    int a0 = (f >> 3) & 1, a1 = (f >> 2) & 1, b0 = (f >> 1) & 1, b1 = f & 1;
    ConditionalDistribution d;
    for (int x = 0; x < 2; ++x)
      for (int y = 0; y < 2; ++y) d[cz_index(x ? a1 : a0, y ? b1 : b0, x, y)] = 1;
    out.push_back(d);
  }
  for (int g = 0; g < 8; ++g) {
    int alpha = (g >> 2) & 1, beta = (g >> 1) & 1, gamma = g & 1;
    ConditionalDistribution d;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int x = 0; x < 2; ++x)
          for (int y = 0; y < 2; ++y)
            if ((a ^ b) == ((x & y) ^ (alpha & x) ^ (beta & y) ^ gamma)) d[cz_index(a, b, x, y)] = 0.5;
    out.push_back(d);
  }
  return out;
}

// Exact numbers of the form a + b*sqrt(2) with rational a, b.
struct Surd {
  mpq_class a, b;

  Surd() = default;
  Surd(mpq_class a_, mpq_class b_ = 0) : a(std::move(a_)), b(std::move(b_)) {}
  static Surd from_double(double v) { return Surd(mpq_class(v)); }

  friend Surd operator+(const Surd& x, const Surd& y) { return {x.a + y.a, x.b + y.b}; }
  friend Surd operator-(const Surd& x, const Surd& y) { return {x.a - y.a, x.b - y.b}; }
  friend Surd operator*(const Surd& x, const Surd& y) { return {x.a * y.a + 2 * x.b * y.b, x.a * y.b + x.b * y.a}; }
  friend Surd operator/(const Surd& x, const Surd& y) {
    mpq_class den = y.a * y.a - 2 * y.b * y.b;
    require(den != 0, Errc::NumericalDegeneracy, "division by zero surd");
    Surd num = x * Surd(y.a, -y.b);
    return {num.a / den, num.b / den};
  }
  friend bool operator==(const Surd& x, const Surd& y) { return x.a == y.a && x.b == y.b; }

  int sign() const {
    int sa = sgn(a), sb = sgn(b);
    if (sa == 0) return sb;
    if (sb == 0 || sa == sb) return sa;
    // opposite signs: compare a^2 with 2 b^2
    int c = cmp(mpq_class(a * a), mpq_class(2 * b * b));
    return c == 0 ? 0 : (c > 0 ? sa : sb);
  }

  double to_double() const {
    return static_cast<double>(static_cast<long double>(a.get_d()) +
                               static_cast<long double>(b.get_d()) * std::sqrt(2.0L));
  }
};

namespace detail {

struct ExactVertex {
  std::array<Surd, 16> p;
  std::uint32_t tight = 0;  // bits 0..15 positivity, 16.. added cuts
};

inline Surd dot(const std::array<int, 16>& c, const std::array<Surd, 16>& p) {
  Surd s;
  for (std::size_t i = 0; i < 16; ++i)
    if (c[i] != 0) s = s + Surd(mpq_class(c[i])) * p[i];
  return s;
}

}  // namespace detail

// Extreme points of conv(vertices) cut by the 8 CHSH half-spaces S_k <= bound.
// Double description: each cut keeps the satisfying vertices and adds the
// crossing points of edges that straddle it; edges are found combinatorially.
inline std::vector<ConditionalDistribution> tsirelson_cut(const std::vector<ConditionalDistribution>& vertices,
                                                          const Surd& bound = Surd(0, 2)) {
  using detail::ExactVertex;
  std::vector<ExactVertex> vs;
  for (const auto& v : vertices) {
    ExactVertex e;
    for (int i = 0; i < 16; ++i) {
      e.p[static_cast<std::size_t>(i)] = Surd::from_double(v[i]);
      if (v[i] == 0) e.tight |= 1u << i;
    }
    vs.push_back(std::move(e));
  }
  const auto forms = chsh_forms();
  constexpr int kDim = 8;
  for (int k = 0; k < 8; ++k) {
    const std::uint32_t bit = 1u << (16 + k);
    std::vector<Surd> slack;
    for (const auto& v : vs) slack.push_back(bound - detail::dot(forms[static_cast<std::size_t>(k)], v.p));
    std::vector<ExactVertex> next;
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < vs.size(); ++i) {
      int s = slack[i].sign();
      if (s >= 0) {
        next.push_back(vs[i]);
        if (s == 0) next.back().tight |= bit;
        if (s > 0) pos.push_back(i);
      } else {
        neg.push_back(i);
      }
    }
    for (std::size_t i : pos)
      for (std::size_t j : neg) {
        std::uint32_t common = vs[i].tight & vs[j].tight;
        if (std::popcount(common) < kDim - 1) continue;
        bool adjacent = true;
        for (std::size_t u = 0; u < vs.size() && adjacent; ++u)
          if (u != i && u != j && (vs[u].tight & common) == common) adjacent = false;
        if (!adjacent) continue;
        ExactVertex e;
        Surd den = slack[i] - slack[j];
        for (std::size_t c = 0; c < 16; ++c) e.p[c] = (slack[i] * vs[j].p[c] - slack[j] * vs[i].p[c]) / den;
        e.tight = common | bit;
        next.push_back(std::move(e));
      }
    vs = std::move(next);
  }
  std::vector<ConditionalDistribution> out;
  for (const auto& v : vs) {
    ConditionalDistribution d;
    for (int i = 0; i < 16; ++i) d[i] = v.p[static_cast<std::size_t>(i)].to_double();
    bool ok = d.valid();
    for (int k = 0; k < 8 && ok; ++k) ok = chsh_value(d, k) <= bound.to_double() + 1e-9;
    require(ok, Errc::NumericalDegeneracy, "cut vertex violates a defining constraint");
    out.push_back(d);
  }
  return out;
}

}  // namespace beacon::pef
