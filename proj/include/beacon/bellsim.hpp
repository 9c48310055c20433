#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <thread>

#include "beacon/polytope.hpp"
#include "beacon/trialblock.hpp"

namespace beacon::bell {

using pef::ConditionalDistribution;
using pef::cz_index;

struct SourceParams {
  double amp_hh = 0.383;
  double amp_vv = 0.924;
  double p_pair = 1 - std::pow(1 - 1.0 / 363, 14);
  double eta_a = 0.81;
  double eta_b = 0.81;
  double dark = 1e-6;
  std::array<double, 4> angles{6.7, -29.26, -6.7, 29.26};  // a, a', b, b' in degrees

  // The published amplitudes are rounded to three digits, so their squares
  // sum to 1.000465; the check allows that.
  void validate() const {
    require(std::abs(amp_hh * amp_hh + amp_vv * amp_vv - 1) < 1e-3, Errc::InvalidArgument, "state amplitudes not normalized");
    for (double p : {p_pair, eta_a, eta_b, dark})
      require(p >= 0 && p <= 1, Errc::InvalidArgument, "probability out of range");
  }
};

inline constexpr double kSpeedOfLight = 299792458.0;  // m/s

inline double deg2rad(double d) { return d * std::numbers::pi / 180; }

// Single-pair projective model with efficiencies and independent dark
// clicks; outcome 1 is a click.
inline ConditionalDistribution joint_distribution(const SourceParams& p) {
  p.validate();
  ConditionalDistribution out;
  for (int x = 0; x < 2; ++x)
    for (int y = 0; y < 2; ++y) {
      double al = deg2rad(p.angles[static_cast<std::size_t>(x)]);
      double be = deg2rad(p.angles[static_cast<std::size_t>(2 + y)]);
      double amp = p.amp_hh * std::cos(al) * std::cos(be) + p.amp_vv * std::sin(al) * std::sin(be);
      double pa = std::pow(p.amp_hh * std::cos(al), 2) + std::pow(p.amp_vv * std::sin(al), 2);
      double pb = std::pow(p.amp_hh * std::cos(be), 2) + std::pow(p.amp_vv * std::sin(be), 2);
      double c_ab = p.p_pair * p.eta_a * p.eta_b * amp * amp;
      double c_a = p.p_pair * p.eta_a * pa;
      double c_b = p.p_pair * p.eta_b * pb;
      double quiet = 1 - p.dark;
      double a0 = quiet * (1 - c_a);
      double b0 = quiet * (1 - c_b);
      double p00 = quiet * quiet * (1 - c_a - c_b + c_ab);
      out[cz_index(0, 0, x, y)] = p00;
      out[cz_index(0, 1, x, y)] = a0 - p00;
      out[cz_index(1, 0, x, y)] = b0 - p00;
      out[cz_index(1, 1, x, y)] = 1 - a0 - b0 + p00;
    }
  return out;
}

// Clauser-Horne value; positive means a Bell violation.
inline double ch_value(const ConditionalDistribution& d) {
  double pa = d.at(1, 0, 0, 0) + d.at(1, 1, 0, 0);
  double pb = d.at(0, 1, 0, 0) + d.at(1, 1, 0, 0);
  return d.at(1, 1, 0, 0) + d.at(1, 1, 0, 1) + d.at(1, 1, 1, 0) - d.at(1, 1, 1, 1) - pa - pb;
}

namespace detail {

inline double unit(std::mt19937_64& g) { return static_cast<double>(g() >> 11) * 0x1.0p-53; }

inline constexpr std::uint64_t kChunk = 1u << 20;

inline std::mt19937_64 chunk_rng(std::uint64_t root, std::uint64_t chunk) {
  std::seed_seq seq{static_cast<std::uint32_t>(root), static_cast<std::uint32_t>(root >> 32),
                    static_cast<std::uint32_t>(chunk), static_cast<std::uint32_t>(chunk >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace detail

// Settings are i.i.d. with P(x=0) = P(y=0) = (1+eps_b)/2. Trials are drawn in
// fixed chunks, each from its own generator seeded by (rng_seed, chunk), so
// the output does not depend on `threads`.
inline pef::TrialBlock sample_trials(const SourceParams& p, std::uint64_t n, double eps_b, std::uint64_t rng_seed,
                                     unsigned threads = 1) {
  require(n >= 1, Errc::InvalidArgument, "need at least one trial");
  require(eps_b >= 0 && eps_b < 1, Errc::InvalidArgument, "settings bias out of range");
  ConditionalDistribution d = joint_distribution(p);
  std::array<std::array<double, 4>, 4> cdf{};
  for (int z = 0; z < 4; ++z) {
    double acc = 0;
    for (int c = 0; c < 4; ++c) cdf[static_cast<std::size_t>(z)][static_cast<std::size_t>(c)] = (acc += d[c * 4 + z]);
    cdf[static_cast<std::size_t>(z)][3] = 1;
  }
  const double p0 = (1 + eps_b) / 2;
  const std::uint64_t chunks = (n + detail::kChunk - 1) / detail::kChunk;
  std::vector<Bytes> packed(chunks);
  auto run = [&](std::uint64_t ch) {
    auto g = detail::chunk_rng(rng_seed, ch);
    std::uint64_t begin = ch * detail::kChunk, end = std::min(n, begin + detail::kChunk);
    Bytes& out = packed[ch];
    out.assign(static_cast<std::size_t>((end - begin + 1) / 2), 0);
    for (std::uint64_t j = begin; j < end; ++j) {
      int x = detail::unit(g) < p0 ? 0 : 1;
      int y = detail::unit(g) < p0 ? 0 : 1;
      int z = x * 2 + y;
      double u = detail::unit(g);
      int c = 0;
      while (u >= cdf[static_cast<std::size_t>(z)][static_cast<std::size_t>(c)]) ++c;
      pef::TrialRecord t{static_cast<std::uint8_t>(x), static_cast<std::uint8_t>(y), static_cast<std::uint8_t>(c >> 1),
                         static_cast<std::uint8_t>(c & 1)};
      std::uint64_t k = j - begin;
      out[static_cast<std::size_t>(k / 2)] |= static_cast<std::uint8_t>(k % 2 == 0 ? t.nibble() << 4 : t.nibble());
    }
  };
  threads = std::max(1u, threads);
  if (threads == 1) {
    for (std::uint64_t ch = 0; ch < chunks; ++ch) run(ch);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::uint64_t ch = t; ch < chunks; ch += threads) run(ch);
      });
    for (auto& th : pool) th.join();
  }
  Bytes all;
  all.reserve(static_cast<std::size_t>((n + 1) / 2));
  for (auto& b : packed) all.insert(all.end(), b.begin(), b.end());  // chunk size is even
  return pef::TrialBlock::from_packed(n, std::move(all));
}

// ---------------------------------------------------------------------------
// Spacelike-separation timing

struct TimingGeometry {
  double d_ab = 110;  // Alice RNG to Bob timetagger, m
  double d_ba = 110;  // Bob RNG to Alice timetagger, m
  double rng_latency_a = 31.0;  // ns
  double rng_latency_b = 24.6;
  double sync_offset = 0;  // ns, added to Bob's clock
  double sigma_d = 1.0;    // m
  double sigma_latency_a = 0.8;
  double sigma_latency_b = 0.3;
  double sigma_sync = 0.64;
};

enum class Station { alice, bob };

// Margin between the local station's last detection and the arrival of the
// remote RNG's lightcone; the trial is spacelike separated iff tau > 0.
inline double tau_bounds(double marker_time_remote, double last_detect_local, const TimingGeometry& g, Station local) {
  double latency = local == Station::alice ? g.rng_latency_b : g.rng_latency_a;
  double d = local == Station::alice ? g.d_ba : g.d_ab;
  return marker_time_remote + latency + d / kSpeedOfLight * 1e9 - last_detect_local;
}

// Worst-case trial of a block: markers of both stations and the latest
// detection at each, on the common time base (ns).
struct TimingScenario {
  TimingGeometry geometry;
  double marker_a = 0;
  double marker_b = 0;
  double last_detect_a = 0;
  double last_detect_b = 0;

  // Places the latest detections so the nominal margins are tau1 at Alice
  // and tau2 at Bob.
  static TimingScenario with_margins(const TimingGeometry& g, double tau1, double tau2) {
    TimingScenario s{g};
    s.last_detect_a = tau_bounds(s.marker_b, 0, g, Station::alice) - tau1;
    s.last_detect_b = tau_bounds(s.marker_a, 0, g, Station::bob) - tau2;
    return s;
  }

  double tau1() const { return tau_bounds(marker_b, last_detect_a, geometry, Station::alice); }
  double tau2() const { return tau_bounds(marker_a, last_detect_b, geometry, Station::bob); }
};

inline TimingScenario paper_timing_scenario() { return TimingScenario::with_margins(TimingGeometry{}, 49.0, 31.3); }

struct TauStats {
  double mean1 = 0, std1 = 0, mean2 = 0, std2 = 0;
  double min1 = 0, min2 = 0;
};

// Propagates the trusted-measurement uncertainties into tau1 and tau2.
inline TauStats timing_mc(const TimingScenario& s, std::uint64_t trials, std::uint64_t seed) {
  require(trials >= 2, Errc::InvalidArgument, "need at least two Monte Carlo trials");
  std::mt19937_64 g(seed);
  std::normal_distribution<double> z(0, 1);
  const auto& G = s.geometry;
  long double s1 = 0, q1 = 0, s2 = 0, q2 = 0;
  TauStats out{0, 0, 0, 0, std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  for (std::uint64_t i = 0; i < trials; ++i) {
    TimingGeometry gi = G;
    gi.d_ab += G.sigma_d * z(g);
    gi.d_ba += G.sigma_d * z(g);
    gi.rng_latency_a += G.sigma_latency_a * z(g);
    gi.rng_latency_b += G.sigma_latency_b * z(g);
    double sync = G.sigma_sync * z(g);
    double t1 = tau_bounds(s.marker_b + sync, s.last_detect_a, gi, Station::alice);
    double t2 = tau_bounds(s.marker_a - sync, s.last_detect_b, gi, Station::bob);
    s1 += t1, q1 += static_cast<long double>(t1) * t1, s2 += t2, q2 += static_cast<long double>(t2) * t2;
    out.min1 = std::min(out.min1, t1);
    out.min2 = std::min(out.min2, t2);
  }
  long double n = static_cast<long double>(trials);
  out.mean1 = static_cast<double>(s1 / n);
  out.mean2 = static_cast<double>(s2 / n);
  out.std1 = static_cast<double>(std::sqrt((q1 - s1 * s1 / n) / (n - 1)));
  out.std2 = static_cast<double>(std::sqrt((q2 - s2 * s2 / n) / (n - 1)));
  return out;
}

struct DistanceStats {
  double mean = 0;
  double std = 0;
};

// Spans are laid along successive axes (x, y, z, x, ...). Each span's
// length is normal about its nominal value; its direction leans towards the
// previous span by an angle drawn from a projected normal, atan(tan(sigma)*g).
inline DistanceStats distance_mc(const std::vector<double>& spans, double sigma_len, double sigma_ang_deg,
                                 std::uint64_t trials, std::uint64_t seed = 1) {
  require(!spans.empty() && trials >= 10000, Errc::InvalidArgument, "distance_mc needs spans and >= 1e4 trials");
  std::mt19937_64 g(seed);
  std::normal_distribution<double> z(0, 1);
  const double t_ang = std::tan(deg2rad(sigma_ang_deg));
  long double s = 0, q = 0;
  for (std::uint64_t i = 0; i < trials; ++i) {
    std::array<double, 3> pos{};
    for (std::size_t k = 0; k < spans.size(); ++k) {
      std::array<double, 3> dir{};
      dir[k % 3] = 1;
      if (k > 0) dir[(k - 1) % 3] += t_ang * z(g);
      double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
      double len = spans[k] + sigma_len * z(g);
      for (int a = 0; a < 3; ++a) pos[static_cast<std::size_t>(a)] += len * dir[static_cast<std::size_t>(a)] / norm;
    }
    double d = std::sqrt(pos[0] * pos[0] + pos[1] * pos[1] + pos[2] * pos[2]);
    s += d;
    q += static_cast<long double>(d) * d;
  }
  long double n = static_cast<long double>(trials);
  return {static_cast<double>(s / n), static_cast<double>(std::sqrt(std::max(0.0L, (q - s * s / n) / (n - 1))))};
}

}  // namespace beacon::bell
