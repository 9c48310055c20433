#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "beacon/polytope.hpp"
#include "beacon/threshold.hpp"
#include "beacon/trialblock.hpp"

namespace beacon::pef {

struct TrialModel {
  std::vector<ConditionalDistribution> vertices;
  double settings_bias = 0;
  std::vector<Settings> settings_vertices;
};

// Each party's setting probability ranges over [(1-eps)/2, (1+eps)/2]; the
// joint distribution is the product, so its extremes are the 4 corners.
inline std::vector<Settings> settings_vertices(double eps_b) {
  require(eps_b >= 0 && eps_b < 1, Errc::InvalidArgument, "settings bias must be in [0,1)");
  std::vector<Settings> out;
  for (double sa : {(1 - eps_b) / 2, (1 + eps_b) / 2})
    for (double sb : {(1 - eps_b) / 2, (1 + eps_b) / 2}) {
      Settings s{};
      for (int x = 0; x < 2; ++x)
        for (int y = 0; y < 2; ++y) s[static_cast<std::size_t>(x * 2 + y)] = (x ? 1 - sa : sa) * (y ? 1 - sb : sb);
      out.push_back(s);
    }
  if (eps_b == 0) out.resize(1);
  return out;
}

inline TrialModel make_model(bool tsirelson = true, double eps_b = 1e-3) {
  TrialModel m;
  m.vertices = ns_vertices();
  if (tsirelson) m.vertices = tsirelson_cut(m.vertices);
  m.settings_bias = eps_b;
  m.settings_vertices = settings_vertices(eps_b);
  return m;
}

inline constexpr Settings kUniformSettings{0.25, 0.25, 0.25, 0.25};

struct Pef {
  std::array<double, 16> f{};
  double beta = 1;
};

inline double pef_lhs(const std::array<double, 16>& f, double beta, const ConditionalDistribution& cond,
                      const Settings& settings) {
  long double s = 0;
  for (int i = 0; i < 16; ++i) {
    double p = cond[i];
    if (p <= 0) continue;
    s += static_cast<long double>(settings[static_cast<std::size_t>(setting_of(i))]) * p * f[static_cast<std::size_t>(i)] *
         std::pow(static_cast<long double>(p), static_cast<long double>(beta));
  }
  return static_cast<double>(s);
}

struct PefCheck {
  bool valid = false;
  std::size_t worst_vertex = 0;
  std::size_t worst_settings = 0;
  double worst_lhs = 0;
};

inline constexpr double kPefSlack = 1e-12;

// The left side is convex in the conditional distribution and linear in the
// settings distribution, so checking extreme points suffices.
inline PefCheck validate_pef(const std::array<double, 16>& f, double beta, const TrialModel& model) {
  PefCheck out;
  out.worst_lhs = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < model.vertices.size(); ++v)
    for (std::size_t s = 0; s < model.settings_vertices.size(); ++s) {
      double lhs = pef_lhs(f, beta, model.vertices[v], model.settings_vertices[s]);
      if (lhs > out.worst_lhs) out = {false, v, s, lhs};
    }
  out.valid = out.worst_lhs <= 1 + kPefSlack;
  for (double x : f)
    if (!(x >= 0)) out.valid = false;
  return out;
}

// ---------------------------------------------------------------------------
// Maximum-likelihood reference distribution

struct MleResult {
  ConditionalDistribution mu;
  std::vector<double> weights;  // convex combination of model.vertices
  double objective = 0;         // mean log-likelihood per trial (nats)
  double gap = 0;               // certified bound on distance to the optimum
};

inline constexpr std::uint64_t kMinCalibrationTrials = 10000;

inline MleResult mle_conditional(const Counts& counts, const TrialModel& model) {
  using LD = long double;
  using Mat = Eigen::Matrix<LD, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<LD, Eigen::Dynamic, 1>;

  std::uint64_t total = 0;
  for (int z = 0; z < 4; ++z) {
    std::uint64_t nz = 0;
    for (int c = 0; c < 4; ++c) nz += counts[static_cast<std::size_t>(c * 4 + z)];
    require(nz > 0, Errc::DegenerateCounts, "setting pair " + std::to_string(z) + " has no trials");
    total += nz;
  }
  require(total >= kMinCalibrationTrials, Errc::DegenerateCounts,
          "calibration needs at least " + std::to_string(kMinCalibrationTrials) + " trials");

  const int K = static_cast<int>(model.vertices.size());
  Mat V(16, K);
  for (int k = 0; k < K; ++k)
    for (int i = 0; i < 16; ++i) V(i, k) = model.vertices[static_cast<std::size_t>(k)][i];
  Vec q(16);
  for (int i = 0; i < 16; ++i) q(i) = static_cast<LD>(counts[static_cast<std::size_t>(i)]) / static_cast<LD>(total);

  auto loglik = [&](const Vec& mu) {
    LD s = 0;
    for (int i = 0; i < 16; ++i)
      if (q(i) > 0) {
        if (mu(i) <= 0) return -std::numeric_limits<LD>::infinity();
        s += q(i) * std::log(mu(i));
      }
    return s;
  };

  // Log barrier on the simplex: maximize t*L(V lambda) + sum log lambda_k.
  Vec lam = Vec::Constant(K, 1.0L / K);
  LD t = 1;
  for (int stage = 0; stage < 40; ++stage) {
    for (int it = 0; it < 200; ++it) {
      Vec mu = V * lam;
      Vec r = Vec::Zero(16), r2 = Vec::Zero(16);
      for (int i = 0; i < 16; ++i)
        if (q(i) > 0) {
          r(i) = q(i) / mu(i);
          r2(i) = q(i) / (mu(i) * mu(i));
        }
      Vec g = t * (V.transpose() * r) + lam.cwiseInverse();
      Mat H = -t * (V.transpose() * r2.asDiagonal() * V);
      H.diagonal() -= lam.cwiseInverse().cwiseAbs2();
      Mat KKT = Mat::Zero(K + 1, K + 1);
      KKT.topLeftCorner(K, K) = H;
      KKT.block(0, K, K, 1).setOnes();
      KKT.block(K, 0, 1, K).setOnes();
      Vec rhs = Vec::Zero(K + 1);
      rhs.head(K) = -g;
      Vec sol = KKT.partialPivLu().solve(rhs);
      Vec d = sol.head(K);
      LD dec = -d.dot(H * d);
      if (dec / 2 < 1e-18L) break;
      auto barrier = [&](const Vec& l) {
        for (int k = 0; k < K; ++k)
          if (l(k) <= 0) return -std::numeric_limits<LD>::infinity();
        return t * loglik(V * l) + l.array().log().sum();
      };
      LD f0 = barrier(lam), slope = g.dot(d), step = 1;
      while (barrier(lam + step * d) < f0 + 0.25L * step * slope) {
        step /= 2;
        if (step < 1e-30L) break;
      }
      if (step < 1e-30L) break;
      lam += step * d;
    }
    if (K / t < 1e-14L) break;
    t *= 10;
  }

  lam = lam.cwiseMax(0);
  lam /= lam.sum();
  Vec mu = V * lam;
  MleResult out;
  for (int i = 0; i < 16; ++i) out.mu[i] = static_cast<double>(mu(i));
  for (int k = 0; k < K; ++k) out.weights.push_back(static_cast<double>(lam(k)));
  out.objective = static_cast<double>(loglik(mu));
  // Frank-Wolfe gap: the objective is concave, so max_k grad.(e_k - lam)
  // bounds the distance to the optimum.
  LD best = -std::numeric_limits<LD>::infinity();
  for (int k = 0; k < K; ++k) {
    LD gk = 0;
    for (int i = 0; i < 16; ++i)
      if (q(i) > 0) gk += q(i) * V(i, k) / mu(i);
    best = std::max(best, gk);
  }
  out.gap = static_cast<double>(best - 1);
  require(std::isfinite(out.objective), Errc::ConvergenceFailure, "likelihood diverged");
  return out;
}

// Mean log-likelihood of counts under a conditional distribution.
inline double log_likelihood(const Counts& counts, const ConditionalDistribution& mu) {
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  long double s = 0;
  for (int i = 0; i < 16; ++i)
    if (counts[static_cast<std::size_t>(i)] > 0) {
      if (mu[i] <= 0) return -std::numeric_limits<double>::infinity();
      s += static_cast<long double>(counts[static_cast<std::size_t>(i)]) / total * std::log(static_cast<long double>(mu[i]));
    }
  return static_cast<double>(s);
}

// ---------------------------------------------------------------------------
// PEF optimization

struct PefResult {
  Pef pef;
  double rate = 0;        // E_nu[log2 F], bits per trial
  double dual_bound = 0;  // upper bound on the optimal rate, bits per trial
  double worst_lhs = 0;
};

namespace detail {

inline ConditionalDistribution clip_positive(const ConditionalDistribution& nu, double floor = 1e-14) {
  ConditionalDistribution out = nu;
  for (int z = 0; z < 4; ++z) {
    double s = 0;
    for (int c = 0; c < 4; ++c) s += (out[c * 4 + z] = std::max(out[c * 4 + z], floor));
    for (int c = 0; c < 4; ++c) out[c * 4 + z] /= s;
  }
  return out;
}

}  // namespace detail

// Maximizes E_nu[log F] subject to the PEF inequality at every model vertex
// and settings vertex, by a primal log-barrier method in extended precision.
inline PefResult optimize_pef(const ConditionalDistribution& nu_in, const Settings& settings, double beta,
                              const TrialModel& model) {
  using LD = long double;
  using Mat = Eigen::Matrix<LD, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<LD, Eigen::Dynamic, 1>;
  require(beta > 0, Errc::InvalidArgument, "beta must be positive");
  require(!model.vertices.empty() && !model.settings_vertices.empty(), Errc::InvalidArgument, "empty model");
  ConditionalDistribution nu = detail::clip_positive(nu_in);

  const int R = static_cast<int>(model.vertices.size() * model.settings_vertices.size());
  Mat G(R, 16);
  int r = 0;
  for (const auto& v : model.vertices)
    for (const auto& s : model.settings_vertices) {
      for (int i = 0; i < 16; ++i)
        G(r, i) = v[i] > 0 ? static_cast<LD>(s[static_cast<std::size_t>(setting_of(i))]) *
                                 std::pow(static_cast<LD>(v[i]), 1 + static_cast<LD>(beta))
                           : 0;
      ++r;
    }
  Vec w(16);
  for (int i = 0; i < 16; ++i) w(i) = static_cast<LD>(settings[static_cast<std::size_t>(setting_of(i))]) * nu[i];

  auto barrier = [&](const Vec& F, LD t) {
    if ((F.array() <= 0).any()) return -std::numeric_limits<LD>::infinity();
    Vec s = Vec::Ones(R) - G * F;
    if ((s.array() <= 0).any()) return -std::numeric_limits<LD>::infinity();
    return t * w.dot(F.array().log().matrix()) + s.array().log().sum();
  };

  auto slope = [&](const Vec& F, LD t, const Vec& d) {
    Vec inv_s = (Vec::Ones(R) - G * F).cwiseInverse();
    return (t * w.cwiseQuotient(F) - G.transpose() * inv_s).dot(d);
  };
  // Dual point y_r = 1/(t s_r): any y >= 0 gives the upper bound
  // sum_i w_i ln(w_i / (G^T y)_i) + ln sum_r y_r.
  auto dual_at = [&](const Vec& F, LD t) {
    Vec y = (t * (Vec::Ones(R) - G * F)).cwiseInverse();
    Vec gy = G.transpose() * y;
    LD d = std::log(y.sum());
    for (int i = 0; i < 16; ++i) d += w(i) * std::log(w(i) / gy(i));
    return d;
  };

  Vec F = Vec::Constant(16, 0.5L);
  Vec best_F = F;
  LD best_gap = std::numeric_limits<LD>::infinity(), best_dual = 0, best_primal = 0;
  LD t = 1;
  for (int stage = 0; stage < 30; ++stage) {
    for (int it = 0; it < 60; ++it) {
      Vec s = Vec::Ones(R) - G * F;
      Vec inv_s = s.cwiseInverse();
      Vec g = t * w.cwiseQuotient(F) - G.transpose() * inv_s;
      // Newton step as least squares on the stacked square-root Hessian.
      Mat M(R + 16, 16);
      M.topRows(R) = inv_s.asDiagonal() * G;
      Vec sw = (t * w).cwiseSqrt();
      M.bottomRows(16) = sw.cwiseQuotient(F).asDiagonal();
      Vec b(R + 16);
      b.head(R).setConstant(-1);
      b.tail(16) = sw;
      Vec d = M.template cast<double>().colPivHouseholderQr().solve(b.template cast<double>()).template cast<LD>();
      LD dec = g.dot(d);
      if (dec / 2 < 1e-14L) break;
      // Backtrack on feasibility and on the directional derivative; function
      // values are too large to resolve the last digits of progress.
      LD step = 1;
      while (step > 1e-12L && !(std::isfinite(barrier(F + step * d, t)) && slope(F + step * d, t, d) >= -0.5L * dec))
        step /= 2;
      if (step <= 1e-12L) break;
      F += step * d;
    }
    LD primal = w.dot(F.array().log().matrix());
    LD dual = dual_at(F, t);
    LD gap = dual - primal;
    if (gap < best_gap) {
      best_gap = gap;
      best_F = F;
      best_dual = dual;
      best_primal = primal;
    }
    if (best_gap <= std::max(1e-7L * std::abs(best_primal), 1e-15L)) break;
    // Past the precision floor the slacks lose their digits and the gap grows.
    if (gap > 2 * best_gap) break;
    t *= 10;
  }
  require(best_gap <= std::max(1e-6L * std::abs(best_primal), 1e-12L), Errc::ConvergenceFailure,
          "barrier schedule did not reach target accuracy");
  F = best_F;
  LD dual = best_dual;

  PefResult out;
  out.pef.beta = beta;
  for (int i = 0; i < 16; ++i) out.pef.f[static_cast<std::size_t>(i)] = static_cast<double>(F(i));
  PefCheck chk = validate_pef(out.pef.f, beta, model);
  for (auto& x : out.pef.f) x /= chk.worst_lhs;
  chk = validate_pef(out.pef.f, beta, model);
  require(chk.valid, Errc::ConvergenceFailure, "optimized PEF fails validation");
  out.worst_lhs = chk.worst_lhs;
  LD rate = 0;
  for (int i = 0; i < 16; ++i) rate += w(i) * std::log2(static_cast<LD>(out.pef.f[static_cast<std::size_t>(i)]));
  out.rate = static_cast<double>(rate);
  out.dual_bound = static_cast<double>(dual / std::log(2.0L));
  return out;
}

inline double expected_trials(double beta, double sigma_h, double eps_h, double rate) {
  if (!(rate > 0)) return std::numeric_limits<double>::infinity();
  return (beta * sigma_h - std::log2(eps_h)) / rate;
}

struct BetaResult {
  double beta = 0;
  PefResult best;
  double n_exp = std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, double>> scan;  // (beta, n_exp)
};

// Rates below this are indistinguishable from solver tolerance.
inline constexpr double kMinRate = 1e-10;

inline std::vector<double> default_beta_grid() {
  std::vector<double> g;
  for (int i = 0; i < 60; ++i) g.push_back(std::pow(10.0, -3.0 + 3.0 * i / 59));
  return g;
}

inline BetaResult optimize_beta(const ConditionalDistribution& nu, const Settings& settings, const TrialModel& model,
                                double sigma_h, double eps_h, std::vector<double> grid = {}) {
  if (grid.empty()) grid = default_beta_grid();
  std::sort(grid.begin(), grid.end());
  BetaResult out;
  auto consider = [&](double beta) {
    PefResult r = optimize_pef(nu, settings, beta, model);
    double n = r.rate > kMinRate ? expected_trials(beta, sigma_h, eps_h, r.rate) : std::numeric_limits<double>::infinity();
    out.scan.push_back({beta, n});
    if (n < out.n_exp) {
      out.n_exp = n;
      out.beta = beta;
      out.best = r;
    }
  };
  for (double b : grid) consider(b);
  require(std::isfinite(out.n_exp), Errc::NoPositiveRate, "no beta in the grid yields a positive rate");
  auto it = std::find(grid.begin(), grid.end(), out.beta);
  double lo = it == grid.begin() ? *it : *(it - 1);
  double hi = it + 1 == grid.end() ? *it : *(it + 1);
  for (int i = 1; i < 10; ++i) {
    double b = lo * std::pow(hi / lo, i / 10.0);
    if (b != out.beta) consider(b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Accumulation and certification

struct Accumulation {
  double log2_T = 0;
  std::vector<std::pair<std::uint64_t, double>> running;  // (trials consumed, log2 T)
};

inline Accumulation accumulate(const TrialBlock& trials, const Pef& pef, std::uint64_t stride = 0) {
  const auto& map = TrialBlock::nibble_to_cz();
  std::array<long double, 16> lg{};
  for (int n = 0; n < 16; ++n) {
    double f = pef.f[map[static_cast<std::size_t>(n)]];
    lg[static_cast<std::size_t>(n)] = f > 0 ? std::log2(static_cast<long double>(f)) : -std::numeric_limits<long double>::infinity();
  }
  for (int i = 0; i < 16; ++i)
    require(trials.counts()[static_cast<std::size_t>(i)] == 0 || pef.f[static_cast<std::size_t>(i)] > 0,
            Errc::ZeroPefValue, "a recorded outcome has PEF value zero");
  Accumulation out;
  if (stride > 0) {
    long double s = 0;
    out.running.push_back({0, 0});
    for (std::uint64_t j = 0; j < trials.size(); ++j) {
      s += lg[trials.nibble(j)];
      if ((j + 1) % stride == 0 || j + 1 == trials.size()) out.running.push_back({j + 1, static_cast<double>(s)});
    }
  }
  // The total from counts avoids rounding drift over long blocks.
  long double total = 0;
  for (int n = 0; n < 16; ++n) {
    std::uint64_t c = trials.counts()[map[static_cast<std::size_t>(n)]];
    if (c) total += static_cast<long double>(c) * lg[static_cast<std::size_t>(n)];
  }
  out.log2_T = static_cast<double>(total);
  return out;
}

struct EntropyCertificate {
  double log2_T = 0;
  double beta = 0;
  double eps_h = 0;
  double certified_bits = 0;
  double threshold = 0;
  bool passed = false;
  std::uint64_t n_used = 0;
  std::optional<std::uint64_t> crossing_index;  // first trial count reaching the threshold
  std::string failure;
};

using beacon::entropy_threshold;

inline double certified_bits(double log2_T, double beta, double eps_h) { return (log2_T + std::log2(eps_h)) / beta; }

inline EntropyCertificate certify(const TrialBlock& trials, const Pef& pef, double eps_h, double sigma_h) {
  require(eps_h > 0 && eps_h < 1, Errc::InvalidArgument, "eps_h must be in (0,1)");
  EntropyCertificate c;
  c.beta = pef.beta;
  c.eps_h = eps_h;
  c.threshold = sigma_h;
  c.n_used = trials.size();
  try {
    c.log2_T = accumulate(trials, pef).log2_T;
  } catch (const Error& e) {
    if (e.code() != Errc::ZeroPefValue) throw;
    c.log2_T = -std::numeric_limits<double>::infinity();
    c.certified_bits = -std::numeric_limits<double>::infinity();
    c.failure = e.what();
    return c;
  }
  c.certified_bits = certified_bits(c.log2_T, pef.beta, eps_h);
  c.passed = c.certified_bits >= sigma_h;
  if (!c.passed) c.failure = "certified entropy below threshold";
  // log2 T needed for the threshold; scan for the first crossing.
  long double need = static_cast<long double>(sigma_h) * pef.beta - std::log2(static_cast<long double>(eps_h));
  const auto& map = TrialBlock::nibble_to_cz();
  std::array<long double, 16> lg{};
  for (int n = 0; n < 16; ++n) lg[static_cast<std::size_t>(n)] = std::log2(static_cast<long double>(pef.f[map[static_cast<std::size_t>(n)]]));
  long double s = 0;
  for (std::uint64_t j = 0; j < trials.size(); ++j) {
    s += lg[trials.nibble(j)];
    if (s >= need) {
      c.crossing_index = j + 1;
      break;
    }
  }
  return c;
}

inline double min_entropy_bound(double p, double kappa, double beta) {
  require(p > 0 && p <= 1 && kappa > 0 && kappa <= 1 && beta > 0, Errc::InvalidArgument, "min_entropy_bound domain");
  return -std::log2(p) + (1 + 1 / beta) * std::log2(kappa);
}

}  // namespace beacon::pef
