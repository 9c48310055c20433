#include <gtest/gtest.h>

#include <sstream>
#include <unistd.h>

#include "beacon/orchestrator.hpp"

using namespace beacon;
using namespace beacon::curby;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("orch_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(d);
  return d;
}

// Small enough that a round takes ~0.1 s and nearly always certifies.
Config small_config(const std::filesystem::path& dir) {
  Config c;
  c.store_dir = dir;
  c.passphrase = "test-pass";
  c.sigma = 16;
  c.n_stop = 400000;
  c.eps = 0.01;
  c.calibration_trials = 200000;
  c.recalibrate_every = 1000;
  c.timing_mc_trials = 500;
  c.mock_period_ms = 0;
  c.retry.attempts = 3;
  c.seed_wait = std::chrono::milliseconds(2000);
  c.prng_chain = false;
  c.threads = 1;
  return c;
}

// Mock upstream that publishes the next round whenever the service polls a
// future round, so tests need no wall-clock waits.
class SteppingUpstream : public upstream::MockUpstream {
 public:
  using MockUpstream::MockUpstream;
  std::optional<upstream::Round> round(std::uint64_t r) override {
    if (r == current() + 1) advance();
    return MockUpstream::round(r);
  }
};

struct Rig {
  std::filesystem::path dir;
  SteppingUpstream* up = nullptr;
  std::unique_ptr<Service> svc;
  std::vector<std::chrono::milliseconds> sleeps;

  explicit Rig(const std::string& name, std::function<void(Config&)> tweak = {}) : dir(fresh_dir(name)) {
    auto cfg = small_config(dir);
    if (tweak) tweak(cfg);
    open(cfg);
  }
  void open(const Config& cfg) {
    auto u = std::make_unique<SteppingUpstream>(100);
    up = u.get();
    svc = std::make_unique<Service>(cfg, std::move(u));
    svc->sleeper = [this](std::chrono::milliseconds d) { sleeps.push_back(d); };
  }
  ~Rig() {
    svc.reset();
    std::filesystem::remove_all(dir);
  }

  twine::Pulse pulse(const Cid& c) { return twine::Pulse::parse(svc->store().get_pulse(c)); }
  pef::TrialBlock trials_of(const RoundState& st) {
    auto c = pulse(st.refs.at(kind::C));
    return pef::TrialBlock::load(svc->trials_path(c.payload.at("hash").as<Bytes>("hash")).string());
  }
};

std::string error_of(const twine::Pulse& e) { return e.payload.at("error").as_text("error"); }
std::string stage_of(const twine::Pulse& e) { return e.payload.at("stage").as_text("stage"); }

}  // namespace

TEST(Config, ParsesIniSections) {
  auto dir = fresh_dir("ini");
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "b.ini") << "[store]\ndir = data\npassphrase = pw\nport = 9000\n"
                                  "[request]\nsigma = 64\nn_stop = 1000\neps = 0.001\nrecalibrate_every = 3\n"
                                  "[source]\np_pair = 0.01\nangle_b1 = 0.5\nseed = 9\n"
                                  "[upstream]\nurl = http://127.0.0.1:1\nattempts = 2\nbackoff_ms = 10\n"
                                  "[service]\nprng_chain = false\n";
  auto c = Config::load(dir / "b.ini");
  EXPECT_EQ(c.store_dir, dir / "data");
  EXPECT_EQ(c.passphrase, "pw");
  EXPECT_EQ(c.port, 9000);
  EXPECT_EQ(c.sigma, 64);
  EXPECT_EQ(c.n_stop, 1000u);
  EXPECT_DOUBLE_EQ(c.eps, 0.001);
  EXPECT_EQ(c.recalibrate_every, 3u);
  EXPECT_DOUBLE_EQ(c.source.p_pair, 0.01);
  EXPECT_DOUBLE_EQ(c.source.angles[3], 0.5);
  EXPECT_EQ(c.sim_seed, 9u);
  EXPECT_EQ(c.upstream, "http://127.0.0.1:1");
  EXPECT_EQ(c.retry.attempts, 2);
  EXPECT_EQ(c.retry.initial_backoff.count(), 10);
  EXPECT_FALSE(c.prng_chain);
  EXPECT_EQ(c.mock_period_ms, 3000);

  std::ofstream(dir / "bad.ini") << "[request]\neps = 2\n";
  EXPECT_THROW(Config::load(dir / "bad.ini"), Error);
  std::filesystem::remove_all(dir);
}

TEST(Request, RoundTripsAndDetectsInconsistency) {
  pef::Pef f;
  f.f.fill(1.0);
  f.beta = 0.02;
  auto r = RequestPayload::make(f, 16, 400000, 0.01, 1e-3, compute_cid(Bytes{1, 2, 3}));
  EXPECT_DOUBLE_EQ(r.eps_h + r.eps_x, r.eps);
  EXPECT_TRUE(r.problems().empty());
  auto back = RequestPayload::from_value(cbor::parse(cbor::serialize(r.to_value())));
  EXPECT_EQ(back.pef.f, r.pef.f);
  EXPECT_EQ(back.pef.beta, r.pef.beta);
  EXPECT_EQ(back.w, r.w);
  EXPECT_EQ(back.l, r.l);
  EXPECT_EQ(back.threshold, r.threshold);
  EXPECT_TRUE(back.problems().empty());

  auto bad = back;
  bad.w += 2;
  EXPECT_FALSE(bad.problems().empty());
  bad = back;
  bad.threshold -= 1;
  EXPECT_FALSE(bad.problems().empty());
  bad = back;
  bad.pef.f[0] = 50;  // far above any valid PEF value
  EXPECT_FALSE(bad.problems().empty());
}

TEST(Retry, BacksOffExponentiallyThenGivesUp) {
  std::vector<long> waits;
  auto sleep = [&](std::chrono::milliseconds d) { waits.push_back(d.count()); };
  int calls = 0;
  upstream::RetryPolicy pol;  // 5 attempts, 1 s doubling
  EXPECT_THROW(upstream::with_retry(pol, [&]() -> int { ++calls; fail(Errc::UpstreamUnavailable, "x"); }, sleep), Error);
  EXPECT_EQ(calls, 5);
  EXPECT_EQ(waits, (std::vector<long>{1000, 2000, 4000, 8000}));

  waits.clear();
  calls = 0;
  int v = upstream::with_retry(pol, [&] {
    if (++calls < 3) fail(Errc::UpstreamUnavailable, "x");
    return 7;
  }, sleep);
  EXPECT_EQ(v, 7);
  EXPECT_EQ(waits, (std::vector<long>{1000, 2000}));

  calls = 0;
  EXPECT_THROW(upstream::with_retry(pol, [&]() -> int { ++calls; fail(Errc::MalformedEncoding, "x"); }, sleep), Error);
  EXPECT_EQ(calls, 1);
}

TEST(Upstream, HttpClientAgainstServer) {
  upstream::MockUpstream mock(40);
  upstream::UpstreamServer server(mock);
  int port = server.start("127.0.0.1", 0);
  upstream::HttpUpstream http("http://127.0.0.1:" + std::to_string(port));

  auto l = http.latest();
  EXPECT_EQ(l.round, 40u);
  EXPECT_EQ(l.randomness, upstream::mock_value(40));
  auto r = http.round(12);
  ASSERT_TRUE(r);
  EXPECT_EQ(r->randomness, upstream::mock_value(12));
  EXPECT_FALSE(http.round(41));
  mock.advance();
  EXPECT_TRUE(http.round(41));

  mock.fail_next(1);
  try {
    http.latest();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UpstreamUnavailable);
  }
  server.stop();
  try {
    http.round(1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UpstreamUnavailable);
  }
}

TEST(Upstream, MockValuesAreFixedDigests) {
  // SHA3-512 of eight zero bytes then 0x01.
  EXPECT_EQ(to_hex(upstream::mock_value(1)), to_hex(crypto::sha3_512_bytes(from_hex("0000000000000001"))));
  EXPECT_NE(upstream::mock_value(1), upstream::mock_value(2));
  upstream::MockUpstream m(5);
  EXPECT_FALSE(m.round(0));
  EXPECT_FALSE(m.round(6));
  EXPECT_EQ(m.latest().round, 5u);
}

// Fifty-plus rounds with every fault kind injected on a fixed schedule. Each
// round ends in the phase its fault predicts, every published round audits
// clean, and the ledger scan finds no output without a passing commitment.
TEST(Service, IntegrationRoundsWithInjectedFaults) {
  Rig rig("integration");
  enum F { none, noise, unit, tamper, late, down, stale };
  const F cycle[] = {none, none, unit, none, tamper, none, late, none, down, none, stale, none, noise};
  std::map<F, int> seen;
  std::vector<RoundState> published;
  const int rounds = 56;
  for (int i = 0; i < rounds; ++i) {
    F f = cycle[i % 13];
    Faults flt;
    flt.white_noise_calibration = f == noise;
    flt.unit_pef = f == unit;
    flt.tamper_data = f == tamper;
    flt.late_detection = f == late;
    flt.upstream_down = f == down;
    flt.stale_commit = f == stale;
    auto st = rig.svc->run_round(flt);
    ++seen[f];
    SCOPED_TRACE("round " + std::to_string(st.round) + " fault " + std::to_string(f));
    EXPECT_EQ(st.round, i + 1);
    switch (f) {
      case none:
        ASSERT_EQ(st.phase, Phase::Published) << st.failure << " " << st.detail;
        EXPECT_EQ(st.output.size(), 2u);
        published.push_back(st);
        break;
      case noise:
        EXPECT_EQ(st.phase, Phase::Failed);
        EXPECT_EQ(st.failure, "NoPositiveRate");
        EXPECT_TRUE(st.refs.count(kind::A));
        EXPECT_FALSE(st.refs.count(kind::X));
        break;
      case unit: {
        ASSERT_TRUE(st.refs.count(kind::E));
        auto e = rig.pulse(st.refs.at(kind::E));
        EXPECT_EQ(stage_of(e), stage::certify);
        EXPECT_EQ(error_of(e), "EntropyTooLow");
        EXPECT_FALSE(st.refs.count(kind::Y));
        EXPECT_LE(st.certificate->log2_T, 1e-9);
        break;
      }
      case tamper: {
        auto e = rig.pulse(st.refs.at(kind::E));
        EXPECT_EQ(stage_of(e), stage::data);
        EXPECT_EQ(error_of(e), "DataHashMismatch");
        break;
      }
      case late: {
        auto c = rig.pulse(st.refs.at(kind::C));
        EXPECT_FALSE(c.payload.at("valid").as<bool>("valid"));
        EXPECT_LT(cbor::as_real(c.payload.at("timing").at("tau_min")), 0);
        EXPECT_EQ(error_of(rig.pulse(st.refs.at(kind::E))), "TimingViolation");
        break;
      }
      case down: {
        ASSERT_TRUE(st.refs.count(kind::Y));
        auto e = rig.pulse(st.refs.at(kind::E));
        EXPECT_EQ(stage_of(e), stage::seed);
        EXPECT_EQ(error_of(e), "UpstreamUnavailable");
        EXPECT_FALSE(st.refs.count(kind::S));
        break;
      }
      case stale: {
        auto e = rig.pulse(st.refs.at(kind::E));
        EXPECT_EQ(stage_of(e), stage::seed);
        EXPECT_EQ(error_of(e), "FreshnessViolation");
        break;
      }
    }
    EXPECT_EQ(st.phase == Phase::Published, st.refs.count(kind::Z) == 1);
  }
  for (F f : {none, noise, unit, tamper, late, down, stale}) EXPECT_GT(seen[f], 0);
  // Retries for the injected outage used the configured backoff.
  ASSERT_GE(rig.sleeps.size(), 2u);
  EXPECT_EQ(rig.sleeps[0].count(), 1000);
  EXPECT_EQ(rig.sleeps[1].count(), 2000);

  auto scan = scan_rounds(rig.svc->store(), rig.svc->service_chain(), rig.svc->bell_chain());
  for (auto& p : scan.problems) ADD_FAILURE() << p;
  EXPECT_EQ(scan.rounds, rounds);
  EXPECT_EQ(scan.published, static_cast<std::int64_t>(published.size()));
  EXPECT_GE(published.size(), 25u);

  for (std::size_t i = 0; i < published.size(); ++i) {
    const auto& st = published[i];
    bool full = i % 5 == 0;
    auto trials = full ? std::optional(rig.trials_of(st)) : std::nullopt;
    AuditOptions opt;
    opt.upstream = rig.up;
    auto a = audit_round(rig.svc->store(), st.refs.at(kind::Z), trials ? &*trials : nullptr, opt);
    for (auto& p : a.problems) ADD_FAILURE() << "round " << st.round << ": " << p;
    EXPECT_EQ(a.round, st.round);
    if (full) {
      ASSERT_TRUE(a.recertified);
      EXPECT_EQ(a.recertified->log2_T, st.certificate->log2_T);
    }
  }

  // Outputs differ across rounds.
  std::set<Bytes> outs;
  for (auto& st : published) outs.insert(st.output);
  EXPECT_EQ(outs.size(), published.size());
}

TEST(Service, CrossChainOrderProofs) {
  Rig rig("order");
  auto st = rig.svc->run_round();
  ASSERT_EQ(st.phase, Phase::Published);
  auto& s = rig.svc->store();
  const char* seq[] = {kind::X, kind::B, kind::C, kind::Y, kind::S, kind::Z};
  for (int i = 0; i + 1 < 6; ++i) {
    auto a = st.refs.at(seq[i]), b = st.refs.at(seq[i + 1]);
    auto proof = twine::prove_order(b, a, s);
    ASSERT_TRUE(proof) << seq[i];
    EXPECT_EQ(proof->earlier, a);
    EXPECT_EQ(proof->later, b);
    EXPECT_TRUE(twine::verify_order_proof(*proof, s));
  }
  // Transitively X precedes Z across all three chains.
  auto p = twine::prove_order(st.refs.at(kind::X), st.refs.at(kind::Z), s);
  ASSERT_TRUE(p);
  EXPECT_EQ(p->earlier, st.refs.at(kind::X));
  EXPECT_TRUE(twine::verify_order_proof(*p, s));
  // The three pulses live on three distinct chains.
  std::set<Cid> chains{rig.pulse(st.refs.at(kind::X)).chain, rig.pulse(st.refs.at(kind::C)).chain,
                       rig.pulse(st.refs.at(kind::S)).chain};
  EXPECT_EQ(chains.size(), 3u);
}

TEST(Audit, WrongBetaOrTamperedTrialsAreCaught) {
  Rig rig("wrongbeta");
  auto st = rig.svc->run_round();
  ASSERT_EQ(st.phase, Phase::Published);
  auto trials = rig.trials_of(st);
  auto& s = rig.svc->store();
  EXPECT_TRUE(audit_round(s, st.refs.at(kind::Z), &trials).ok());

  auto req = RequestPayload::from_value(rig.pulse(st.refs.at(kind::X)).payload.at("request"));
  AuditOptions opt;
  opt.pef_override = req.pef;
  opt.pef_override->beta *= 1.5;
  auto a = audit_round(s, st.refs.at(kind::Z), &trials, opt);
  EXPECT_FALSE(a.ok());
  ASSERT_TRUE(a.recertified);
  EXPECT_NE(a.recertified->certified_bits, st.certificate->certified_bits);

  auto bad = trials.slice(0, trials.size() - 1);
  bad.push(pef::TrialRecord{});
  auto t = audit_round(s, st.refs.at(kind::Z), &bad);
  ASSERT_FALSE(t.ok());
  EXPECT_NE(t.problems.front().find("hash"), std::string::npos);

  // The seed must be what the upstream published for that round.
  AuditOptions o2;
  o2.upstream = rig.up;
  EXPECT_TRUE(audit_round(s, st.refs.at(kind::Z), nullptr, o2).ok());
  struct Shifted : upstream::MockUpstream {
    using MockUpstream::MockUpstream;
    std::optional<upstream::Round> round(std::uint64_t r) override { return upstream::Round{r, upstream::mock_value(r + 1)}; }
  } other(10000);
  o2.upstream = &other;
  EXPECT_FALSE(audit_round(s, st.refs.at(kind::Z), nullptr, o2).ok());
}

TEST(Output, OneSeedBitFlipChangesTheOutput) {
  Rig rig("avalanche");
  auto st = rig.svc->run_round();
  ASSERT_EQ(st.phase, Phase::Published);
  auto trials = rig.trials_of(st);
  auto req = RequestPayload::from_value(rig.pulse(st.refs.at(kind::X)).payload.at("request"));
  auto cert = Certificate::from_value(rig.pulse(st.refs.at(kind::Y)).payload.at("certificate"));
  Bytes seed = rig.pulse(st.refs.at(kind::S)).payload.at("randomness").as<Bytes>("randomness");
  auto base = Service::output_bits(trials, req, cert, seed);
  EXPECT_EQ(base.bytes(), st.output);
  for (std::size_t bit : {0u, 7u, 300u, 511u}) {
    Bytes s2 = seed;
    s2[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
    EXPECT_NE(Service::output_bits(trials, req, cert, s2).bytes(), base.bytes()) << bit;
  }
}

TEST(Audit, EquivocatingSeedIsDetected) {
  Rig rig("equivocate");
  auto st = rig.svc->run_round();
  ASSERT_EQ(st.phase, Phase::Published);
  auto& s = rig.svc->store();
  ASSERT_TRUE(audit_round(s, st.refs.at(kind::Z)).ok());
  auto sp = rig.pulse(st.refs.at(kind::S));
  auto forged = sp.payload;
  forged.as_mut<cbor::Map>()["randomness"] = upstream::mock_value(1);
  rig.svc->writer("seed").append(forged, {{rig.svc->service_chain(), st.refs.at(kind::Y)}});
  auto a = audit_round(s, st.refs.at(kind::Z));
  ASSERT_FALSE(a.ok());
  bool found = false;
  for (auto& p : a.problems) found |= p.find("answers the commitment 2 times") != std::string::npos;
  EXPECT_TRUE(found);
}

TEST(Audit, StaleSeedCommitmentIsRejected) {
  Rig rig("stale");
  rig.svc->commit_stale_once();
  auto st = rig.svc->run_round();
  EXPECT_EQ(st.phase, Phase::Failed);
  EXPECT_EQ(st.failure, "FreshnessViolation");
  auto y = rig.pulse(st.refs.at(kind::Y));
  EXPECT_EQ(y.payload.at("seed_round").as_int("seed_round"), y.payload.at("upstream_latest").as_int("upstream_latest"));
  EXPECT_FALSE(st.refs.count(kind::S));
  EXPECT_FALSE(st.refs.count(kind::Z));
  // The next round is fresh again.
  EXPECT_EQ(rig.svc->run_round().phase, Phase::Published);
}

TEST(Scan, OutputWithoutPassingCommitmentIsFlagged) {
  Rig rig("failclosed");
  auto ok = rig.svc->run_round();
  ASSERT_EQ(ok.phase, Phase::Published);
  Faults unit;
  unit.unit_pef = true;
  auto bad = rig.svc->run_round(unit);
  ASSERT_TRUE(bad.refs.count(kind::E));
  auto& s = rig.svc->store();
  EXPECT_TRUE(scan_rounds(s, rig.svc->service_chain(), rig.svc->bell_chain()).ok());

  // Forge a Z for the failed round reusing the earlier round's references.
  auto z = rig.pulse(ok.refs.at(kind::Z)).payload;
  z.as_mut<cbor::Map>()["round"] = bad.round;
  rig.svc->writer("service").append(z);
  auto scan = scan_rounds(s, rig.svc->service_chain(), rig.svc->bell_chain());
  ASSERT_FALSE(scan.ok());
  EXPECT_NE(scan.problems.front().find("without a passing precommitment"), std::string::npos);

  // A second decision for a decided round is flagged too.
  auto e = rig.pulse(bad.refs.at(kind::E)).payload;
  e.as_mut<cbor::Map>()["round"] = ok.round;
  rig.svc->writer("service").append(e);
  auto scan2 = scan_rounds(s, rig.svc->service_chain(), rig.svc->bell_chain());
  bool found = false;
  for (auto& p : scan2.problems) found |= p.find("exactly one Y/E") != std::string::npos;
  EXPECT_TRUE(found);
}

TEST(Service, RestartContinuesChainsAndRounds) {
  auto dir = fresh_dir("restart");
  auto cfg = small_config(dir);
  Cid svc_chain, z1;
  {
    Service s(cfg, std::make_unique<SteppingUpstream>(5));
    auto st = s.run_round();
    ASSERT_EQ(st.phase, Phase::Published);
    svc_chain = s.service_chain();
    z1 = st.refs.at(kind::Z);
  }
  {
    Service s(cfg, std::make_unique<SteppingUpstream>(50));
    EXPECT_EQ(s.service_chain(), svc_chain);
    auto st = s.run_round();
    EXPECT_EQ(st.round, 2);
    ASSERT_EQ(st.phase, Phase::Published);
    EXPECT_TRUE(audit_round(s.store(), z1).ok());
    EXPECT_TRUE(audit_round(s.store(), st.refs.at(kind::Z)).ok());
    EXPECT_TRUE(s.store().audit().ok());
    // Keys are sealed at rest.
    auto raw = KeyRing::read(dir / "keys" / "service.key");
    std::string text(raw.begin(), raw.end());
    EXPECT_EQ(text.find("PRIVATE KEY"), std::string::npos);
    EXPECT_EQ(std::filesystem::status(dir / "private").permissions() & std::filesystem::perms::others_all,
              std::filesystem::perms::none);
  }
  {
    auto wrong = cfg;
    wrong.passphrase = "nope";
    EXPECT_THROW(Service(wrong, std::make_unique<SteppingUpstream>(50)), Error);
  }
  std::filesystem::remove_all(dir);
}

TEST(Service, RunsAgainstHttpUpstream) {
  SteppingUpstream mock(300);
  upstream::UpstreamServer server(mock);
  int port = server.start("127.0.0.1", 0);
  Rig rig("http", [](Config&) {});
  auto cfg = small_config(rig.dir);
  rig.svc.reset();
  std::filesystem::remove_all(rig.dir);
  Service s(cfg, std::make_unique<upstream::HttpUpstream>("http://127.0.0.1:" + std::to_string(port)));
  auto st = s.run_round();
  ASSERT_EQ(st.phase, Phase::Published) << st.detail;
  auto y = twine::Pulse::parse(s.store().get_pulse(st.refs.at(kind::Y)));
  EXPECT_EQ(y.payload.at("upstream_latest").as_int("upstream_latest"), 300);
  EXPECT_EQ(y.payload.at("seed_round").as_int("seed_round"), 301);
  auto sp = twine::Pulse::parse(s.store().get_pulse(st.refs.at(kind::S)));
  EXPECT_EQ(sp.payload.at("randomness").as<Bytes>("randomness"), upstream::mock_value(301));
  server.stop();
}

TEST(Service, PrngChainStepsWithRounds) {
  Rig rig("prng", [](Config& c) {
    c.prng_chain = true;
    c.rsa_prime_bits = rsa::kToyPrimeBits;
  });
  for (int i = 0; i < 4; ++i) rig.svc->run_round();
  auto chain = rig.svc->prng_chain();
  ASSERT_TRUE(chain);
  auto& s = rig.svc->store();
  auto head = s.head(*chain);
  ASSERT_TRUE(head);
  EXPECT_EQ(head->head_index, 3);
  std::vector<twine::Pulse> ps;
  for (int i = 0; i <= 3; ++i) ps.push_back(twine::Pulse::parse(s.get_pulse(*chain, i)));
  for (int i = 0; i + 1 <= 3; ++i) EXPECT_TRUE(prng::verify_prng_pair(ps[i], ps[i + 1]));
  EXPECT_THROW(prng::output_value(ps[0]), Error);
  EXPECT_EQ(prng::output_value(ps[3]).size(), 64u);
  // Each PRNG pulse mixes in the service and seed chain heads of its time.
  for (auto& p : ps) {
    ASSERT_EQ(p.mixins.size(), 2u);
    EXPECT_EQ(p.mixins[0].chain, rig.svc->service_chain());
    EXPECT_EQ(p.mixins[1].chain, rig.svc->seed_chain());
  }

  // Reopening resumes the commit-reveal sequence from the journal.
  auto cfg = rig.svc->config();
  rig.svc.reset();
  rig.open(cfg);
  auto [next, cid] = rig.svc->step_prng();
  EXPECT_EQ(next.index, 4);
  EXPECT_TRUE(prng::verify_prng_pair(ps[3], next));
}
