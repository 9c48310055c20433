#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <thread>

#include "beacon/bellsim.hpp"
#include "beacon/certify.hpp"
#include "beacon/extract.hpp"
#include "beacon/prng_chain.hpp"
#include "beacon/rsaprng.hpp"
#include "beacon/store.hpp"
#include "beacon/threshold.hpp"
#include "beacon/twine.hpp"
#include "beacon/upstream.hpp"

// Round protocol across three chains:
//   service chain  X request, Y precommit, Z output, E error, A status
//   Bell chain     B queued, C complete (plus A calibration records)
//   seed chain     S external seed
// Cross-chain mixins make X < B < C < Y < S < Z provable from the ledger.
namespace beacon::curby {

namespace kind {
inline constexpr const char* A = "A";
inline constexpr const char* B = "B";
inline constexpr const char* C = "C";
inline constexpr const char* E = "E";
inline constexpr const char* S = "S";
inline constexpr const char* X = "X";
inline constexpr const char* Y = "Y";
inline constexpr const char* Z = "Z";
}  // namespace kind

// Error stages. The first three decide a round's data; exactly one of Y or
// an E with one of these stages follows every C.
namespace stage {
inline constexpr const char* data = "data";
inline constexpr const char* certify = "certify";
inline constexpr const char* commit = "commit";
inline constexpr const char* seed = "seed";
inline constexpr const char* output = "output";
inline constexpr const char* internal = "internal";
inline bool decides(const std::string& s) { return s == data || s == certify || s == commit; }
}  // namespace stage

inline const double kEps64 = std::ldexp(1.0, -64);

// ---------------------------------------------------------------------------
// Request payload

struct RequestPayload {
  pef::Pef pef;
  std::int64_t sigma = 512;
  std::uint64_t n_stop = 15000000;
  double eps = kEps64;
  double eps_h = 0.8 * kEps64;
  double eps_x = 0.2 * kEps64;
  double eps_b = 1e-3;
  std::uint64_t w = 0, r = 0, l = 0;
  double threshold = 0;
  Cid calibration_ref;

  static RequestPayload make(const pef::Pef& pef, std::int64_t sigma, std::uint64_t n_stop, double eps, double eps_b,
                             const Cid& calibration_ref) {
    RequestPayload p;
    p.pef = pef;
    p.sigma = sigma;
    p.n_stop = n_stop;
    p.eps = eps;
    p.eps_h = 0.8 * eps;
    p.eps_x = 0.2 * eps;
    p.eps_b = eps_b;
    p.threshold = static_cast<double>(entropy_threshold(sigma, p.eps_x));
    auto ex = trevisan::ExtractorParams::derive(2 * n_stop, p.threshold, static_cast<std::uint64_t>(sigma), p.eps_x);
    p.w = ex.w;
    p.r = ex.r;
    p.l = ex.l;
    p.calibration_ref = calibration_ref;
    return p;
  }

  cbor::Value to_value() const {
    cbor::Array f;
    for (double v : pef.f) f.push_back(cbor::real(v));
    return cbor::Map{{"beta", cbor::real(pef.beta)},
                     {"calibration", calibration_ref},
                     {"eps", cbor::real(eps)},
                     {"eps_b", cbor::real(eps_b)},
                     {"eps_h", cbor::real(eps_h)},
                     {"eps_x", cbor::real(eps_x)},
                     {"extractor", cbor::Map{{"l", l}, {"r", r}, {"w", w}}},
                     {"n_stop", n_stop},
                     {"pef", std::move(f)},
                     {"sigma", sigma},
                     {"threshold", cbor::real(threshold)}};
  }

  static RequestPayload from_value(const cbor::Value& v) {
    RequestPayload p;
    const auto& f = v.at("pef").as<cbor::Array>("pef");
    require(f.size() == 16, Errc::MalformedEncoding, "PEF must have 16 values");
    for (std::size_t i = 0; i < 16; ++i) p.pef.f[i] = cbor::as_real(f[i], "pef value");
    p.pef.beta = cbor::as_real(v.at("beta"), "beta");
    p.calibration_ref = v.at("calibration").as<Cid>("calibration");
    p.eps = cbor::as_real(v.at("eps"), "eps");
    p.eps_b = cbor::as_real(v.at("eps_b"), "eps_b");
    p.eps_h = cbor::as_real(v.at("eps_h"), "eps_h");
    p.eps_x = cbor::as_real(v.at("eps_x"), "eps_x");
    const auto& ex = v.at("extractor");
    p.l = static_cast<std::uint64_t>(ex.at("l").as_int("l"));
    p.r = static_cast<std::uint64_t>(ex.at("r").as_int("r"));
    p.w = static_cast<std::uint64_t>(ex.at("w").as_int("w"));
    p.n_stop = static_cast<std::uint64_t>(v.at("n_stop").as_int("n_stop"));
    p.sigma = v.at("sigma").as_int("sigma");
    p.threshold = cbor::as_real(v.at("threshold"), "threshold");
    return p;
  }

  // Empty when every derived field matches its inputs and the PEF is valid
  // for the committed model.
  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (std::fabs(eps_h + eps_x - eps) > 1e-12 * eps) out.push_back("eps_h + eps_x != eps");
    if (threshold != static_cast<double>(entropy_threshold(sigma, eps_x))) out.push_back("threshold inconsistent");
    if (w != trevisan::find_prime(2 * n_stop, static_cast<std::uint64_t>(sigma), eps_x))
      out.push_back("extractor w inconsistent");
    auto sl = trevisan::seed_length(w, static_cast<std::uint64_t>(sigma));
    if (sl.r != r || sl.l != l) out.push_back("seed length inconsistent");
    if (!(pef.beta > 0)) out.push_back("beta must be positive");
    else if (!pef::validate_pef(pef.f, pef.beta, pef::make_model(true, eps_b)).valid)
      out.push_back("PEF does not validate against the model");
    return out;
  }
};

struct Certificate {
  double log2_T = 0;
  double certified_bits = 0;
  double threshold = 0;
  bool passed = false;
  std::uint64_t n_used = 0;
  std::int64_t crossing = -1;

  static Certificate from(const pef::EntropyCertificate& c) {
    return {c.log2_T, c.certified_bits, c.threshold, c.passed, c.n_used,
            c.crossing_index ? static_cast<std::int64_t>(*c.crossing_index) : -1};
  }
  cbor::Value to_value() const {
    return cbor::Map{{"certified_bits", cbor::real(certified_bits)},
                     {"crossing", crossing},
                     {"log2_T", cbor::real(log2_T)},
                     {"n_used", n_used},
                     {"passed", passed},
                     {"threshold", cbor::real(threshold)}};
  }
  static Certificate from_value(const cbor::Value& v) {
    Certificate c;
    c.certified_bits = cbor::as_real(v.at("certified_bits"));
    c.crossing = v.at("crossing").as_int("crossing");
    c.log2_T = cbor::as_real(v.at("log2_T"));
    c.n_used = static_cast<std::uint64_t>(v.at("n_used").as_int("n_used"));
    c.passed = v.at("passed").as<bool>("passed");
    c.threshold = cbor::as_real(v.at("threshold"));
    return c;
  }
};

// ---------------------------------------------------------------------------
// Configuration

struct Config {
  std::filesystem::path store_dir = "beacon-data";
  std::string passphrase = "change-me";
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string admin_token;  // empty: gateway is read-only

  std::int64_t sigma = 512;
  std::uint64_t n_stop = 15000000;
  double eps = kEps64;
  double eps_b = 1e-3;
  std::uint64_t calibration_trials = 2000000;
  unsigned recalibrate_every = 1;  // rounds per PEF refresh

  bell::SourceParams source;
  std::uint64_t sim_seed = 1;
  double detect_delay_ns = 0;
  std::uint64_t timing_mc_trials = 100000;

  std::string upstream = "mock";  // "mock" or a base URL
  std::uint64_t mock_first_round = 1;
  int mock_period_ms = 3000;
  upstream::RetryPolicy retry;
  std::chrono::milliseconds seed_wait{30000};

  int round_interval_s = 60;
  bool prng_chain = true;
  unsigned rsa_prime_bits = rsa::kProductionPrimeBits;
  unsigned threads = 0;

  static Config load(const std::filesystem::path& path) {
    boost::property_tree::ptree t;
    try {
      boost::property_tree::read_ini(path.string(), t);
    } catch (const boost::property_tree::ini_parser_error& e) {
      fail(Errc::InvalidArgument, e.what());
    }
    return from_tree(t, path.parent_path());
  }

  static Config from_tree(const boost::property_tree::ptree& t, const std::filesystem::path& base = {}) {
    Config c;
    auto dir = t.get<std::string>("store.dir", c.store_dir.string());
    c.store_dir = std::filesystem::path(dir).is_absolute() || base.empty() ? std::filesystem::path(dir) : base / dir;
    c.passphrase = t.get("store.passphrase", c.passphrase);
    c.host = t.get("store.host", c.host);
    c.port = t.get("store.port", c.port);
    c.admin_token = t.get("store.admin_token", c.admin_token);
    c.sigma = t.get("request.sigma", c.sigma);
    c.n_stop = t.get("request.n_stop", c.n_stop);
    c.eps = t.get("request.eps", c.eps);
    c.eps_b = t.get("request.eps_b", c.eps_b);
    c.calibration_trials = t.get("request.calibration_trials", c.calibration_trials);
    c.recalibrate_every = t.get("request.recalibrate_every", c.recalibrate_every);
    c.source = source_from_tree(t, c.source);
    c.sim_seed = t.get("source.seed", c.sim_seed);
    c.detect_delay_ns = t.get("timing.detect_delay_ns", c.detect_delay_ns);
    c.timing_mc_trials = t.get("timing.mc_trials", c.timing_mc_trials);
    c.upstream = t.get("upstream.url", c.upstream);
    c.mock_first_round = t.get("upstream.mock_first_round", c.mock_first_round);
    c.mock_period_ms = t.get("upstream.mock_period_ms", c.mock_period_ms);
    c.retry.attempts = t.get("upstream.attempts", c.retry.attempts);
    c.retry.initial_backoff = std::chrono::milliseconds(t.get("upstream.backoff_ms", c.retry.initial_backoff.count()));
    c.seed_wait = std::chrono::milliseconds(t.get("upstream.seed_wait_ms", c.seed_wait.count()));
    c.round_interval_s = t.get("service.round_interval_s", c.round_interval_s);
    c.prng_chain = t.get("service.prng_chain", c.prng_chain);
    c.rsa_prime_bits = t.get("service.rsa_prime_bits", c.rsa_prime_bits);
    c.threads = t.get("service.threads", c.threads);
    require(c.sigma > 0 && c.n_stop > 0, Errc::InvalidArgument, "sigma and n_stop must be positive");
    require(c.eps > 0 && c.eps < 1, Errc::InvalidArgument, "eps must be in (0,1)");
    c.source.validate();
    return c;
  }

  static bell::SourceParams source_from_tree(const boost::property_tree::ptree& t, bell::SourceParams s = {}) {
    s.amp_hh = t.get("source.amp_hh", s.amp_hh);
    s.amp_vv = t.get("source.amp_vv", s.amp_vv);
    s.p_pair = t.get("source.p_pair", s.p_pair);
    s.eta_a = t.get("source.eta_a", s.eta_a);
    s.eta_b = t.get("source.eta_b", s.eta_b);
    s.dark = t.get("source.dark", s.dark);
    const char* names[4] = {"source.angle_a0", "source.angle_a1", "source.angle_b0", "source.angle_b1"};
    for (std::size_t i = 0; i < 4; ++i) s.angles[i] = t.get(names[i], s.angles[i]);
    return s;
  }
};

inline std::unique_ptr<upstream::Upstream> make_upstream(const Config& c) {
  if (c.upstream == "mock")
    return std::make_unique<upstream::MockUpstream>(c.mock_first_round, std::chrono::milliseconds(c.mock_period_ms));
  return std::make_unique<upstream::HttpUpstream>(c.upstream);
}

// ---------------------------------------------------------------------------
// Keys and chains owned by one service directory

class KeyRing {
 public:
  KeyRing(std::filesystem::path dir, std::string passphrase) : dir_(std::move(dir)), pass_(std::move(passphrase)) {
    std::filesystem::create_directories(dir_);
  }

  const crypto::SigningKey& get(const std::string& name) {
    auto it = keys_.find(name);
    if (it != keys_.end()) return it->second;
    auto path = dir_ / (name + ".key");
    if (std::filesystem::exists(path)) {
      Bytes pem = crypto::open(pass_, read(path));
      return keys_.emplace(name, crypto::SigningKey::from_pem(std::string(pem.begin(), pem.end()))).first->second;
    }
    auto key = crypto::SigningKey::generate(crypto::SigAlg::ES256);
    write(path, crypto::seal(pass_, to_bytes(key.to_pem())));
    return keys_.emplace(name, std::move(key)).first->second;
  }

  Bytes load_blob(const std::string& name) const { return crypto::open(pass_, read(dir_ / name)); }
  bool has_blob(const std::string& name) const { return std::filesystem::exists(dir_ / name); }
  void save_blob(const std::string& name, ByteView plain) const { write(dir_ / name, crypto::seal(pass_, plain)); }

  static Bytes read(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    require(in.good(), Errc::Io, "cannot read " + p.string());
    return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  }
  static void write(const std::filesystem::path& p, ByteView b) {
    auto tmp = p;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
      require(out.good(), Errc::Io, "cannot write " + tmp.string());
    }
    std::filesystem::permissions(tmp, std::filesystem::perms::owner_read | std::filesystem::perms::owner_write);
    std::filesystem::rename(tmp, p);
  }

 private:
  std::filesystem::path dir_;
  std::string pass_;
  std::map<std::string, crypto::SigningKey> keys_;
};

// Appends to one chain in a store, tracking its head.
class ChainWriter {
 public:
  ChainWriter(store::BeaconStore& st, const crypto::SigningKey& key, const std::string& source)
      : store_(st), key_(key) {
    for (const auto& [cid, src] : st.list_chains()) {
      if (src != source) continue;
      auto meta = twine::ChainMetadata::parse(st.get_chain(cid));
      if (meta.key == key.public_jwk()) {
        meta_ = meta;
        cid_ = cid;
      }
    }
    if (cid_.digest.empty()) {
      auto [meta, cid] = twine::build_chain(key, source, cbor::Map{}, 10);
      store_.put_chain(meta.bytes());
      meta_ = std::move(meta);
      cid_ = std::move(cid);
    }
    if (auto h = st.head(cid_)) head_ = twine::Pulse::parse(st.get_pulse(h->head_pulse));
  }

  Cid append(cbor::Value payload, std::vector<twine::Mixin> mixins = {}) {
    auto [p, cid] = twine::build_pulse(meta_, head_, store_, std::move(mixins), std::move(payload), twine::kTwineSpec, key_);
    store_.put_pulse(p.bytes());
    head_ = std::move(p);
    return cid;
  }

  const Cid& cid() const { return cid_; }
  const twine::ChainMetadata& meta() const { return meta_; }
  const std::optional<twine::Pulse>& head() const { return head_; }
  std::optional<Cid> head_cid() const { return head_ ? std::optional<Cid>(head_->cid()) : std::nullopt; }
  const crypto::SigningKey& key() const { return key_; }
  void set_head(twine::Pulse p) { head_ = std::move(p); }

 private:
  store::BeaconStore& store_;
  const crypto::SigningKey& key_;
  twine::ChainMetadata meta_;
  Cid cid_;
  std::optional<twine::Pulse> head_;
};

// ---------------------------------------------------------------------------
// Round state

enum class Phase { Requested, DataReady, Certified, SeedCommitted, Published, Failed };

inline std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::Requested: return "Requested";
    case Phase::DataReady: return "DataReady";
    case Phase::Certified: return "Certified";
    case Phase::SeedCommitted: return "SeedCommitted";
    case Phase::Published: return "Published";
    case Phase::Failed: return "Failed";
  }
  return "?";
}

struct RoundState {
  std::int64_t round = 0;
  Phase phase = Phase::Failed;
  std::map<std::string, Cid> refs;  // pulse kind -> Cid
  std::string failure;              // error name when phase == Failed
  std::string detail;
  std::optional<Certificate> certificate;
  Bytes output;
};

// Faults a test or drill can inject into one round.
struct Faults {
  bool white_noise_calibration = false;
  bool unit_pef = false;       // request commits to F = 1
  bool tamper_data = false;    // one byte of the trial file changes after C
  bool late_detection = false; // detection window beyond the lightcone
  bool upstream_down = false;  // every seed fetch attempt fails
  bool stale_commit = false;   // Y commits to an already published round
};

inline cbor::Value timing_value(double tau1, double tau2, const bell::TauStats& st) {
  return cbor::Map{{"std1", cbor::real(st.std1)},
                   {"std2", cbor::real(st.std2)},
                   {"tau1", cbor::real(tau1)},
                   {"tau2", cbor::real(tau2)},
                   {"tau_min", cbor::real(std::min(tau1, tau2))}};
}

inline Bytes file_hash(const pef::TrialBlock& t) { return crypto::sha3_512_bytes(t.to_file_bytes()); }

class Service {
 public:
  Service(Config cfg, std::unique_ptr<upstream::Upstream> up)
      : cfg_(std::move(cfg)),
        up_(std::move(up)),
        store_(cfg_.store_dir / "store"),
        keys_(cfg_.store_dir / "keys", cfg_.passphrase),
        service_(store_, keys_.get("service"), "curby-q"),
        bell_(store_, keys_.get("bell"), "bell-responder"),
        seed_(store_, keys_.get("seed"), "drand-wrapper") {
    std::filesystem::create_directories(private_dir());
    std::filesystem::permissions(private_dir(), std::filesystem::perms::owner_all);
    if (service_.head()) {
      next_round_ = service_.head()->payload.at("round").as_int("round") + 1;
    } else {
      service_.append(status_payload(0, "started"));
      next_round_ = 1;
    }
  }

  explicit Service(Config cfg) : Service(cfg, make_upstream(cfg)) {}

  const Config& config() const { return cfg_; }
  store::BeaconStore& store() { return store_; }
  upstream::Upstream& upstream() { return *up_; }
  const Cid& service_chain() const { return service_.cid(); }
  const Cid& bell_chain() const { return bell_.cid(); }
  const Cid& seed_chain() const { return seed_.cid(); }
  std::optional<Cid> prng_chain() const { return prng_ ? std::optional<Cid>(prng_->cid()) : std::nullopt; }
  std::filesystem::path private_dir() const { return cfg_.store_dir / "private"; }
  std::filesystem::path trials_path(ByteView hash) const { return private_dir() / (to_hex(hash) + ".twbt"); }

  // Hook for tests: replaces the sleep between retries.
  std::function<void(std::chrono::milliseconds)> sleeper;

  RoundState run_round(const Faults& f = {}) {
    RoundState st;
    st.round = next_round_++;
    try {
      auto [cal, cal_ref] = calibration(st.round, f);
      if (f.stale_commit) stale_ = true;
      if (!make_request(st, cal, cal_ref, f)) return finish_prng(st);
      pef::TrialBlock trials;
      if (!serve_request(st, f, trials)) return finish_prng(st);
      if (f.tamper_data) {
        Bytes file = trials.to_file_bytes();
        file[file.size() / 2] ^= 0x01;
        trials = pef::TrialBlock::from_file_bytes(file);
      }
      if (!process_response(st, trials)) return finish_prng(st);
      if (!fetch_seed(st, f)) return finish_prng(st);
      publish_output(st, trials);
    } catch (const Error& e) {
      fail_round(st, stage::internal, e);
    }
    return finish_prng(st);
  }

  // X: commit to a PEF fitted on calibration data. NoPositiveRate yields a
  // degraded status pulse instead of a request.
  bool make_request(RoundState& st, const pef::TrialBlock& cal, const Cid& cal_ref, const Faults& f) {
    pef::Pef pef;
    try {
      pef = fitted_pef(cal, f.white_noise_calibration);
    } catch (const Error& e) {
      if (e.code() != Errc::NoPositiveRate) throw;
      st.refs[kind::A] = service_.append(status_payload(st.round, "degraded", e.what()));
      st.phase = Phase::Failed;
      st.failure = std::string(errc_name(e.code()));
      st.detail = e.what();
      return false;
    }
    if (f.unit_pef) pef.f.fill(1.0);
    auto req = RequestPayload::make(pef, cfg_.sigma, cfg_.n_stop, cfg_.eps, cfg_.eps_b, cal_ref);
    auto payload = base_payload(kind::X, st.round);
    payload.as_mut<cbor::Map>()["request"] = req.to_value();
    st.refs[kind::X] = service_.append(std::move(payload));
    st.phase = Phase::Requested;
    return true;
  }

  // Bell responder: B, the trial run, then C with the file hash and timing
  // audit. A timing violation marks C invalid and the round fails.
  bool serve_request(RoundState& st, const Faults& f, pef::TrialBlock& trials) {
    const Cid& x = st.refs.at(kind::X);
    auto xp = twine::Pulse::parse(store_.get_pulse(x));
    require(twine::verify_pulse(xp, x, service_.meta(), store_).ok(), Errc::VerificationFailed, "request pulse");
    auto req = RequestPayload::from_value(xp.payload.at("request"));
    auto probs = req.problems();
    require(probs.empty(), Errc::VerificationFailed, probs.empty() ? "" : probs.front());

    auto b = base_payload(kind::B, st.round);
    b.as_mut<cbor::Map>()["request"] = x;
    st.refs[kind::B] = bell_.append(std::move(b), {{service_.cid(), x}});

    trials = bell::sample_trials(cfg_.source, req.n_stop, req.eps_b, round_seed(st.round), threads());
    trials.set_meta(cbor::Map{{"request", x}, {"round", st.round}});
    Bytes file = trials.to_file_bytes();
    Bytes hash = crypto::sha3_512_bytes(file);
    KeyRing::write(trials_path(hash), file);

    auto scen = bell::paper_timing_scenario();
    double delay = cfg_.detect_delay_ns + (f.late_detection ? 100.0 : 0.0);
    scen.last_detect_a += delay;
    scen.last_detect_b += delay;
    auto ts = bell::timing_mc(scen, std::max<std::uint64_t>(cfg_.timing_mc_trials, 2), round_seed(st.round) ^ 0x7a11);
    bool valid = std::min(scen.tau1(), scen.tau2()) > 0;

    auto c = base_payload(kind::C, st.round);
    auto& cm = c.as_mut<cbor::Map>();
    cm["request"] = x;
    cm["hash"] = hash;
    cm["n"] = trials.size();
    cm["timing"] = timing_value(scen.tau1(), scen.tau2(), ts);
    cm["valid"] = valid;
    st.refs[kind::C] = bell_.append(std::move(c));
    st.phase = Phase::DataReady;
    if (!valid) {
      emit_error(st, stage::data, Errc::TimingViolation, "a trial's detection is not spacelike separated");
      return false;
    }
    return true;
  }

  // Y or E: certify the disclosed trials with the precommitted PEF.
  bool process_response(RoundState& st, const pef::TrialBlock& trials) {
    auto cp = twine::Pulse::parse(store_.get_pulse(st.refs.at(kind::C)));
    if (file_hash(trials) != cp.payload.at("hash").as<Bytes>("hash")) {
      emit_error(st, stage::data, Errc::DataHashMismatch, "trial file does not match the published hash");
      return false;
    }
    const Cid x = cp.payload.at("request").as<Cid>("request");
    auto req = RequestPayload::from_value(twine::Pulse::parse(store_.get_pulse(x)).payload.at("request"));
    if (trials.size() != req.n_stop) {
      emit_error(st, stage::data, Errc::InvalidArgument, "trial count differs from n_stop");
      return false;
    }
    auto cert = Certificate::from(pef::certify(trials, req.pef, req.eps_h, req.threshold));
    st.certificate = cert;
    if (!cert.passed) {
      emit_error(st, stage::certify, Errc::EntropyTooLow, "certificate below threshold", cert.to_value());
      return false;
    }
    upstream::Round latest;
    try {
      latest = upstream::with_retry(cfg_.retry, [&] { return up_->latest(); }, sleeper);
    } catch (const Error& e) {
      emit_error(st, stage::commit, e.code(), e.what(), cert.to_value());
      return false;
    }
    std::uint64_t target = latest.round + 1;
    if (stale_) target = latest.round;
    stale_ = false;
    auto y = base_payload(kind::Y, st.round);
    auto& ym = y.as_mut<cbor::Map>();
    ym["request"] = x;
    ym["response"] = st.refs.at(kind::C);
    ym["data_hash"] = cp.payload.at("hash");
    ym["certificate"] = cert.to_value();
    ym["seed_round"] = target;
    ym["upstream_latest"] = latest.round;
    ym["upstream"] = up_->name();
    st.refs[kind::Y] = service_.append(std::move(y), {{bell_.cid(), st.refs.at(kind::C)}});
    last_pass_ = {st.refs.at(kind::C), cp.payload.at("hash").as<Bytes>("hash")};
    st.phase = Phase::Certified;
    return true;
  }

  // S: the committed upstream round, once it exists.
  bool fetch_seed(RoundState& st, const Faults& f) {
    auto yp = twine::Pulse::parse(store_.get_pulse(st.refs.at(kind::Y)));
    auto target = static_cast<std::uint64_t>(yp.payload.at("seed_round").as_int("seed_round"));
    auto latest_at_commit = static_cast<std::uint64_t>(yp.payload.at("upstream_latest").as_int("upstream_latest"));
    if (target <= latest_at_commit) {
      emit_error(st, stage::seed, Errc::FreshnessViolation, "committed seed round was already public");
      return false;
    }
    std::optional<upstream::Round> got;
    try {
      auto deadline = std::chrono::steady_clock::now() + cfg_.seed_wait;
      for (;;) {
        got = upstream::with_retry(
            cfg_.retry,
            [&] {
              if (f.upstream_down) fail(Errc::UpstreamUnavailable, "upstream unreachable (injected)");
              return up_->round(target);
            },
            sleeper);
        if (got) break;
        require(std::chrono::steady_clock::now() < deadline, Errc::UpstreamUnavailable,
                "committed round did not appear in time");
        std::this_thread::sleep_for(std::chrono::milliseconds(std::clamp(cfg_.mock_period_ms / 4, 1, 500)));
      }
    } catch (const Error& e) {
      emit_error(st, stage::seed, e.code(), e.what());
      return false;
    }
    auto s = base_payload(kind::S, st.round);
    auto& sm = s.as_mut<cbor::Map>();
    sm["commit"] = st.refs.at(kind::Y);
    sm["seed_round"] = got->round;
    sm["randomness"] = got->randomness;
    sm["upstream"] = up_->name();
    st.refs[kind::S] = seed_.append(std::move(s), {{service_.cid(), st.refs.at(kind::Y)}});
    st.phase = Phase::SeedCommitted;
    return true;
  }

  // Z: extractor output from the trials and the expanded seed.
  bool publish_output(RoundState& st, const pef::TrialBlock& trials) {
    try {
      auto yp = twine::Pulse::parse(store_.get_pulse(st.refs.at(kind::Y)));
      auto sp = twine::Pulse::parse(store_.get_pulse(st.refs.at(kind::S)));
      require(sp.payload.at("commit").as<Cid>("commit") == st.refs.at(kind::Y), Errc::VerificationFailed,
              "seed pulse answers another commitment");
      require(sp.payload.at("seed_round").as_int("seed_round") == yp.payload.at("seed_round").as_int("seed_round"),
              Errc::VerificationFailed, "seed round differs from the commitment");
      auto req = RequestPayload::from_value(
          twine::Pulse::parse(store_.get_pulse(yp.payload.at("request").as<Cid>("request"))).payload.at("request"));
      auto cert = Certificate::from_value(yp.payload.at("certificate"));
      BitString out = output_bits(trials, req, cert, sp.payload.at("randomness").as<Bytes>("randomness"), threads());
      auto z = base_payload(kind::Z, st.round);
      auto& zm = z.as_mut<cbor::Map>();
      zm["output"] = out.bytes();
      zm["request"] = st.refs.at(kind::X);
      zm["queued"] = st.refs.at(kind::B);
      zm["response"] = st.refs.at(kind::C);
      zm["precommit"] = st.refs.at(kind::Y);
      zm["seed"] = st.refs.at(kind::S);
      st.refs[kind::Z] = service_.append(std::move(z), {{seed_.cid(), st.refs.at(kind::S)}});
      st.output = out.bytes();
      st.phase = Phase::Published;
      return true;
    } catch (const Error& e) {
      emit_error(st, stage::output, e.code(), e.what());
      return false;
    }
  }

  static BitString output_bits(const pef::TrialBlock& trials, const RequestPayload& req, const Certificate& cert,
                               ByteView randomness, unsigned threads = 0) {
    BitString seed = trevisan::expand_seed(randomness, req.l);
    return trevisan::extract(trials.outcome_bits(), seed, cert.certified_bits, static_cast<std::uint64_t>(req.sigma),
                             req.eps_x, threads);
  }

  // Direct append access for drills that forge records.
  ChainWriter& writer(const std::string& role) {
    if (role == "service") return service_;
    if (role == "bell") return bell_;
    if (role == "seed") return seed_;
    fail(Errc::InvalidArgument, "unknown chain role " + role);
  }

  // Test hook: the next commitment targets the current upstream round.
  void commit_stale_once() { stale_ = true; }

  // PRNG chain stepped once per round, mixing in the latest service and seed
  // pulses.
  void enable_prng() {
    if (prng_) return;
    auto& key = keys_.get("prng");
    prng_ = std::make_unique<ChainWriter>(store_, key, "prng");
    rsa::RsaPrngState state;
    if (keys_.has_blob("rsaprng.state")) {
      state = rsa::RsaPrngState::from_value(cbor::parse(keys_.load_blob("rsaprng.state")));
    } else {
      SystemRandom sys;
      state = rsa::generate(cfg_.rsa_prime_bits, sys);
    }
    sources_ = std::make_unique<prng::LocalSources>(prng::LocalSources::standard(state));
    journal_ = std::make_unique<prng::PrngJournal>(cfg_.store_dir / "keys" / "prng.journal", cfg_.passphrase);
    builder_ = std::make_unique<prng::PrngChainBuilder>(
        prng_->meta(), key, store_, *journal_, *sources_,
        [this](const twine::Pulse& p, const Cid&, const Bytes& b) {
          store_.put_pulse(b);
          prng_->set_head(p);
        },
        prng_->head());
  }

  std::pair<twine::Pulse, Cid> step_prng() {
    enable_prng();
    std::vector<twine::Mixin> mx;
    if (auto h = service_.head_cid()) mx.push_back({service_.cid(), *h});
    if (auto h = seed_.head_cid()) mx.push_back({seed_.cid(), *h});
    auto out = builder_->step(std::move(mx));
    auto& rsa_src = dynamic_cast<rsa::RsaRandom&>(sources_->source(2));
    keys_.save_blob("rsaprng.state", cbor::serialize(rsa_src.state().to_value()));
    return out;
  }

 private:
  RoundState& finish_prng(RoundState& st) {
    if (cfg_.prng_chain) {
      try {
        step_prng();
      } catch (const Error&) {
        // The PRNG chain is independent of the round outcome.
      }
    }
    return st;
  }

  unsigned threads() const { return cfg_.threads ? cfg_.threads : std::max(1u, std::thread::hardware_concurrency()); }
  std::uint64_t round_seed(std::int64_t round) const {
    return cfg_.sim_seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(round);
  }

  cbor::Value base_payload(const char* k, std::int64_t round) const {
    return cbor::Map{{"kind", k}, {"round", round}, {"time_ms", store::detail::now_ms()}};
  }

  cbor::Value status_payload(std::int64_t round, const std::string& status, const std::string& detail = "") const {
    auto p = base_payload(kind::A, round);
    p.as_mut<cbor::Map>()["status"] = status;
    if (!detail.empty()) p.as_mut<cbor::Map>()["detail"] = detail;
    return p;
  }

  void emit_error(RoundState& st, const char* stg, Errc code, const std::string& why,
                  cbor::Value certificate = cbor::Null{}) {
    auto e = base_payload(kind::E, st.round);
    auto& em = e.as_mut<cbor::Map>();
    em["stage"] = stg;
    em["error"] = std::string(errc_name(code));
    em["detail"] = why;
    em["certificate"] = std::move(certificate);
    std::vector<twine::Mixin> mx;
    if (st.refs.count(kind::S)) mx.push_back({seed_.cid(), st.refs.at(kind::S)});
    else if (st.refs.count(kind::C)) mx.push_back({bell_.cid(), st.refs.at(kind::C)});
    st.refs[kind::E] = service_.append(std::move(e), std::move(mx));
    st.phase = Phase::Failed;
    st.failure = std::string(errc_name(code));
    st.detail = why;
  }

  void fail_round(RoundState& st, const char* stg, const Error& e) {
    if (st.refs.count(kind::E)) return;
    try {
      emit_error(st, stg, e.code(), e.what());
    } catch (const Error&) {
      st.phase = Phase::Failed;
      st.failure = std::string(errc_name(e.code()));
    }
  }

  // Calibration data: a prefix of the last passing round's trials, or a
  // fresh simulated run published on the Bell chain as an A record.
  std::pair<pef::TrialBlock, Cid> calibration(std::int64_t round, const Faults& f) {
    if (f.white_noise_calibration) {
      bell::SourceParams noise;
      noise.p_pair = 0;
      noise.dark = 0.5;
      auto cal = bell::sample_trials(noise, cfg_.calibration_trials, cfg_.eps_b, round_seed(round) ^ 0xca1, threads());
      Cid ref = publish_calibration(file_hash(cal), cal.size(), round);
      return {std::move(cal), ref};
    }
    bool due = last_pass_ && rounds_since_fit_ + 1 >= cfg_.recalibrate_every;
    if (cal_ && !due) return *cal_;
    if (due) {
      auto full = pef::TrialBlock::from_file_bytes(KeyRing::read(trials_path(last_pass_->second)));
      auto n = std::min<std::uint64_t>(full.size(), cfg_.calibration_trials);
      cal_ = {full.slice(0, n), last_pass_->first};
      return *cal_;
    }
    auto cal = bell::sample_trials(cfg_.source, cfg_.calibration_trials, cfg_.eps_b, round_seed(round) ^ 0xca1, threads());
    Cid ref = publish_calibration(file_hash(cal), cal.size(), round);
    cal_ = {std::move(cal), ref};
    return *cal_;
  }

  Cid publish_calibration(const Bytes& hash, std::uint64_t n, std::int64_t round) {
    auto a = status_payload(round, "calibration");
    a.as_mut<cbor::Map>()["hash"] = hash;
    a.as_mut<cbor::Map>()["n"] = n;
    return bell_.append(std::move(a));
  }

  pef::Pef fitted_pef(const pef::TrialBlock& cal, bool uncached) {
    Bytes h = file_hash(cal);
    if (!uncached && fit_ && fit_->first == h) {
      ++rounds_since_fit_;
      return fit_->second;
    }
    auto model = pef::make_model(true, cfg_.eps_b);
    auto mle = pef::mle_conditional(cal.counts(), model);
    double eps_x = 0.2 * cfg_.eps;
    double sigma_h = static_cast<double>(entropy_threshold(cfg_.sigma, eps_x));
    auto best = pef::optimize_beta(mle.mu, pef::kUniformSettings, model, sigma_h, 0.8 * cfg_.eps);
    if (!uncached) {
      fit_ = {h, best.best.pef};
      rounds_since_fit_ = 0;
    }
    return best.best.pef;
  }

  Config cfg_;
  std::unique_ptr<upstream::Upstream> up_;
  store::BeaconStore store_;
  KeyRing keys_;
  ChainWriter service_, bell_, seed_;
  std::unique_ptr<ChainWriter> prng_;
  std::unique_ptr<prng::LocalSources> sources_;
  std::unique_ptr<prng::PrngJournal> journal_;
  std::unique_ptr<prng::PrngChainBuilder> builder_;
  std::int64_t next_round_ = 1;
  bool stale_ = false;
  std::optional<std::pair<pef::TrialBlock, Cid>> cal_;
  std::optional<std::pair<Cid, Bytes>> last_pass_;  // (C pulse, trial file hash)
  std::optional<std::pair<Bytes, pef::Pef>> fit_;
  unsigned rounds_since_fit_ = 0;
};

// ---------------------------------------------------------------------------
// Auditing from the public record

struct AuditOptions {
  std::optional<pef::Pef> pef_override;     // re-certify with another PEF
  upstream::Upstream* upstream = nullptr;   // cross-check the seed value
};

struct RoundAudit {
  std::int64_t round = -1;
  std::vector<std::string> problems;
  std::optional<Certificate> recertified;
  bool ok() const { return problems.empty(); }
};

namespace detail {

inline std::optional<twine::Pulse> verified(const store::BeaconStore& st, const Cid& cid, const char* want_kind,
                                            std::int64_t round, std::vector<std::string>& problems) {
  try {
    auto p = twine::Pulse::parse(st.get_pulse(cid));
    auto meta = twine::ChainMetadata::parse(st.get_chain(p.chain));
    if (!twine::verify_pulse(p, cid, meta, st).ok()) problems.push_back(std::string(want_kind) + " pulse fails verification");
    if (p.payload.at("kind").as_text("kind") != want_kind) problems.push_back(std::string(want_kind) + " pulse has the wrong kind");
    if (round >= 0 && p.payload.at("round").as_int("round") != round)
      problems.push_back(std::string(want_kind) + " pulse belongs to another round");
    return p;
  } catch (const Error& e) {
    problems.push_back(std::string(want_kind) + " pulse unavailable: " + e.what());
    return std::nullopt;
  }
}

inline std::vector<twine::Pulse> chain_pulses(const store::BeaconStore& st, const Cid& chain) {
  std::vector<twine::Pulse> out;
  auto h = st.head(chain);
  if (!h) return out;
  out.reserve(static_cast<std::size_t>(h->head_index + 1));
  for (std::int64_t i = 0; i <= h->head_index; ++i) out.push_back(twine::Pulse::parse(st.get_pulse(chain, i)));
  return out;
}

inline std::optional<std::string> text_field(const twine::Pulse& p, const char* key) {
  const auto& m = p.payload.as<cbor::Map>("payload");
  auto it = m.find(key);
  if (it == m.end() || !std::holds_alternative<std::string>(it->second.v)) return std::nullopt;
  return std::get<std::string>(it->second.v);
}

inline std::optional<Cid> cid_field(const twine::Pulse& p, const char* key) {
  const auto& m = p.payload.as<cbor::Map>("payload");
  auto it = m.find(key);
  if (it == m.end() || !std::holds_alternative<Cid>(it->second.v)) return std::nullopt;
  return std::get<Cid>(it->second.v);
}

}  // namespace detail

// Checks one published round end to end. Without trials the audit covers
// signatures, ordering, parameter consistency, timing, freshness and
// equivocation; with trials it also re-certifies and recomputes the output.
inline RoundAudit audit_round(const store::BeaconStore& st, const Cid& z_cid, const pef::TrialBlock* trials = nullptr,
                              const AuditOptions& opt = {}) {
  RoundAudit a;
  auto& P = a.problems;
  auto z = detail::verified(st, z_cid, kind::Z, -1, P);
  if (!z) return a;
  try {
    a.round = z->payload.at("round").as_int("round");
    const auto& zp = z->payload;
    Cid xc = zp.at("request").as<Cid>("request"), bc = zp.at("queued").as<Cid>("queued"),
        cc = zp.at("response").as<Cid>("response"), yc = zp.at("precommit").as<Cid>("precommit"),
        sc = zp.at("seed").as<Cid>("seed");
    auto x = detail::verified(st, xc, kind::X, a.round, P);
    auto b = detail::verified(st, bc, kind::B, a.round, P);
    auto c = detail::verified(st, cc, kind::C, a.round, P);
    auto y = detail::verified(st, yc, kind::Y, a.round, P);
    auto s = detail::verified(st, sc, kind::S, a.round, P);
    if (!x || !b || !c || !y || !s) return a;

    if (!(b->payload.at("request").as<Cid>("request") == xc)) P.push_back("B does not answer X");
    if (!(c->payload.at("request").as<Cid>("request") == xc)) P.push_back("C does not answer X");
    if (!(y->payload.at("request").as<Cid>("request") == xc)) P.push_back("Y does not bind X");
    if (!(y->payload.at("response").as<Cid>("response") == cc)) P.push_back("Y does not bind C");
    if (!(s->payload.at("commit").as<Cid>("commit") == yc)) P.push_back("S does not answer Y");
    if (y->chain != x->chain || z->chain != x->chain) P.push_back("X, Y and Z are on different chains");

    const std::pair<Cid, Cid> order[] = {{xc, bc}, {bc, cc}, {cc, yc}, {yc, sc}, {sc, z_cid}};
    const char* names[] = {"X<B", "B<C", "C<Y", "Y<S", "S<Z"};
    for (std::size_t i = 0; i < 5; ++i) {
      auto proof = twine::prove_order(order[i].first, order[i].second, st);
      if (!proof || !(proof->earlier == order[i].first) || !twine::verify_order_proof(*proof, st))
        P.push_back(std::string("no order proof for ") + names[i]);
    }

    auto req = RequestPayload::from_value(x->payload.at("request"));
    for (auto& pr : req.problems()) P.push_back("request: " + pr);
    const auto& cp = c->payload;
    if (static_cast<std::uint64_t>(cp.at("n").as_int("n")) != req.n_stop) P.push_back("C trial count differs from n_stop");
    if (!cp.at("valid").as<bool>("valid")) P.push_back("C reports a timing violation");
    if (!(cbor::as_real(cp.at("timing").at("tau_min")) > 0)) P.push_back("timing margin is not positive");

    const auto& yp = y->payload;
    auto cert = Certificate::from_value(yp.at("certificate"));
    if (!cert.passed) P.push_back("certificate did not pass");
    if (cert.threshold != req.threshold) P.push_back("certificate threshold differs from the request");
    if (yp.at("data_hash").as<Bytes>("data_hash") != cp.at("hash").as<Bytes>("hash")) P.push_back("Y data hash differs from C");
    auto target = yp.at("seed_round").as_int("seed_round");
    if (target <= yp.at("upstream_latest").as_int("upstream_latest")) P.push_back("seed round was not fresh at commitment");
    const auto& sp = s->payload;
    if (sp.at("seed_round").as_int("seed_round") != target) P.push_back("S carries another round than committed");
    Bytes randomness = sp.at("randomness").as<Bytes>("randomness");
    if (randomness.size() != 64) P.push_back("seed is not 512 bits");
    if (opt.upstream) {
      auto r = opt.upstream->round(static_cast<std::uint64_t>(target));
      if (!r || r->randomness != randomness) P.push_back("seed differs from the upstream round");
    }

    // Equivocation: one S per commitment, one Z per precommit, one decision
    // per round.
    int s_count = 0;
    for (const auto& p : detail::chain_pulses(st, s->chain))
      if (auto cm = detail::cid_field(p, "commit"); cm && *cm == yc) ++s_count;
    if (s_count != 1) P.push_back("seed chain answers the commitment " + std::to_string(s_count) + " times");
    int z_count = 0, decisions = 0;
    for (const auto& p : detail::chain_pulses(st, z->chain)) {
      if (p.payload.at("round").as_int("round") != a.round) continue;
      auto k = detail::text_field(p, "kind");
      if (k == kind::Z) ++z_count;
      if (k == kind::Y) ++decisions;
      if (k == kind::E && stage::decides(detail::text_field(p, "stage").value_or(""))) ++decisions;
    }
    if (z_count != 1) P.push_back("round has " + std::to_string(z_count) + " outputs");
    if (decisions != 1) P.push_back("round has " + std::to_string(decisions) + " Y/E decisions");

    Bytes out = zp.at("output").as<Bytes>("output");
    if (out.size() != static_cast<std::size_t>((req.sigma + 7) / 8)) P.push_back("output length differs from sigma");

    if (trials) {
      if (file_hash(*trials) != cp.at("hash").as<Bytes>("hash")) {
        P.push_back("trial file does not match the published hash");
        return a;
      }
      pef::Pef f = opt.pef_override.value_or(req.pef);
      auto re = Certificate::from(pef::certify(*trials, f, req.eps_h, req.threshold));
      a.recertified = re;
      auto close = [](double u, double v) { return std::fabs(u - v) <= 1e-9 * std::max(1.0, std::fabs(v)); };
      if (re.passed != cert.passed || re.n_used != cert.n_used || !close(re.log2_T, cert.log2_T) ||
          !close(re.certified_bits, cert.certified_bits))
        P.push_back("re-certification disagrees with the published certificate");
      else if (Service::output_bits(*trials, req, re, randomness).bytes() != out)
        P.push_back("recomputed output differs");
    }
  } catch (const Error& e) {
    P.push_back(std::string("malformed round record: ") + e.what());
  }
  return a;
}

struct ScanReport {
  std::int64_t rounds = 0, published = 0, failed = 0;
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

// Ledger-wide invariants: no output without a passing precommitment, and one
// decision (Y or a deciding E) for every completed data run.
inline ScanReport scan_rounds(const store::BeaconStore& st, const Cid& service_chain, const Cid& bell_chain) {
  ScanReport r;
  struct Seen {
    int c = 0, y = 0, e = 0, z = 0;
    std::optional<Cid> y_cid, z_pre;
    bool y_passed = false;
  };
  std::map<std::int64_t, Seen> by_round;
  for (const auto& p : detail::chain_pulses(st, bell_chain))
    if (detail::text_field(p, "kind") == kind::C) ++by_round[p.payload.at("round").as_int("round")].c;
  for (const auto& p : detail::chain_pulses(st, service_chain)) {
    auto k = detail::text_field(p, "kind");
    auto& s = by_round[p.payload.at("round").as_int("round")];
    if (k == kind::Y) {
      ++s.y;
      s.y_cid = p.cid();
      s.y_passed = Certificate::from_value(p.payload.at("certificate")).passed;
    } else if (k == kind::E && stage::decides(detail::text_field(p, "stage").value_or(""))) {
      ++s.e;
    } else if (k == kind::Z) {
      ++s.z;
      s.z_pre = detail::cid_field(p, "precommit");
    }
  }
  for (const auto& [round, s] : by_round) {
    if (round == 0) continue;
    ++r.rounds;
    auto tag = "round " + std::to_string(round) + ": ";
    if (s.z > 0) {
      ++r.published;
      if (s.z > 1) r.problems.push_back(tag + "more than one output");
      if (!s.y_cid || !s.y_passed || !s.z_pre || !(*s.z_pre == *s.y_cid))
        r.problems.push_back(tag + "output without a passing precommitment");
    } else {
      ++r.failed;
    }
    if (s.c > 1) r.problems.push_back(tag + "more than one data run");
    if (s.c == 1 && s.y + s.e != 1) r.problems.push_back(tag + "expected exactly one Y/E decision");
    if (s.c == 0 && s.y + s.e > 0) r.problems.push_back(tag + "decision without a data run");
  }
  return r;
}

}  // namespace beacon::curby
