#include <atomic>
#include <csignal>
#include <iostream>

// Eigen (via orchestrator) must precede httplib, whose resolver headers
// define a `_res` macro.
#include "beacon/orchestrator.hpp"
#include "beacon/gateway.hpp"
#include "CLI11.hpp"
#include "json.hpp"

using namespace beacon;
using nlohmann::json;

namespace {

std::atomic<bool> g_stop{false};

json to_json(const cbor::Value& v) {
  return std::visit(
      [](const auto& x) -> json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, cbor::Null>) return nullptr;
        else if constexpr (std::is_same_v<T, Bytes>) return to_hex(x);
        else if constexpr (std::is_same_v<T, Cid>) return json{{"/", x.to_string()}};
        else if constexpr (std::is_same_v<T, cbor::Array>) {
          auto a = json::array();
          for (const auto& e : x) a.push_back(to_json(e));
          return a;
        } else if constexpr (std::is_same_v<T, cbor::Map>) {
          auto o = json::object();
          for (const auto& [k, e] : x) o[k] = to_json(e);
          return o;
        } else return x;
      },
      v.v);
}

json pulse_json(const twine::Pulse& p) {
  json links = json::array(), mixins = json::array();
  for (const auto& l : p.links) links.push_back(l.to_string());
  for (const auto& m : p.mixins) mixins.push_back({{"chain", m.chain.to_string()}, {"pulse", m.pulse.to_string()}});
  return {{"chain", p.chain.to_string()}, {"index", p.index}, {"links", links}, {"mixins", mixins},
          {"payload", to_json(p.payload)}};
}

json cert_json(const curby::Certificate& c) {
  return {{"log2_T", c.log2_T}, {"certified_bits", c.certified_bits}, {"threshold", c.threshold},
          {"passed", c.passed}, {"n_used", c.n_used}, {"crossing", c.crossing}};
}

// Prints `report` and returns the process exit status.
int emit(const json& report, bool as_json, bool ok) {
  if (as_json) {
    std::cout << report.dump(2) << "\n";
  } else {
    for (const auto& [k, v] : report.items()) std::cout << k << ": " << (v.is_string() ? v.get<std::string>() : v.dump()) << "\n";
  }
  return ok ? 0 : 1;
}

struct Globals {
  std::string config = "beacon.ini";
  std::string store_dir;
  bool json = false;

  curby::Config load() const {
    curby::Config c = std::filesystem::exists(config) ? curby::Config::load(config) : curby::Config{};
    if (!store_dir.empty()) c.store_dir = store_dir;
    return c;
  }
};

twine::Pulse load_pulse(const store::BeaconStore& st, const Cid& c) { return twine::Pulse::parse(st.get_pulse(c)); }

json round_json(const curby::RoundState& r) {
  json refs = json::object();
  for (const auto& [k, c] : r.refs) refs[k] = c.to_string();
  json j{{"round", r.round}, {"phase", std::string(curby::phase_name(r.phase))}, {"refs", refs}};
  if (!r.failure.empty()) j["error"] = r.failure;
  if (!r.detail.empty()) j["detail"] = r.detail;
  if (r.certificate) j["certificate"] = cert_json(*r.certificate);
  if (!r.output.empty()) j["output"] = to_hex(r.output);
  return j;
}

int cmd_run(const Globals& g, int max_rounds) {
  auto cfg = g.load();
  curby::Service svc(cfg);
  std::map<std::string, std::string> tokens;
  if (!cfg.admin_token.empty()) tokens["*"] = cfg.admin_token;
  store::Gateway gw(svc.store(), tokens);
  int port = gw.start(cfg.host, cfg.port);
  std::cerr << "serving " << cfg.host << ":" << port << "\n";
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  int done = 0;
  while (!g_stop && (max_rounds <= 0 || done < max_rounds)) {
    auto t0 = std::chrono::steady_clock::now();
    auto st = svc.run_round();
    ++done;
    std::cout << round_json(st).dump() << std::endl;
    auto next = t0 + std::chrono::seconds(cfg.round_interval_s);
    while (!g_stop && (max_rounds <= 0 || done < max_rounds) && std::chrono::steady_clock::now() < next)
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  gw.stop();
  return 0;
}

int cmd_round(const Globals& g) {
  curby::Service svc(g.load());
  auto st = svc.run_round();
  return emit(round_json(st), g.json, st.phase == curby::Phase::Published);
}

int cmd_verify_pulse(const Globals& g, const std::string& cid_text) {
  store::BeaconStore st(g.load().store_dir / "store");
  Cid cid = Cid::parse(cid_text);
  auto p = load_pulse(st, cid);
  auto meta = twine::ChainMetadata::parse(st.get_chain(p.chain));
  auto rep = twine::verify_pulse(p, cid, meta, st);
  json j{{"cid", cid_text},   {"ok", rep.ok()},          {"cid_ok", rep.cid_ok}, {"signature_ok", rep.signature_ok},
         {"link_ok", rep.link_ok}, {"index_ok", rep.index_ok}, {"details", rep.details}, {"pulse", pulse_json(p)}};
  return emit(j, g.json, rep.ok());
}

int cmd_audit_order(const Globals& g, const std::string& a, const std::string& b) {
  store::BeaconStore st(g.load().store_dir / "store");
  auto proof = twine::prove_order(Cid::parse(a), Cid::parse(b), st);
  json j{{"a", a}, {"b", b}};
  bool ok = proof && twine::verify_order_proof(*proof, st);
  if (proof) {
    json path = json::array();
    for (const auto& c : proof->path) path.push_back(c.to_string());
    j["earlier"] = proof->earlier.to_string();
    j["later"] = proof->later.to_string();
    j["path"] = path;
  }
  j["ok"] = ok;
  if (!proof) j["detail"] = "no hash-link path in either direction";
  return emit(j, g.json, ok);
}

int cmd_audit_round(const Globals& g, const std::string& z, const std::string& trials_file) {
  store::BeaconStore st(g.load().store_dir / "store");
  std::optional<pef::TrialBlock> trials;
  if (!trials_file.empty()) trials = pef::TrialBlock::load(trials_file);
  auto a = curby::audit_round(st, Cid::parse(z), trials ? &*trials : nullptr);
  json j{{"z", z}, {"round", a.round}, {"ok", a.ok()}, {"problems", a.problems}, {"with_trials", trials.has_value()}};
  if (a.recertified) j["recertified"] = cert_json(*a.recertified);
  return emit(j, g.json, a.ok());
}

curby::RequestPayload request_of(const store::BeaconStore& st, const Cid& x) {
  auto p = load_pulse(st, x);
  require(p.payload.at("kind").as_text("kind") == curby::kind::X, Errc::InvalidArgument, "not a request pulse");
  return curby::RequestPayload::from_value(p.payload.at("request"));
}

int cmd_certify(const Globals& g, const std::string& trials_file, const std::string& request) {
  store::BeaconStore st(g.load().store_dir / "store");
  auto req = request_of(st, Cid::parse(request));
  auto trials = pef::TrialBlock::load(trials_file);
  auto c = curby::Certificate::from(pef::certify(trials, req.pef, req.eps_h, req.threshold));
  json j = cert_json(c);
  j["request"] = request;
  j["n"] = trials.size();
  j["file_hash"] = to_hex(curby::file_hash(trials));
  return emit(j, g.json, c.passed);
}

int cmd_extract(const Globals& g, const std::string& trials_file, const std::string& seed_hex, const std::string& params) {
  store::BeaconStore st(g.load().store_dir / "store");
  auto p = load_pulse(st, Cid::parse(params));
  auto trials = pef::TrialBlock::load(trials_file);
  std::string k = p.payload.at("kind").as_text("kind");
  curby::RequestPayload req;
  curby::Certificate cert;
  if (k == curby::kind::Y) {
    req = request_of(st, p.payload.at("request").as<Cid>("request"));
    cert = curby::Certificate::from_value(p.payload.at("certificate"));
  } else {
    require(k == curby::kind::X, Errc::InvalidArgument, "params must be a request or precommit pulse");
    req = curby::RequestPayload::from_value(p.payload.at("request"));
    cert = curby::Certificate::from(pef::certify(trials, req.pef, req.eps_h, req.threshold));
  }
  require(cert.passed, Errc::EntropyTooLow, "trials do not certify enough entropy");
  Bytes seed = from_hex(seed_hex);
  require(seed.size() == 64, Errc::InvalidArgument, "seed must be 64 bytes of hex");
  auto out = curby::Service::output_bits(trials, req, cert, seed);
  json j{{"output", to_hex(out.bytes())}, {"bits", out.size()}, {"certified_bits", cert.certified_bits}};
  return emit(j, g.json, true);
}

int cmd_simulate(const Globals& g, const std::string& params, std::uint64_t n, const std::string& out,
                 std::uint64_t seed, double eps_b) {
  boost::property_tree::ptree t;
  boost::property_tree::read_ini(params, t);
  auto sp = curby::Config::source_from_tree(t);
  sp.validate();
  if (t.get_optional<std::uint64_t>("source.seed") && seed == 0) seed = t.get<std::uint64_t>("source.seed");
  auto trials = bell::sample_trials(sp, n, eps_b, seed, 0);
  trials.save(out);
  json counts = json::array();
  for (auto c : trials.counts()) counts.push_back(c);
  json j{{"out", out}, {"n", trials.size()}, {"file_hash", to_hex(curby::file_hash(trials))}, {"counts", counts}};
  return emit(j, g.json, true);
}

int cmd_chain_new(const Globals& g, const std::string& source) {
  auto cfg = g.load();
  store::BeaconStore st(cfg.store_dir / "store");
  curby::KeyRing keys(cfg.store_dir / "keys", cfg.passphrase);
  std::string key_name = "chain-" + to_hex(crypto::sha3_512_bytes(to_bytes(source))).substr(0, 16);
  require(!std::filesystem::exists(cfg.store_dir / "keys" / (key_name + ".key")), Errc::InvalidArgument,
          "a chain for source '" + source + "' already exists here");
  curby::ChainWriter w(st, keys.get(key_name), source);
  json j{{"chain", w.cid().to_string()}, {"source", source}, {"key", key_name}};
  return emit(j, g.json, true);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Certified randomness beacon: service, simulator and auditor tools"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "INI configuration file")->capture_default_str();
  app.add_option("--store", g.store_dir, "data directory (overrides the config)");
  app.add_flag("--json", g.json, "machine-readable report");

  int max_rounds = 0;
  auto* run = app.add_subcommand("run", "run the service and gateway, one round per interval");
  run->add_option("--rounds", max_rounds, "stop after this many rounds (0: until interrupted)");

  auto* round = app.add_subcommand("round", "run a single round");
  bool once = true;
  round->add_flag("--once", once, "single round (the default)");

  std::string cid_a, cid_b, trials_file, seed_hex, params, out, source;
  auto* verify = app.add_subcommand("verify", "verify records");
  verify->require_subcommand(1);
  auto* vpulse = verify->add_subcommand("pulse", "verify one pulse");
  vpulse->add_option("cid", cid_a)->required();

  auto* audit = app.add_subcommand("audit", "audit ordering and rounds");
  audit->require_subcommand(1);
  auto* aorder = audit->add_subcommand("order", "prove which of two pulses came first");
  aorder->add_option("a", cid_a)->required();
  aorder->add_option("b", cid_b)->required();
  auto* around = audit->add_subcommand("round", "audit a published round");
  around->add_option("z", cid_a)->required();
  around->add_option("--trials", trials_file, "disclosed trial file for full recomputation");

  auto* certify = app.add_subcommand("certify", "certify a trial file against a request");
  certify->add_option("--trials", trials_file)->required();
  certify->add_option("--request", cid_b)->required();

  auto* extract = app.add_subcommand("extract", "recompute output bits");
  extract->add_option("--trials", trials_file)->required();
  extract->add_option("--seed", seed_hex, "512-bit seed as hex")->required();
  extract->add_option("--params", params, "request or precommit pulse CID")->required();

  std::uint64_t n = 0, sim_seed = 0;
  double eps_b = 1e-3;
  auto* simulate = app.add_subcommand("simulate", "generate simulated Bell trials");
  simulate->add_option("--params", params, "INI file with a [source] section")->required();
  simulate->add_option("--n", n, "number of trials")->required();
  simulate->add_option("--out", out, "trial file to write")->required();
  simulate->add_option("--seed", sim_seed, "RNG seed (default: source.seed or 0)");
  simulate->add_option("--eps-b", eps_b, "setting bias")->capture_default_str();

  auto* chain = app.add_subcommand("chain", "manage chains");
  chain->require_subcommand(1);
  auto* cnew = chain->add_subcommand("new", "create a chain with a fresh key");
  cnew->add_option("--source", source)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(g, max_rounds);
    if (*round) return cmd_round(g);
    if (*vpulse) return cmd_verify_pulse(g, cid_a);
    if (*aorder) return cmd_audit_order(g, cid_a, cid_b);
    if (*around) return cmd_audit_round(g, cid_a, trials_file);
    if (*certify) return cmd_certify(g, trials_file, cid_b);
    if (*extract) return cmd_extract(g, trials_file, seed_hex, params);
    if (*simulate) return cmd_simulate(g, params, n, out, sim_seed, eps_b);
    if (*cnew) return cmd_chain_new(g, source);
  } catch (const Error& e) {
    return emit(json{{"ok", false}, {"error", std::string(errc_name(e.code()))}, {"message", e.what()}}, g.json, false);
  } catch (const std::exception& e) {
    return emit(json{{"ok", false}, {"error", "Internal"}, {"message", e.what()}}, g.json, false);
  }
  return 1;
}
