#pragma once

#include <atomic>
#include <thread>

#include "beacon/store.hpp"
#include "httplib.h"
#include "json.hpp"

namespace beacon::store {

inline int http_status(Errc c) {
  switch (c) {
    case Errc::NotFound:
    case Errc::UnknownChain: return 404;
    case Errc::HeadConflict: return 409;
    case Errc::VerificationFailed: return 422;
    case Errc::Unauthorized: return 401;
    case Errc::MalformedEncoding:
    case Errc::InvalidArgument: return 400;
    default: return 500;
  }
}

// Public read API plus token-guarded appends. `tokens` maps chain CID text
// to the bearer token of its owner; the "*" entry may register new chains
// and append to any chain.
class Gateway {
 public:
  Gateway(BeaconStore& store, std::map<std::string, std::string> tokens)
      : store_(store), tokens_(std::move(tokens)) {
    routes();
  }
  ~Gateway() { stop(); }

  // Binds and serves on a background thread. Port 0 picks a free port.
  int start(const std::string& host, int port) {
    port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    require(port_ > 0, Errc::Io, "cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  // Serves on the calling thread until stop().
  void run(const std::string& host, int port) {
    require(server_.listen(host, port), Errc::Io, "cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }

 private:
  static void send_error(httplib::Response& res, Errc code, const std::string& msg) {
    res.status = http_status(code);
    res.set_content(nlohmann::json{{"code", std::string(errc_name(code))}, {"message", msg}}.dump(),
                    "application/json");
  }

  template <typename F>
  static auto guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const Error& e) {
        send_error(res, e.code(), e.what());
      } catch (const std::exception& e) {
        send_error(res, Errc::InvalidState, e.what());
      }
    };
  }

  static Cid cid_param(const httplib::Request& req, int i) {
    try {
      return Cid::parse(req.matches[i].str());
    } catch (const Error& e) {
      fail(Errc::InvalidArgument, e.what());
    }
  }

  static void send_bytes(httplib::Response& res, const Bytes& b) {
    res.set_content(std::string(b.begin(), b.end()), "application/octet-stream");
  }

  bool authorized(const httplib::Request& req, const std::string& chain) const {
    std::string auth = req.get_header_value("Authorization");
    const std::string prefix = "Bearer ";
    if (auth.rfind(prefix, 0) != 0) return false;
    std::string token = auth.substr(prefix.size());
    if (token.empty()) return false;
    for (const auto& key : {chain, std::string("*")}) {
      auto it = tokens_.find(key);
      if (it != tokens_.end() && it->second == token) return true;
    }
    return false;
  }

  void routes() {
    server_.Get("/chains", guarded([this](const httplib::Request&, httplib::Response& res) {
      auto arr = nlohmann::json::array();
      for (const auto& [cid, source] : store_.list_chains())
        arr.push_back({{"cid", cid.to_string()}, {"source", source}});
      res.set_content(arr.dump(), "application/json");
    }));
    server_.Get(R"(/chains/([a-z2-7]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_bytes(res, store_.get_chain(cid_param(req, 1)));
    }));
    server_.Get(R"(/chains/([a-z2-7]+)/pulses/latest)",
                guarded([this](const httplib::Request& req, httplib::Response& res) {
                  send_bytes(res, store_.latest_pulse(cid_param(req, 1)));
                }));
    server_.Get(R"(/chains/([a-z2-7]+)/pulses/(\d+))",
                guarded([this](const httplib::Request& req, httplib::Response& res) {
                  send_bytes(res, store_.get_pulse(cid_param(req, 1), std::stoll(req.matches[2].str())));
                }));
    server_.Get(R"(/pulses/([a-z2-7]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_bytes(res, store_.get_pulse(cid_param(req, 1)));
    }));
    server_.Post(R"(/chains/([a-z2-7]+)/pulses)",
                 guarded([this](const httplib::Request& req, httplib::Response& res) {
                   Cid chain = cid_param(req, 1);
                   require(authorized(req, chain.to_string()), Errc::Unauthorized, "missing or wrong bearer token");
                   Bytes body(req.body.begin(), req.body.end());
                   twine::Pulse p = twine::Pulse::parse(body);
                   require(p.chain == chain, Errc::InvalidArgument, "pulse belongs to another chain");
                   Cid cid = store_.put_pulse(body);
                   res.status = 201;
                   res.set_content(nlohmann::json{{"cid", cid.to_string()}}.dump(), "application/json");
                 }));
    server_.Post("/chains", guarded([this](const httplib::Request& req, httplib::Response& res) {
      require(authorized(req, "*"), Errc::Unauthorized, "registering chains needs the admin token");
      Cid cid = store_.put_chain(Bytes(req.body.begin(), req.body.end()));
      res.status = 201;
      res.set_content(nlohmann::json{{"cid", cid.to_string()}}.dump(), "application/json");
    }));
  }

  BeaconStore& store_;
  std::map<std::string, std::string> tokens_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

// Client side of the gateway; also usable as a resolver for verification.
class HttpStoreClient : public twine::Resolver {
 public:
  HttpStoreClient(const std::string& host, int port, std::string token = {})
      : host_(host), port_(port), token_(std::move(token)) {}

  std::optional<Bytes> fetch(const Cid& cid) const override {
    if (auto b = get_optional("/pulses/" + cid.to_string())) return b;
    return get_optional("/chains/" + cid.to_string());
  }

  Bytes get_chain(const Cid& chain) const { return get("/chains/" + chain.to_string()); }
  Bytes latest_pulse(const Cid& chain) const { return get("/chains/" + chain.to_string() + "/pulses/latest"); }
  Bytes get_pulse(const Cid& chain, std::int64_t index) const {
    return get("/chains/" + chain.to_string() + "/pulses/" + std::to_string(index));
  }

  std::vector<std::pair<Cid, std::string>> list_chains() const {
    Bytes b = get("/chains");
    auto j = nlohmann::json::parse(std::string(b.begin(), b.end()));
    std::vector<std::pair<Cid, std::string>> out;
    for (const auto& row : j) out.push_back({Cid::parse(row.at("cid").get<std::string>()), row.at("source")});
    return out;
  }

  Cid put_pulse(const Cid& chain, ByteView bytes) const { return post("/chains/" + chain.to_string() + "/pulses", bytes); }
  Cid put_chain(ByteView bytes) const { return post("/chains", bytes); }

 private:
  httplib::Client client() const {
    httplib::Client c(host_, port_);
    c.set_connection_timeout(5);
    c.set_read_timeout(30);
    if (!token_.empty()) c.set_bearer_token_auth(token_);
    return c;
  }

  [[noreturn]] static void raise(const httplib::Response& r) {
    Errc code = Errc::ResolverUnavailable;
    std::string msg = r.body;
    try {
      auto j = nlohmann::json::parse(r.body);
      if (auto c = errc_from_name(j.at("code").get<std::string>())) code = *c;
      msg = j.at("message").get<std::string>();
    } catch (const std::exception&) {
    }
    throw Error(code, msg);
  }

  std::optional<Bytes> get_optional(const std::string& path) const {
    auto r = client().Get(path);
    require(static_cast<bool>(r), Errc::ResolverUnavailable, "store unreachable at " + host_);
    if (r->status == 404) return std::nullopt;
    if (r->status != 200) raise(*r);
    return Bytes(r->body.begin(), r->body.end());
  }

  Bytes get(const std::string& path) const {
    auto r = client().Get(path);
    require(static_cast<bool>(r), Errc::ResolverUnavailable, "store unreachable at " + host_);
    if (r->status != 200) raise(*r);
    return Bytes(r->body.begin(), r->body.end());
  }

  Cid post(const std::string& path, ByteView bytes) const {
    auto r = client().Post(path, reinterpret_cast<const char*>(bytes.data()), bytes.size(), "application/octet-stream");
    require(static_cast<bool>(r), Errc::ResolverUnavailable, "store unreachable at " + host_);
    if (r->status != 201) raise(*r);
    return Cid::parse(nlohmann::json::parse(r->body).at("cid").get<std::string>());
  }

  std::string host_;
  int port_;
  std::string token_;
};

}  // namespace beacon::store
