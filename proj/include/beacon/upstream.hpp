#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>

#include "beacon/bytes.hpp"
#include "beacon/crypto.hpp"
#include "beacon/error.hpp"
#include "httplib.h"
#include "json.hpp"

// External seed beacon: numbered rounds of 512-bit values, read through
// GET /public/latest and GET /public/{round}.
namespace beacon::upstream {

struct Round {
  std::uint64_t round = 0;
  Bytes randomness;  // 64 bytes
};

class Upstream {
 public:
  virtual ~Upstream() = default;
  // Throw Error(UpstreamUnavailable) when the upstream cannot be reached.
  virtual Round latest() = 0;
  // nullopt when the round has not been published yet.
  virtual std::optional<Round> round(std::uint64_t r) = 0;
  virtual std::string name() const = 0;
};

inline Bytes mock_value(std::uint64_t round) {
  Bytes be;
  append_be64(be, round);
  return crypto::sha3_512_bytes(be);
}

// Deterministic upstream: round r carries SHA3-512(r as 8-byte big-endian).
// Rounds advance with wall time at `period`, or only through advance() when
// the period is zero.
class MockUpstream : public Upstream {
 public:
  explicit MockUpstream(std::uint64_t first_round = 1, std::chrono::milliseconds period = std::chrono::milliseconds(0))
      : base_(first_round), period_(period), start_(std::chrono::steady_clock::now()) {}

  Round latest() override {
    check_reachable();
    std::uint64_t r = current();
    return {r, mock_value(r)};
  }

  std::optional<Round> round(std::uint64_t r) override {
    check_reachable();
    if (r > current() || r < 1) return std::nullopt;
    return Round{r, mock_value(r)};
  }

  std::string name() const override { return "mock"; }

  void advance(std::uint64_t k = 1) { manual_ += k; }
  // The next `k` calls fail with UpstreamUnavailable.
  void fail_next(int k) { failures_ = k; }
  std::uint64_t current() const {
    std::uint64_t r = base_ + manual_;
    if (period_.count() > 0)
      r += static_cast<std::uint64_t>((std::chrono::steady_clock::now() - start_) / period_);
    return r;
  }

 private:
  void check_reachable() {
    if (failures_ > 0) {
      --failures_;
      fail(Errc::UpstreamUnavailable, "mock upstream configured to fail");
    }
  }

  std::uint64_t base_;
  std::atomic<std::uint64_t> manual_{0};
  std::chrono::milliseconds period_;
  std::chrono::steady_clock::time_point start_;
  std::atomic<int> failures_{0};
};

inline Round parse_round_json(const std::string& body) {
  try {
    auto j = nlohmann::json::parse(body);
    Round r;
    r.round = j.at("round").get<std::uint64_t>();
    r.randomness = from_hex(j.at("randomness").get<std::string>());
    require(r.randomness.size() == 64, Errc::MalformedEncoding, "upstream randomness must be 64 bytes");
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::MalformedEncoding, std::string("bad upstream response: ") + e.what());
  }
}

class HttpUpstream : public Upstream {
 public:
  explicit HttpUpstream(std::string base_url) : base_(std::move(base_url)), client_(base_) {
    client_.set_connection_timeout(5);
    client_.set_read_timeout(10);
  }

  Round latest() override {
    auto res = client_.Get("/public/latest");
    require(res && res->status == 200, Errc::UpstreamUnavailable, "GET /public/latest failed at " + base_);
    return parse_round_json(res->body);
  }

  std::optional<Round> round(std::uint64_t r) override {
    auto res = client_.Get("/public/" + std::to_string(r));
    require(static_cast<bool>(res), Errc::UpstreamUnavailable, "cannot reach " + base_);
    if (res->status == 404) return std::nullopt;
    require(res->status == 200, Errc::UpstreamUnavailable, "upstream answered " + std::to_string(res->status));
    Round out = parse_round_json(res->body);
    require(out.round == r, Errc::MalformedEncoding, "upstream returned a different round");
    return out;
  }

  std::string name() const override { return base_; }

 private:
  std::string base_;
  httplib::Client client_;
};

// Serves any Upstream over the two HTTP endpoints.
class UpstreamServer {
 public:
  explicit UpstreamServer(Upstream& up) : up_(up) {
    auto send = [](httplib::Response& res, const Round& r) {
      res.set_content(nlohmann::json{{"round", r.round}, {"randomness", to_hex(r.randomness)}}.dump(),
                      "application/json");
    };
    server_.Get("/public/latest", [this, send](const httplib::Request&, httplib::Response& res) {
      std::lock_guard lock(mu_);
      try {
        send(res, up_.latest());
      } catch (const Error&) {
        res.status = 503;
      }
    });
    server_.Get(R"(/public/(\d+))", [this, send](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mu_);
      try {
        auto r = up_.round(std::stoull(req.matches[1].str()));
        if (r) send(res, *r);
        else res.status = 404;
      } catch (const Error&) {
        res.status = 503;
      }
    });
  }
  ~UpstreamServer() { stop(); }

  int start(const std::string& host, int port) {
    port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    require(port_ > 0, Errc::Io, "cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  Upstream& up_;
  std::mutex mu_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

struct RetryPolicy {
  int attempts = 5;
  std::chrono::milliseconds initial_backoff{1000};
  double factor = 2;
};

// Runs `f`, retrying UpstreamUnavailable with exponential backoff.
template <class F>
auto with_retry(const RetryPolicy& policy, F f, const std::function<void(std::chrono::milliseconds)>& sleep = {})
    -> decltype(f()) {
  auto wait = policy.initial_backoff;
  for (int attempt = 1;; ++attempt) {
    try {
      return f();
    } catch (const Error& e) {
      if (e.code() != Errc::UpstreamUnavailable || attempt >= policy.attempts) throw;
    }
    if (sleep) sleep(wait);
    else std::this_thread::sleep_for(wait);
    wait = std::chrono::milliseconds(static_cast<std::int64_t>(static_cast<double>(wait.count()) * policy.factor));
  }
}

}  // namespace beacon::upstream
