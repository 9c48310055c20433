#pragma once

// Twine hash-graph records: chain metadata and pulses, their signing and
// content addressing, structural verification and hash-link order proofs.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "beacon/cbor.hpp"
#include "beacon/cid.hpp"
#include "beacon/crypto.hpp"

namespace beacon::twine {

inline constexpr const char* kTwineSpec = "twine/1.0";

// Read access to content-addressed records. Returns nullopt for unknown
// content; throws Error(ResolverUnavailable) for infrastructure failures.
class Resolver {
 public:
  virtual ~Resolver() = default;
  virtual std::optional<Bytes> fetch(const Cid& cid) const = 0;
};

// In-memory resolver; handy for building tapestries before they are stored.
class MemoryResolver : public Resolver {
 public:
  std::optional<Bytes> fetch(const Cid& cid) const override {
    auto it = records_.find(cid);
    if (it == records_.end()) return std::nullopt;
    return it->second;
  }
  void put(const Cid& cid, Bytes bytes) { records_[cid] = std::move(bytes); }
  void erase(const Cid& cid) { records_.erase(cid); }
  std::size_t size() const { return records_.size(); }

 private:
  std::unordered_map<Cid, Bytes> records_;
};

struct ChainMetadata {
  crypto::Jwk key;
  std::int64_t links_radix = 10;
  cbor::Value meta = cbor::Map{};
  std::string source;
  std::string specification = kTwineSpec;
  std::string signature;

  cbor::Value to_value(bool with_signature = true) const {
    cbor::Map k;
    for (const auto& [name, val] : key) k[name] = val;
    cbor::Map m{{"key", std::move(k)},
                {"links_radix", links_radix},
                {"meta", meta},
                {"source", source},
                {"specification", specification}};
    if (with_signature) m["signature"] = signature;
    return m;
  }

  static ChainMetadata from_value(const cbor::Value& v) {
    ChainMetadata c;
    for (const auto& [name, val] : v.at("key").as<cbor::Map>("key")) c.key[name] = val.as_text("key member");
    c.links_radix = v.at("links_radix").as_int("links_radix");
    c.meta = v.at("meta");
    c.source = v.at("source").as_text("source");
    c.specification = v.at("specification").as_text("specification");
    c.signature = v.at("signature").as_text("signature");
    require(v.as<cbor::Map>().size() == 6, Errc::MalformedEncoding, "unexpected chain metadata fields");
    return c;
  }

  Bytes bytes() const { return cbor::serialize(to_value(true)); }
  Cid cid() const { return compute_cid(bytes()); }
  static ChainMetadata parse(ByteView b) { return from_value(cbor::parse(b)); }
};

struct Mixin {
  Cid chain;
  Cid pulse;
  friend bool operator==(const Mixin&, const Mixin&) = default;
};

struct Pulse {
  Cid chain;
  std::int64_t index = 0;
  std::vector<Cid> links;
  std::vector<Mixin> mixins;
  cbor::Value payload = cbor::Map{};
  std::string specification = kTwineSpec;
  std::string signature;

  cbor::Value to_value(bool with_signature = true) const {
    cbor::Array l(links.begin(), links.end());
    cbor::Array mx;
    for (const auto& m : mixins) mx.push_back(cbor::Array{m.chain, m.pulse});
    cbor::Map m{{"chain", chain},
                {"index", index},
                {"links", std::move(l)},
                {"mixins", std::move(mx)},
                {"payload", payload},
                {"specification", specification}};
    if (with_signature) m["signature"] = signature;
    return m;
  }

  static Pulse from_value(const cbor::Value& v) {
    Pulse p;
    p.chain = v.at("chain").as<Cid>("chain");
    p.index = v.at("index").as_int("index");
    for (const auto& l : v.at("links").as<cbor::Array>("links")) p.links.push_back(l.as<Cid>("link"));
    for (const auto& m : v.at("mixins").as<cbor::Array>("mixins")) {
      const auto& pair = m.as<cbor::Array>("mixin");
      require(pair.size() == 2, Errc::MalformedEncoding, "mixin must be a (chain, pulse) pair");
      p.mixins.push_back({pair[0].as<Cid>("mixin chain"), pair[1].as<Cid>("mixin pulse")});
    }
    p.payload = v.at("payload");
    p.specification = v.at("specification").as_text("specification");
    p.signature = v.at("signature").as_text("signature");
    require(v.as<cbor::Map>().size() == 7, Errc::MalformedEncoding, "unexpected pulse fields");
    return p;
  }

  Bytes bytes() const { return cbor::serialize(to_value(true)); }
  Cid cid() const { return compute_cid(bytes()); }
  static Pulse parse(ByteView b) { return from_value(cbor::parse(b)); }
};

struct VerificationReport {
  bool cid_ok = false;
  bool signature_ok = false;
  bool link_ok = false;
  bool index_ok = false;
  std::vector<std::string> details;

  bool ok() const noexcept { return cid_ok && signature_ok && link_ok && index_ok; }
};

struct OrderProof {
  Cid earlier;
  Cid later;
  // path.front() == earlier, path.back() == later; path[k+1] hash-links path[k].
  std::vector<Cid> path;
};

// Indices that pulse `index` must link to, in link order: index-1 first,
// then index - q^j for every j >= 1 with q^j <= index and q^j | index.
inline std::vector<std::int64_t> link_indices(std::int64_t index, std::int64_t radix) {
  std::vector<std::int64_t> out;
  if (index <= 0) return out;
  out.push_back(index - 1);
  for (std::int64_t step = radix; step <= index; step *= radix) {
    if (index % step == 0) out.push_back(index - step);
    if (step > INT64_MAX / radix) break;
  }
  return out;
}

namespace detail {

inline Digest512 signing_hash(const cbor::Value& unsigned_value) {
  return crypto::sha3_512(cbor::serialize(unsigned_value));
}

inline std::optional<Pulse> fetch_pulse(const Resolver& r, const Cid& cid, std::string* why = nullptr) {
  auto bytes = r.fetch(cid);
  if (!bytes) {
    if (why) *why = "unresolvable " + cid.to_string();
    return std::nullopt;
  }
  if (compute_cid(*bytes, cid.hash_alg, cid.codec) != cid) {
    if (why) *why = "content of " + cid.to_string() + " does not hash to its CID";
    return std::nullopt;
  }
  try {
    return Pulse::parse(*bytes);
  } catch (const Error& e) {
    if (why) *why = std::string("undecodable pulse: ") + e.what();
    return std::nullopt;
  }
}

}  // namespace detail

inline bool verify_chain(const ChainMetadata& meta) {
  if (meta.links_radix < 2) return false;
  try {
    auto key = crypto::PublicKey::from_jwk(meta.key);
    return crypto::jws_verify_detached(key, meta.signature, detail::signing_hash(meta.to_value(false)));
  } catch (const Error&) {
    return false;
  }
}

inline std::pair<ChainMetadata, Cid> build_chain(const crypto::SigningKey& key, std::string source,
                                                  cbor::Value meta, std::int64_t links_radix) {
  require(links_radix >= 2, Errc::InvalidRadix, "links_radix must be at least 2");
  if (key.alg() == crypto::SigAlg::RS256)
    require(key.modulus_bits() == 4096, Errc::SigningFailure, "RS256 chains require a 4096-bit modulus");
  ChainMetadata c;
  c.key = key.public_jwk();
  c.links_radix = links_radix;
  c.meta = std::move(meta);
  c.source = std::move(source);
  c.signature = crypto::jws_sign_detached(key, detail::signing_hash(c.to_value(false)));
  Cid cid = c.cid();
  return {std::move(c), std::move(cid)};
}

// Walks back along same-chain links from `from` to the pulse at `target`.
inline Cid find_ancestor(const Resolver& r, const Pulse& from, const Cid& from_cid, std::int64_t target,
                         std::int64_t radix) {
  require(target >= 0 && target <= from.index, Errc::InvalidArgument, "ancestor index out of range");
  Pulse cur = from;
  Cid cur_cid = from_cid;
  while (cur.index > target) {
    auto idx = link_indices(cur.index, radix);
    require(idx.size() == cur.links.size(), Errc::ResolverMiss, "pulse links do not follow the radix rule");
    std::size_t best = 0;
    for (std::size_t k = 1; k < idx.size(); ++k)
      if (idx[k] >= target && idx[k] < idx[best]) best = k;
    std::string why;
    auto next = detail::fetch_pulse(r, cur.links[best], &why);
    require(next.has_value(), Errc::ResolverMiss, why);
    cur_cid = cur.links[best];
    cur = std::move(*next);
  }
  return cur_cid;
}

inline std::pair<Pulse, Cid> build_pulse(const ChainMetadata& chain_meta, const std::optional<Pulse>& prev,
                                          const Resolver& resolver, std::vector<Mixin> mixins,
                                          cbor::Value payload, std::string specification,
                                          const crypto::SigningKey& key) {
  require(key.public_jwk() == chain_meta.key, Errc::SigningFailure, "signing key does not match chain key");
  Pulse p;
  p.chain = chain_meta.cid();
  if (prev) {
    require(prev->chain == p.chain, Errc::HeadMismatch, "previous pulse belongs to another chain");
    p.index = prev->index + 1;
    Cid prev_cid = prev->cid();
    auto idx = link_indices(p.index, chain_meta.links_radix);
    p.links.push_back(prev_cid);
    for (std::size_t k = 1; k < idx.size(); ++k)
      p.links.push_back(find_ancestor(resolver, *prev, prev_cid, idx[k], chain_meta.links_radix));
  }
  p.mixins = std::move(mixins);
  p.payload = std::move(payload);
  p.specification = std::move(specification);
  p.signature = crypto::jws_sign_detached(key, detail::signing_hash(p.to_value(false)));
  Cid cid = p.cid();
  return {std::move(p), std::move(cid)};
}

// Reports content failures through flags; only resolver infrastructure
// errors escape as exceptions.
inline VerificationReport verify_pulse(const Pulse& pulse, const Cid& claimed, const ChainMetadata& chain_meta,
                                       const Resolver& resolver) {
  VerificationReport rep;
  Bytes bytes = pulse.bytes();
  rep.cid_ok = compute_cid(bytes, claimed.hash_alg, claimed.codec) == claimed;
  if (!rep.cid_ok) rep.details.push_back("recomputed CID differs from " + claimed.to_string());

  Cid chain_cid = chain_meta.cid();
  if (pulse.chain != chain_cid) {
    rep.details.push_back("pulse references a different chain");
  } else if (!verify_chain(chain_meta)) {
    rep.details.push_back("chain metadata signature invalid");
  } else {
    try {
      auto key = crypto::PublicKey::from_jwk(chain_meta.key);
      rep.signature_ok =
          crypto::jws_verify_detached(key, pulse.signature, detail::signing_hash(pulse.to_value(false)));
    } catch (const Error& e) {
      rep.details.push_back(e.what());
    }
    if (!rep.signature_ok) rep.details.push_back("signature does not verify under chain key");
  }

  auto expected = link_indices(pulse.index, chain_meta.links_radix);
  rep.index_ok = pulse.index >= 0;
  rep.link_ok = pulse.links.size() == expected.size();
  if (!rep.link_ok) rep.details.push_back("link count does not follow the radix rule");
  if (pulse.index == 0 && !pulse.links.empty()) rep.index_ok = false;
  if (pulse.index > 0 && pulse.links.empty()) rep.index_ok = false;

  for (std::size_t k = 0; k < pulse.links.size() && k < expected.size(); ++k) {
    std::string why;
    auto target = detail::fetch_pulse(resolver, pulse.links[k], &why);
    if (!target) {
      rep.link_ok = false;
      rep.details.push_back("link " + std::to_string(k) + ": " + why);
      continue;
    }
    if (target->chain != pulse.chain) {
      rep.link_ok = false;
      rep.details.push_back("link " + std::to_string(k) + " leaves the chain");
    }
    if (target->index != expected[k]) {
      rep.link_ok = false;
      if (k == 0) rep.index_ok = false;
      rep.details.push_back("link " + std::to_string(k) + " points at index " + std::to_string(target->index) +
                            ", expected " + std::to_string(expected[k]));
    }
  }
  for (std::size_t k = 0; k < pulse.mixins.size(); ++k) {
    std::string why;
    auto target = detail::fetch_pulse(resolver, pulse.mixins[k].pulse, &why);
    if (!target) {
      rep.link_ok = false;
      rep.details.push_back("mixin " + std::to_string(k) + ": " + why);
    } else if (target->chain != pulse.mixins[k].chain) {
      rep.link_ok = false;
      rep.details.push_back("mixin " + std::to_string(k) + " chain mismatch");
    }
  }
  return rep;
}

namespace detail {

inline std::vector<Cid> predecessors(const Pulse& p) {
  std::vector<Cid> out = p.links;
  for (const auto& m : p.mixins) out.push_back(m.pulse);
  return out;
}

// Breadth-first search backwards in time from `later` to `earlier`.
inline std::optional<std::vector<Cid>> search_back(const Resolver& r, const Cid& later, const Cid& earlier) {
  if (later == earlier) return std::nullopt;
  std::unordered_map<Cid, Cid> parent;
  std::deque<Cid> queue{later};
  parent.emplace(later, later);
  while (!queue.empty()) {
    Cid cur = queue.front();
    queue.pop_front();
    auto p = fetch_pulse(r, cur);
    if (!p) continue;
    for (const auto& next : predecessors(*p)) {
      if (parent.count(next)) continue;
      parent.emplace(next, cur);
      if (next == earlier) {
        std::vector<Cid> path{earlier};
        Cid step = earlier;
        while (!(step == later)) {
          step = parent.at(step);
          path.push_back(step);
        }
        return path;
      }
      queue.push_back(next);
    }
  }
  return std::nullopt;
}

}  // namespace detail

// Minimal-length hash-link path between two pulses, or nullopt when the
// pulses are unordered (no path in either direction).
inline std::optional<OrderProof> prove_order(const Cid& a, const Cid& b, const Resolver& resolver) {
  require(detail::fetch_pulse(resolver, a).has_value(), Errc::ResolverMiss, "cannot fetch " + a.to_string());
  require(detail::fetch_pulse(resolver, b).has_value(), Errc::ResolverMiss, "cannot fetch " + b.to_string());
  if (auto path = detail::search_back(resolver, b, a)) return OrderProof{a, b, std::move(*path)};
  if (auto path = detail::search_back(resolver, a, b)) return OrderProof{b, a, std::move(*path)};
  return std::nullopt;
}

// Independently re-checks every hop of a proof from raw stored bytes.
inline bool verify_order_proof(const OrderProof& proof, const Resolver& resolver) {
  if (proof.path.size() < 2 || !(proof.path.front() == proof.earlier) || !(proof.path.back() == proof.later))
    return false;
  if (!detail::fetch_pulse(resolver, proof.path.front())) return false;
  for (std::size_t k = 1; k < proof.path.size(); ++k) {
    auto p = detail::fetch_pulse(resolver, proof.path[k]);
    if (!p) return false;
    auto preds = detail::predecessors(*p);
    if (std::find(preds.begin(), preds.end(), proof.path[k - 1]) == preds.end()) return false;
  }
  return true;
}

}  // namespace beacon::twine
