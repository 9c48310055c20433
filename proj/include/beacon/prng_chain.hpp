#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>

#include "beacon/cbor.hpp"
#include "beacon/crypto.hpp"
#include "beacon/random_source.hpp"
#include "beacon/rsaprng.hpp"
#include "beacon/twine.hpp"

// Commit-reveal pulse chain. Each pulse commits to fresh local randomness
// through pre = H(local) and reveals the previous pulse's local randomness
// masked by that pulse's output: salt = local_prev XOR out_prev.
namespace beacon::prng {

inline constexpr std::size_t kRandLen = 64;

namespace status {
inline constexpr const char* ok = "ok";
inline constexpr const char* genesis = "genesis";
inline constexpr const char* commitment_break = "commitment-break";
}  // namespace status

inline Bytes xor_bytes(ByteView a, ByteView b) {
  require(a.size() == b.size(), Errc::InvalidArgument, "xor of unequal lengths");
  Bytes out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] ^ b[i];
  return out;
}

inline Bytes combine_sources(ByteView s1, ByteView s2, ByteView s3) {
  for (ByteView s : {s1, s2, s3})
    require(s.size() == kRandLen, Errc::SourceUnavailable, "source produced the wrong number of bytes");
  Bytes cat(s1.begin(), s1.end());
  cat.insert(cat.end(), s2.begin(), s2.end());
  cat.insert(cat.end(), s3.begin(), s3.end());
  return crypto::sha3_512_bytes(cat);
}

struct PrngPayload {
  Bytes pre;
  Bytes salt;
  cbor::Value sources = cbor::Map{};
  std::string status = status::ok;

  cbor::Value to_value() const {
    return cbor::Map{{"pre", pre}, {"salt", salt}, {"sources", sources}, {"status", status}};
  }
  static PrngPayload from_value(const cbor::Value& v) {
    PrngPayload p;
    p.pre = v.at("pre").as<Bytes>("pre");
    p.salt = v.at("salt").as<Bytes>("salt");
    p.sources = v.at("sources");
    p.status = v.at("status").as_text("status");
    require(p.pre.size() == kRandLen && p.salt.size() == kRandLen, Errc::MalformedEncoding,
            "pre and salt must be 64 bytes");
    return p;
  }
};

// The three local generators. Any failure surfaces as SourceUnavailable.
class LocalSources {
 public:
  LocalSources(std::unique_ptr<RandomSource> system, std::unique_ptr<RandomSource> external,
               std::unique_ptr<RandomSource> rsa)
      : s_{std::move(system), std::move(external), std::move(rsa)} {}

  // Default wiring: system CSPRNG, entropy device (or a second CSPRNG), and
  // the RSA-iteration generator.
  static LocalSources standard(rsa::RsaPrngState state) {
    return LocalSources(std::make_unique<SystemRandom>(), external_source(),
                        std::make_unique<rsa::RsaRandom>(std::move(state)));
  }

  Bytes draw() {
    Bytes parts[3];
    for (int i = 0; i < 3; ++i) {
      try {
        parts[i] = s_[i]->read(kRandLen);
      } catch (const std::exception& e) {
        fail(Errc::SourceUnavailable, s_[i]->name() + ": " + e.what());
      }
    }
    return combine_sources(parts[0], parts[1], parts[2]);
  }

  cbor::Value meta() const {
    return cbor::Map{{"combiner", "sha3-512"},
                     {"external", s_[1]->name()},
                     {"rsa", s_[2]->name()},
                     {"system", s_[0]->name()}};
  }

  RandomSource& source(int i) { return *s_[i]; }

 private:
  std::unique_ptr<RandomSource> s_[3];
};

inline Bytes cid_digest(const twine::Pulse& p) { return p.cid().digest; }

// Builds the next pulse. `prev_local` must be the randomness committed by
// prev.pre; a missing prev starts a chain with an all-zero salt.
inline std::pair<twine::Pulse, Cid> build_prng_pulse(const twine::ChainMetadata& meta,
                                                     const std::optional<twine::Pulse>& prev,
                                                     const std::optional<Bytes>& prev_local,
                                                     const twine::Resolver& resolver,
                                                     std::vector<twine::Mixin> mixins, ByteView fresh_local,
                                                     cbor::Value sources_meta, const crypto::SigningKey& key) {
  require(fresh_local.size() == kRandLen, Errc::InvalidArgument, "local randomness must be 64 bytes");
  PrngPayload pl;
  pl.pre = crypto::sha3_512_bytes(fresh_local);
  pl.sources = std::move(sources_meta);
  if (prev) {
    require(prev_local.has_value(), Errc::CommitmentMismatch, "no retained randomness for the previous pulse");
    auto prev_pl = PrngPayload::from_value(prev->payload);
    require(crypto::sha3_512_bytes(*prev_local) == prev_pl.pre, Errc::CommitmentMismatch,
            "retained randomness does not match the previous commitment");
    pl.salt = xor_bytes(*prev_local, cid_digest(*prev));
  } else {
    pl.salt = Bytes(kRandLen, 0);
    pl.status = status::genesis;
  }
  return twine::build_pulse(meta, prev, resolver, std::move(mixins), pl.to_value(), twine::kTwineSpec, key);
}

// Restarts the commit-reveal sequence after the retained randomness was lost.
// The pulse still links to prev but reveals nothing.
inline std::pair<twine::Pulse, Cid> build_break_pulse(const twine::ChainMetadata& meta, const twine::Pulse& prev,
                                                      const twine::Resolver& resolver,
                                                      std::vector<twine::Mixin> mixins, ByteView fresh_local,
                                                      cbor::Value sources_meta, const crypto::SigningKey& key) {
  require(fresh_local.size() == kRandLen, Errc::InvalidArgument, "local randomness must be 64 bytes");
  PrngPayload pl;
  pl.pre = crypto::sha3_512_bytes(fresh_local);
  pl.salt = Bytes(kRandLen, 0);
  pl.sources = std::move(sources_meta);
  pl.status = status::commitment_break;
  return twine::build_pulse(meta, prev, resolver, std::move(mixins), pl.to_value(), twine::kTwineSpec, key);
}

inline bool verify_prng_pair(const twine::Pulse& a, const twine::Pulse& b) {
  try {
    if (b.index != a.index + 1 || a.chain != b.chain) return false;
    auto pa = PrngPayload::from_value(a.payload);
    auto pb = PrngPayload::from_value(b.payload);
    if (pb.status != status::ok) return false;
    return crypto::sha3_512_bytes(xor_bytes(pb.salt, cid_digest(a))) == pa.pre;
  } catch (const Error&) {
    return false;
  }
}

// Public output: the digest part of the pulse's Cid. Chain starts (genesis
// and commitment breaks) are not for consumption.
inline Bytes output_value(const twine::Pulse& p) {
  require(p.index >= 1, Errc::GenesisInvalid, "the genesis pulse carries no usable output");
  require(PrngPayload::from_value(p.payload).status == status::ok, Errc::GenesisInvalid,
          "pulse restarts the commitment chain");
  return cid_digest(p);
}

// Encrypted journal of not-yet-revealed local randomness, keyed by pulse
// index. The whole file is rewritten atomically on every update; the key is
// derived once per journal and every write uses a fresh IV.
class PrngJournal {
 public:
  PrngJournal(std::filesystem::path path, std::string_view passphrase, std::size_t keep = 4)
      : path_(std::move(path)), keep_(keep) {
    if (std::filesystem::exists(path_)) {
      load(passphrase);
    } else {
      salt_ = crypto::random_bytes(16);
      key_ = crypto::derive_seal_key(passphrase, salt_);
    }
  }

  void put(std::int64_t index, ByteView local) {
    entries_[index] = Bytes(local.begin(), local.end());
    while (entries_.size() > keep_) entries_.erase(entries_.begin());
    save();
  }

  std::optional<Bytes> get(std::int64_t index) const {
    auto it = entries_.find(index);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void clear() {
    entries_.clear();
    save();
  }

 private:
  void load(std::string_view passphrase) {
    std::ifstream in(path_, std::ios::binary);
    Bytes sealed((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    require(sealed.size() >= 44, Errc::MalformedEncoding, "journal file truncated");
    salt_.assign(sealed.begin(), sealed.begin() + 16);
    key_ = crypto::derive_seal_key(passphrase, salt_);
    cbor::Value v = cbor::parse(crypto::open_with_key(key_, sealed));
    for (const auto& e : v.as<cbor::Array>("journal")) {
      const auto& pair = e.as<cbor::Array>("journal entry");
      require(pair.size() == 2, Errc::MalformedEncoding, "bad journal entry");
      entries_[pair[0].as_int("index")] = pair[1].as<Bytes>("local");
    }
  }

  void save() const {
    cbor::Array a;
    for (const auto& [i, b] : entries_) a.push_back(cbor::Array{i, b});
    Bytes sealed = crypto::seal_with_key(key_, salt_, cbor::serialize(a));
    auto tmp = path_;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out.write(reinterpret_cast<const char*>(sealed.data()), static_cast<std::streamsize>(sealed.size()));
      require(out.good(), Errc::Io, "cannot write journal " + tmp.string());
    }
    std::filesystem::rename(tmp, path_);
  }

  std::filesystem::path path_;
  std::size_t keep_;
  Bytes salt_;
  crypto::SealKey key_{};
  std::map<std::int64_t, Bytes> entries_;
};

// Single writer for one PRNG chain. Randomness for a pulse is journaled
// before the pulse is handed to `publish`, so a crash after publication can
// still reveal it.
class PrngChainBuilder {
 public:
  using Publish = std::function<void(const twine::Pulse&, const Cid&, const Bytes&)>;

  PrngChainBuilder(twine::ChainMetadata meta, const crypto::SigningKey& key, const twine::Resolver& resolver,
                   PrngJournal& journal, LocalSources& sources, Publish publish,
                   std::optional<twine::Pulse> head = std::nullopt)
      : meta_(std::move(meta)), key_(key), resolver_(resolver), journal_(journal), sources_(sources),
        publish_(std::move(publish)), head_(std::move(head)) {}

  std::pair<twine::Pulse, Cid> step(std::vector<twine::Mixin> mixins = {}) {
    Bytes fresh = sources_.draw();
    std::pair<twine::Pulse, Cid> built;
    std::optional<Bytes> prev_local;
    if (head_) prev_local = journal_.get(head_->index);
    bool intact = head_ && prev_local &&
                  crypto::sha3_512_bytes(*prev_local) == PrngPayload::from_value(head_->payload).pre;
    if (!head_ || intact)
      built = build_prng_pulse(meta_, head_, prev_local, resolver_, std::move(mixins), fresh, sources_.meta(), key_);
    else
      built = build_break_pulse(meta_, *head_, resolver_, std::move(mixins), fresh, sources_.meta(), key_);
    journal_.put(built.first.index, fresh);
    publish_(built.first, built.second, built.first.bytes());
    head_ = built.first;
    return built;
  }

  const std::optional<twine::Pulse>& head() const { return head_; }

 private:
  twine::ChainMetadata meta_;
  const crypto::SigningKey& key_;
  const twine::Resolver& resolver_;
  PrngJournal& journal_;
  LocalSources& sources_;
  Publish publish_;
  std::optional<twine::Pulse> head_;
};

}  // namespace beacon::prng
