#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <unordered_map>

#include "beacon/twine.hpp"

namespace beacon::store {

enum class RecordKind { pulse, chain };

struct StoreRecord {
  Cid cid;
  RecordKind kind = RecordKind::pulse;
  Bytes bytes;
  Cid chain;
  std::int64_t index = -1;
  std::int64_t received_at_ms = 0;
};

struct ChainHead {
  Cid chain;
  Cid head_pulse;
  std::int64_t head_index = -1;
};

struct AuditReport {
  std::size_t records = 0;
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

namespace detail {

// Log frame: u32 LE payload length, u64 LE receive time (ms), u8 key length,
// the binary CID the record was stored under, then the bytes as hashed.
inline constexpr std::size_t kFrameHeader = 13;

class LogFile {
 public:
  explicit LogFile(const std::filesystem::path& path) : path_(path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    require(fd_ >= 0, Errc::Io, "cannot open " + path.string());
  }
  ~LogFile() {
    if (fd_ >= 0) ::close(fd_);
  }
  LogFile(const LogFile&) = delete;
  LogFile& operator=(const LogFile&) = delete;

  // Returns the offset of the payload.
  std::uint64_t append(const Cid& key, ByteView bytes, std::int64_t received_ms) {
    Bytes k = key.to_binary();
    Bytes frame;
    frame.reserve(kFrameHeader + k.size() + bytes.size());
    auto len = static_cast<std::uint32_t>(bytes.size());
    for (int i = 0; i < 4; ++i) frame.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    append_le64(frame, static_cast<std::uint64_t>(received_ms));
    frame.push_back(static_cast<std::uint8_t>(k.size()));
    frame.insert(frame.end(), k.begin(), k.end());
    frame.insert(frame.end(), bytes.begin(), bytes.end());
    off_t start = ::lseek(fd_, 0, SEEK_END);
    require(start >= 0, Errc::Io, "seek failed on " + path_.string());
    std::size_t done = 0;
    while (done < frame.size()) {
      ssize_t n = ::write(fd_, frame.data() + done, frame.size() - done);
      require(n > 0, Errc::Io, "write failed on " + path_.string());
      done += static_cast<std::size_t>(n);
    }
    ::fdatasync(fd_);
    return static_cast<std::uint64_t>(start) + kFrameHeader + k.size();
  }

  Bytes read(std::uint64_t offset, std::size_t len) const {
    Bytes out(len);
    std::size_t done = 0;
    while (done < len) {
      ssize_t n = ::pread(fd_, out.data() + done, len - done, static_cast<off_t>(offset + done));
      require(n > 0, Errc::Io, "short read on " + path_.string());
      done += static_cast<std::size_t>(n);
    }
    return out;
  }

  struct Frame {
    Cid key;
    std::uint64_t offset;
    std::size_t len;
    std::int64_t received_ms;
  };

  // Scans all complete frames; a torn tail from a crash is cut off.
  std::vector<Frame> scan() {
    std::vector<Frame> frames;
    off_t end = ::lseek(fd_, 0, SEEK_END);
    require(end >= 0, Errc::Io, "seek failed on " + path_.string());
    std::uint64_t pos = 0;
    auto size = static_cast<std::uint64_t>(end);
    while (pos + kFrameHeader <= size) {
      Bytes h = read(pos, kFrameHeader);
      std::uint32_t len = h[0] | (h[1] << 8) | (h[2] << 16) | (static_cast<std::uint32_t>(h[3]) << 24);
      std::size_t klen = h[12];
      if (pos + kFrameHeader + klen + len > size) break;
      Cid key = Cid::from_binary(read(pos + kFrameHeader, klen));
      frames.push_back({std::move(key), pos + kFrameHeader + klen, len,
                        static_cast<std::int64_t>(read_le64(ByteView(h).subspan(4)))});
      pos += kFrameHeader + klen + len;
    }
    if (pos != size) require(::ftruncate(fd_, static_cast<off_t>(pos)) == 0, Errc::Io, "cannot truncate torn log");
    return frames;
  }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

inline std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

}  // namespace detail

// File-backed content-addressed store: one append-only log for chain
// metadata, one per chain for its pulses, and an in-memory CID index.
class BeaconStore : public twine::Resolver {
 public:
  explicit BeaconStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_ / "pulses");
    chains_log_ = std::make_unique<detail::LogFile>(dir_ / "chains.log");
    load();
  }

  Cid put_chain(ByteView bytes) {
    twine::ChainMetadata meta = parse_or_reject<twine::ChainMetadata>(bytes);
    require(twine::verify_chain(meta), Errc::VerificationFailed, "chain metadata signature does not verify");
    Cid cid = compute_cid(bytes);
    std::unique_lock lk(mu_);
    if (chains_.count(cid)) return cid;
    std::uint64_t off = chains_log_->append(cid, bytes, detail::now_ms());
    add_chain_locked(cid, std::move(meta), off, bytes.size());
    return cid;
  }

  Cid put_pulse(ByteView bytes) {
    twine::Pulse pulse = parse_or_reject<twine::Pulse>(bytes);
    Cid cid = compute_cid(bytes);
    ChainState* chain = nullptr;
    {
      std::shared_lock lk(mu_);
      auto it = chains_.find(pulse.chain);
      require(it != chains_.end(), Errc::UnknownChain, pulse.chain.to_string());
      chain = it->second.get();
    }
    std::lock_guard append_lock(chain->append_mu);
    {
      std::shared_lock lk(mu_);
      if (index_.count(cid)) return cid;
    }
    std::int64_t head = chain->pulses.size();
    if (pulse.index != head)
      fail(Errc::HeadConflict, "chain head is " + std::to_string(head - 1) + ", got index " +
                                   std::to_string(pulse.index));
    auto rep = twine::verify_pulse(pulse, cid, chain->meta, *this);
    if (!rep.ok()) {
      std::string why;
      for (const auto& d : rep.details) why += (why.empty() ? "" : "; ") + d;
      fail(Errc::VerificationFailed, why);
    }
    std::uint64_t off = chain->log->append(cid, bytes, detail::now_ms());
    std::unique_lock lk(mu_);
    index_[cid] = Location{RecordKind::pulse, chain, off, bytes.size(), pulse.index, detail::now_ms()};
    chain->pulses.push_back(cid);
    return cid;
  }

  std::optional<Bytes> fetch(const Cid& cid) const override {
    std::shared_lock lk(mu_);
    auto it = index_.find(cid);
    if (it == index_.end()) return std::nullopt;
    return read_locked(it->second);
  }

  Bytes get_pulse(const Cid& cid) const {
    std::shared_lock lk(mu_);
    auto it = index_.find(cid);
    require(it != index_.end() && it->second.kind == RecordKind::pulse, Errc::NotFound, cid.to_string());
    return read_locked(it->second);
  }

  Bytes get_pulse(const Cid& chain, std::int64_t index) const {
    std::shared_lock lk(mu_);
    const ChainState& c = chain_locked(chain);
    require(index >= 0 && index < static_cast<std::int64_t>(c.pulses.size()), Errc::NotFound,
            chain.to_string() + "/" + std::to_string(index));
    return read_locked(index_.at(c.pulses[static_cast<std::size_t>(index)]));
  }

  Bytes latest_pulse(const Cid& chain) const {
    std::shared_lock lk(mu_);
    const ChainState& c = chain_locked(chain);
    require(!c.pulses.empty(), Errc::NotFound, chain.to_string() + " has no pulses");
    return read_locked(index_.at(c.pulses.back()));
  }

  Bytes get_chain(const Cid& chain) const {
    std::shared_lock lk(mu_);
    auto it = index_.find(chain);
    require(it != index_.end() && it->second.kind == RecordKind::chain, Errc::NotFound, chain.to_string());
    return read_locked(it->second);
  }

  std::optional<ChainHead> head(const Cid& chain) const {
    std::shared_lock lk(mu_);
    const ChainState& c = chain_locked(chain);
    if (c.pulses.empty()) return std::nullopt;
    return ChainHead{chain, c.pulses.back(), static_cast<std::int64_t>(c.pulses.size()) - 1};
  }

  std::vector<std::pair<Cid, std::string>> list_chains() const {
    std::shared_lock lk(mu_);
    std::vector<std::pair<std::string, std::pair<Cid, std::string>>> rows;
    for (const auto& [cid, c] : chains_) rows.push_back({cid.to_string(), {cid, c->meta.source}});
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::pair<Cid, std::string>> out;
    for (auto& r : rows) out.push_back(std::move(r.second));
    return out;
  }

  // Full scan: every record rehashed from disk, every chain checked for
  // contiguous indices.
  AuditReport audit() const {
    std::shared_lock lk(mu_);
    AuditReport rep;
    for (const auto& [cid, loc] : index_) {
      ++rep.records;
      Bytes b = read_locked(loc);
      if (compute_cid(b, cid.hash_alg, cid.codec) != cid) rep.problems.push_back("hash mismatch for " + cid.to_string());
    }
    for (const auto& [chain_cid, c] : chains_) {
      for (std::size_t i = 0; i < c->pulses.size(); ++i) {
        std::string where = "chain " + chain_cid.to_string() + " position " + std::to_string(i);
        try {
          twine::Pulse p = twine::Pulse::parse(read_locked(index_.at(c->pulses[i])));
          if (p.chain != chain_cid) rep.problems.push_back(where + " holds a foreign pulse");
          if (p.index != static_cast<std::int64_t>(i)) rep.problems.push_back(where + " holds index " + std::to_string(p.index));
        } catch (const Error& e) {
          rep.problems.push_back(where + ": " + e.what());
        }
      }
    }
    return rep;
  }

  std::optional<StoreRecord> record(const Cid& cid) const {
    std::shared_lock lk(mu_);
    auto it = index_.find(cid);
    if (it == index_.end()) return std::nullopt;
    const Location& loc = it->second;
    StoreRecord r{cid, loc.kind, read_locked(loc), {}, loc.index, loc.received_ms};
    if (loc.chain) r.chain = loc.chain->meta.cid();
    return r;
  }

  const std::filesystem::path& directory() const { return dir_; }

 private:
  struct ChainState {
    twine::ChainMetadata meta;
    std::unique_ptr<detail::LogFile> log;
    std::vector<Cid> pulses;
    std::mutex append_mu;
  };

  struct Location {
    RecordKind kind;
    ChainState* chain;  // null for chain metadata records
    std::uint64_t offset;
    std::size_t len;
    std::int64_t index;
    std::int64_t received_ms = 0;
  };

  template <typename T>
  static T parse_or_reject(ByteView bytes) {
    try {
      return T::parse(bytes);
    } catch (const Error& e) {
      fail(Errc::VerificationFailed, std::string("not a canonical record: ") + e.what());
    }
  }

  std::filesystem::path pulse_log_path(const Cid& chain) const { return dir_ / "pulses" / (chain.to_string() + ".log"); }

  ChainState& add_chain_locked(const Cid& cid, twine::ChainMetadata meta, std::uint64_t off, std::size_t len) {
    auto state = std::make_unique<ChainState>();
    state->meta = std::move(meta);
    state->log = std::make_unique<detail::LogFile>(pulse_log_path(cid));
    ChainState& ref = *state;
    chains_[cid] = std::move(state);
    index_[cid] = Location{RecordKind::chain, nullptr, off, len, -1};
    return ref;
  }

  const ChainState& chain_locked(const Cid& chain) const {
    auto it = chains_.find(chain);
    require(it != chains_.end(), Errc::UnknownChain, chain.to_string());
    return *it->second;
  }

  Bytes read_locked(const Location& loc) const {
    const detail::LogFile& f = loc.chain ? *loc.chain->log : *chains_log_;
    return f.read(loc.offset, loc.len);
  }

  // Rebuilds the index from the keys recorded in the logs; content is not
  // rehashed here, that is what audit() is for.
  void load() {
    for (const auto& fr : chains_log_->scan()) {
      if (chains_.count(fr.key)) continue;
      Bytes b = chains_log_->read(fr.offset, fr.len);
      ChainState& c = add_chain_locked(fr.key, twine::ChainMetadata::parse(b), fr.offset, fr.len);
      for (const auto& pf : c.log->scan()) {
        auto index = static_cast<std::int64_t>(c.pulses.size());
        index_[pf.key] = Location{RecordKind::pulse, &c, pf.offset, pf.len, index, pf.received_ms};
        c.pulses.push_back(pf.key);
      }
    }
  }

  std::filesystem::path dir_;
  std::unique_ptr<detail::LogFile> chains_log_;
  mutable std::shared_mutex mu_;
  std::map<Cid, std::unique_ptr<ChainState>> chains_;
  std::unordered_map<Cid, Location> index_;
};

}  // namespace beacon::store
