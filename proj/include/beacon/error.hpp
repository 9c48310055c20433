#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace beacon {

enum class Errc {
  UnsupportedValue,
  UnsupportedAlgorithm,
  MalformedEncoding,
  SigningFailure,
  InvalidRadix,
  HeadMismatch,
  ResolverMiss,
  ResolverUnavailable,
  VerificationFailed,
  HeadConflict,
  UnknownChain,
  NotFound,
  NumericalDegeneracy,
  DegenerateCounts,
  ConvergenceFailure,
  NoPositiveRate,
  ZeroPefValue,
  CapacityExceeded,
  EntropyTooLow,
  SeedLengthMismatch,
  InvalidFactorization,
  GenerationTimeout,
  TooLarge,
  InvalidState,
  SourceUnavailable,
  CommitmentMismatch,
  GenesisInvalid,
  TimingViolation,
  DataHashMismatch,
  UpstreamUnavailable,
  FreshnessViolation,
  InvalidArgument,
  Io,
  Unauthorized,
};

inline std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::UnsupportedValue: return "UnsupportedValue";
    case Errc::UnsupportedAlgorithm: return "UnsupportedAlgorithm";
    case Errc::MalformedEncoding: return "MalformedEncoding";
    case Errc::SigningFailure: return "SigningFailure";
    case Errc::InvalidRadix: return "InvalidRadix";
    case Errc::HeadMismatch: return "HeadMismatch";
    case Errc::ResolverMiss: return "ResolverMiss";
    case Errc::ResolverUnavailable: return "ResolverUnavailable";
    case Errc::VerificationFailed: return "VerificationFailed";
    case Errc::HeadConflict: return "HeadConflict";
    case Errc::UnknownChain: return "UnknownChain";
    case Errc::NotFound: return "NotFound";
    case Errc::NumericalDegeneracy: return "NumericalDegeneracy";
    case Errc::DegenerateCounts: return "DegenerateCounts";
    case Errc::ConvergenceFailure: return "ConvergenceFailure";
    case Errc::NoPositiveRate: return "NoPositiveRate";
    case Errc::ZeroPefValue: return "ZeroPefValue";
    case Errc::CapacityExceeded: return "CapacityExceeded";
    case Errc::EntropyTooLow: return "EntropyTooLow";
    case Errc::SeedLengthMismatch: return "SeedLengthMismatch";
    case Errc::InvalidFactorization: return "InvalidFactorization";
    case Errc::GenerationTimeout: return "GenerationTimeout";
    case Errc::TooLarge: return "TooLarge";
    case Errc::InvalidState: return "InvalidState";
    case Errc::SourceUnavailable: return "SourceUnavailable";
    case Errc::CommitmentMismatch: return "CommitmentMismatch";
    case Errc::GenesisInvalid: return "GenesisInvalid";
    case Errc::TimingViolation: return "TimingViolation";
    case Errc::DataHashMismatch: return "DataHashMismatch";
    case Errc::UpstreamUnavailable: return "UpstreamUnavailable";
    case Errc::FreshnessViolation: return "FreshnessViolation";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::Io: return "Io";
    case Errc::Unauthorized: return "Unauthorized";
  }
  return "Unknown";
}

inline std::optional<Errc> errc_from_name(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(Errc::Unauthorized); ++i)
    if (errc_name(static_cast<Errc>(i)) == name) return static_cast<Errc>(i);
  return std::nullopt;
}

// All library failures surface as this exception; `code()` is the stable
// machine-readable part, `what()` carries context for humans.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) { throw Error(code, message); }

inline void require(bool cond, Errc code, const std::string& message) {
  if (!cond) fail(code, message);
}

}  // namespace beacon
