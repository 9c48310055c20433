#pragma once

// Thin RAII layer over OpenSSL: SHA3/SHAKE digests, system randomness,
// RS256/ES256 keys with JWK export, detached compact JWS, and AES-GCM
// sealing for material kept at rest.

#include <openssl/bio.h>
#include <openssl/core_names.h>
#include <openssl/ecdsa.h>
#include <openssl/err.h>
#include <openssl/evp.h>
#include <openssl/param_build.h>
#include <openssl/pem.h>
#include <openssl/rand.h>

#include <map>
#include <memory>
#include <string>
#include <string_view>

#include "beacon/bytes.hpp"
#include "beacon/error.hpp"

namespace beacon::crypto {

namespace detail {

struct PkeyFree { void operator()(EVP_PKEY* p) const { EVP_PKEY_free(p); } };
struct MdCtxFree { void operator()(EVP_MD_CTX* p) const { EVP_MD_CTX_free(p); } };
struct CipherCtxFree { void operator()(EVP_CIPHER_CTX* p) const { EVP_CIPHER_CTX_free(p); } };
struct BioFree { void operator()(BIO* p) const { BIO_free(p); } };
struct BnFree { void operator()(BIGNUM* p) const { BN_free(p); } };
struct ParamBldFree { void operator()(OSSL_PARAM_BLD* p) const { OSSL_PARAM_BLD_free(p); } };
struct ParamFree { void operator()(OSSL_PARAM* p) const { OSSL_PARAM_free(p); } };
struct PkeyCtxFree { void operator()(EVP_PKEY_CTX* p) const { EVP_PKEY_CTX_free(p); } };
struct EcdsaSigFree { void operator()(ECDSA_SIG* p) const { ECDSA_SIG_free(p); } };

using PkeyPtr = std::unique_ptr<EVP_PKEY, PkeyFree>;
using MdCtxPtr = std::unique_ptr<EVP_MD_CTX, MdCtxFree>;
using BnPtr = std::unique_ptr<BIGNUM, BnFree>;

inline std::string openssl_error() {
  unsigned long e = ERR_get_error();
  if (e == 0) return "unknown OpenSSL error";
  char buf[256];
  ERR_error_string_n(e, buf, sizeof buf);
  return buf;
}

inline Bytes digest(const EVP_MD* md, ByteView data, std::size_t xof_len = 0) {
  MdCtxPtr ctx(EVP_MD_CTX_new());
  require(ctx && EVP_DigestInit_ex(ctx.get(), md, nullptr) == 1, Errc::UnsupportedAlgorithm,
          "digest init failed");
  require(EVP_DigestUpdate(ctx.get(), data.data(), data.size()) == 1, Errc::UnsupportedAlgorithm,
          "digest update failed");
  Bytes out;
  if (xof_len > 0) {
    out.resize(xof_len);
    require(EVP_DigestFinalXOF(ctx.get(), out.data(), out.size()) == 1, Errc::UnsupportedAlgorithm,
            "XOF finalisation failed");
  } else {
    out.resize(static_cast<std::size_t>(EVP_MD_get_size(md)));
    unsigned int len = 0;
    require(EVP_DigestFinal_ex(ctx.get(), out.data(), &len) == 1, Errc::UnsupportedAlgorithm,
            "digest finalisation failed");
    out.resize(len);
  }
  return out;
}

inline Bytes bn_bytes(const BIGNUM* bn, int pad = 0) {
  int n = pad > 0 ? pad : BN_num_bytes(bn);
  Bytes out(static_cast<std::size_t>(n));
  if (pad > 0) BN_bn2binpad(bn, out.data(), pad);
  else BN_bn2bin(bn, out.data());
  return out;
}

}  // namespace detail

inline Digest512 sha3_512(ByteView data) {
  Bytes d = detail::digest(EVP_sha3_512(), data);
  Digest512 out{};
  std::copy(d.begin(), d.end(), out.begin());
  return out;
}

inline Bytes sha3_512_bytes(ByteView data) { return detail::digest(EVP_sha3_512(), data); }

inline Bytes sha256(ByteView data) { return detail::digest(EVP_sha256(), data); }

inline Bytes shake256(ByteView data, std::size_t out_len) {
  require(out_len > 0, Errc::InvalidArgument, "SHAKE256 output length must be positive");
  return detail::digest(EVP_shake256(), data, out_len);
}

inline Bytes random_bytes(std::size_t n) {
  Bytes out(n);
  require(RAND_bytes(out.data(), static_cast<int>(n)) == 1, Errc::SourceUnavailable,
          "system CSPRNG failure: " + detail::openssl_error());
  return out;
}

enum class SigAlg { RS256, ES256 };

inline std::string_view alg_name(SigAlg a) { return a == SigAlg::RS256 ? "RS256" : "ES256"; }

inline SigAlg parse_alg(std::string_view s) {
  if (s == "RS256") return SigAlg::RS256;
  if (s == "ES256") return SigAlg::ES256;
  fail(Errc::UnsupportedAlgorithm, "unsupported signature algorithm " + std::string(s));
}

// JSON Web Key members as text (base64url for numbers); includes "alg".
using Jwk = std::map<std::string, std::string>;

class PublicKey {
 public:
  static PublicKey from_jwk(const Jwk& jwk) {
    auto get = [&](const char* k) -> const std::string& {
      auto it = jwk.find(k);
      require(it != jwk.end(), Errc::UnsupportedAlgorithm, std::string("JWK missing member ") + k);
      return it->second;
    };
    SigAlg alg = parse_alg(get("alg"));
    std::unique_ptr<OSSL_PARAM_BLD, detail::ParamBldFree> bld(OSSL_PARAM_BLD_new());
    detail::BnPtr n, e;
    Bytes point;
    const char* keytype = nullptr;
    if (alg == SigAlg::RS256) {
      require(get("kty") == "RSA", Errc::UnsupportedAlgorithm, "RS256 key must have kty RSA");
      Bytes nb = base64url_decode(get("n"));
      Bytes eb = base64url_decode(get("e"));
      n.reset(BN_bin2bn(nb.data(), static_cast<int>(nb.size()), nullptr));
      e.reset(BN_bin2bn(eb.data(), static_cast<int>(eb.size()), nullptr));
      OSSL_PARAM_BLD_push_BN(bld.get(), OSSL_PKEY_PARAM_RSA_N, n.get());
      OSSL_PARAM_BLD_push_BN(bld.get(), OSSL_PKEY_PARAM_RSA_E, e.get());
      keytype = "RSA";
    } else {
      require(get("kty") == "EC" && get("crv") == "P-256", Errc::UnsupportedAlgorithm,
              "ES256 key must be EC P-256");
      Bytes x = base64url_decode(get("x"));
      Bytes y = base64url_decode(get("y"));
      require(x.size() == 32 && y.size() == 32, Errc::UnsupportedAlgorithm, "bad P-256 coordinates");
      point.push_back(0x04);
      point.insert(point.end(), x.begin(), x.end());
      point.insert(point.end(), y.begin(), y.end());
      OSSL_PARAM_BLD_push_utf8_string(bld.get(), OSSL_PKEY_PARAM_GROUP_NAME, "prime256v1", 0);
      OSSL_PARAM_BLD_push_octet_string(bld.get(), OSSL_PKEY_PARAM_PUB_KEY, point.data(), point.size());
      keytype = "EC";
    }
    std::unique_ptr<OSSL_PARAM, detail::ParamFree> params(OSSL_PARAM_BLD_to_param(bld.get()));
    std::unique_ptr<EVP_PKEY_CTX, detail::PkeyCtxFree> ctx(EVP_PKEY_CTX_new_from_name(nullptr, keytype, nullptr));
    EVP_PKEY* raw = nullptr;
    require(ctx && EVP_PKEY_fromdata_init(ctx.get()) == 1 &&
                EVP_PKEY_fromdata(ctx.get(), &raw, EVP_PKEY_PUBLIC_KEY, params.get()) == 1,
            Errc::UnsupportedAlgorithm, "cannot import JWK: " + detail::openssl_error());
    PublicKey pk;
    pk.key_.reset(raw);
    pk.alg_ = alg;
    return pk;
  }

  SigAlg alg() const noexcept { return alg_; }

  bool verify(ByteView message, ByteView signature) const {
    Bytes der;
    if (alg_ == SigAlg::ES256) {
      if (signature.size() != 64) return false;
      std::unique_ptr<ECDSA_SIG, detail::EcdsaSigFree> sig(ECDSA_SIG_new());
      BIGNUM* r = BN_bin2bn(signature.data(), 32, nullptr);
      BIGNUM* s = BN_bin2bn(signature.data() + 32, 32, nullptr);
      ECDSA_SIG_set0(sig.get(), r, s);
      int len = i2d_ECDSA_SIG(sig.get(), nullptr);
      der.resize(static_cast<std::size_t>(len));
      unsigned char* p = der.data();
      i2d_ECDSA_SIG(sig.get(), &p);
      signature = der;
    }
    detail::MdCtxPtr ctx(EVP_MD_CTX_new());
    if (EVP_DigestVerifyInit(ctx.get(), nullptr, EVP_sha256(), nullptr, key_.get()) != 1) return false;
    int rc = EVP_DigestVerify(ctx.get(), signature.data(), signature.size(), message.data(), message.size());
    ERR_clear_error();
    return rc == 1;
  }

 protected:
  detail::PkeyPtr key_;
  SigAlg alg_ = SigAlg::RS256;
};

class SigningKey {
 public:
  static SigningKey generate(SigAlg alg, std::size_t rsa_bits = 4096) {
    SigningKey k;
    k.alg_ = alg;
    EVP_PKEY* raw = alg == SigAlg::RS256 ? EVP_PKEY_Q_keygen(nullptr, nullptr, "RSA", rsa_bits)
                                         : EVP_PKEY_Q_keygen(nullptr, nullptr, "EC", "P-256");
    require(raw != nullptr, Errc::SigningFailure, "key generation failed: " + detail::openssl_error());
    k.key_.reset(raw);
    return k;
  }

  static SigningKey from_pem(std::string_view pem) {
    std::unique_ptr<BIO, detail::BioFree> bio(BIO_new_mem_buf(pem.data(), static_cast<int>(pem.size())));
    EVP_PKEY* raw = PEM_read_bio_PrivateKey(bio.get(), nullptr, nullptr, nullptr);
    require(raw != nullptr, Errc::SigningFailure, "cannot parse private key PEM");
    SigningKey k;
    k.key_.reset(raw);
    k.alg_ = EVP_PKEY_is_a(raw, "RSA") ? SigAlg::RS256 : SigAlg::ES256;
    return k;
  }

  std::string to_pem() const {
    std::unique_ptr<BIO, detail::BioFree> bio(BIO_new(BIO_s_mem()));
    require(PEM_write_bio_PrivateKey(bio.get(), key_.get(), nullptr, nullptr, 0, nullptr, nullptr) == 1,
            Errc::SigningFailure, "cannot serialise private key");
    char* data = nullptr;
    long len = BIO_get_mem_data(bio.get(), &data);
    return std::string(data, static_cast<std::size_t>(len));
  }

  SigAlg alg() const noexcept { return alg_; }

  std::size_t modulus_bits() const { return static_cast<std::size_t>(EVP_PKEY_get_bits(key_.get())); }

  Jwk public_jwk() const {
    Jwk jwk;
    jwk["alg"] = std::string(alg_name(alg_));
    if (alg_ == SigAlg::RS256) {
      BIGNUM* n = nullptr;
      BIGNUM* e = nullptr;
      EVP_PKEY_get_bn_param(key_.get(), OSSL_PKEY_PARAM_RSA_N, &n);
      EVP_PKEY_get_bn_param(key_.get(), OSSL_PKEY_PARAM_RSA_E, &e);
      detail::BnPtr np(n), ep(e);
      jwk["kty"] = "RSA";
      jwk["n"] = base64url(detail::bn_bytes(n));
      jwk["e"] = base64url(detail::bn_bytes(e));
    } else {
      BIGNUM* x = nullptr;
      BIGNUM* y = nullptr;
      EVP_PKEY_get_bn_param(key_.get(), OSSL_PKEY_PARAM_EC_PUB_X, &x);
      EVP_PKEY_get_bn_param(key_.get(), OSSL_PKEY_PARAM_EC_PUB_Y, &y);
      detail::BnPtr xp(x), yp(y);
      jwk["kty"] = "EC";
      jwk["crv"] = "P-256";
      jwk["x"] = base64url(detail::bn_bytes(x, 32));
      jwk["y"] = base64url(detail::bn_bytes(y, 32));
    }
    return jwk;
  }

  // JWS-style signature bytes: PKCS#1 v1.5 for RS256, raw r||s for ES256.
  Bytes sign(ByteView message) const {
    detail::MdCtxPtr ctx(EVP_MD_CTX_new());
    require(EVP_DigestSignInit(ctx.get(), nullptr, EVP_sha256(), nullptr, key_.get()) == 1,
            Errc::SigningFailure, detail::openssl_error());
    std::size_t len = 0;
    require(EVP_DigestSign(ctx.get(), nullptr, &len, message.data(), message.size()) == 1,
            Errc::SigningFailure, detail::openssl_error());
    Bytes sig(len);
    require(EVP_DigestSign(ctx.get(), sig.data(), &len, message.data(), message.size()) == 1,
            Errc::SigningFailure, detail::openssl_error());
    sig.resize(len);
    if (alg_ == SigAlg::RS256) return sig;
    const unsigned char* p = sig.data();
    std::unique_ptr<ECDSA_SIG, detail::EcdsaSigFree> es(d2i_ECDSA_SIG(nullptr, &p, static_cast<long>(sig.size())));
    require(es != nullptr, Errc::SigningFailure, "malformed ECDSA signature");
    Bytes out = detail::bn_bytes(ECDSA_SIG_get0_r(es.get()), 32);
    Bytes s = detail::bn_bytes(ECDSA_SIG_get0_s(es.get()), 32);
    out.insert(out.end(), s.begin(), s.end());
    return out;
  }

  PublicKey public_key() const { return PublicKey::from_jwk(public_jwk()); }

 private:
  detail::PkeyPtr key_;
  SigAlg alg_ = SigAlg::RS256;
};

// Detached compact JWS over a 64-byte hash: "<b64u header>..<b64u sig>".
// The signing input is "<b64u header>.<b64u hash>".
inline std::string jws_sign_detached(const SigningKey& key, ByteView hash) {
  std::string header = base64url(to_bytes(std::string(R"({"alg":")") + std::string(alg_name(key.alg())) + R"("})"));
  std::string input = header + "." + base64url(hash);
  Bytes sig = key.sign(to_bytes(input));
  return header + ".." + base64url(sig);
}

inline bool jws_verify_detached(const PublicKey& key, std::string_view jws, ByteView hash) {
  auto first = jws.find('.');
  if (first == std::string_view::npos || jws.size() < first + 2 || jws[first + 1] != '.') return false;
  std::string_view header = jws.substr(0, first);
  std::string_view sig = jws.substr(first + 2);
  std::string expected_header =
      base64url(to_bytes(std::string(R"({"alg":")") + std::string(alg_name(key.alg())) + R"("})"));
  if (header != expected_header) return false;
  Bytes sig_bytes;
  try {
    sig_bytes = base64url_decode(sig);
  } catch (const Error&) {
    return false;
  }
  std::string input = std::string(header) + "." + base64url(hash);
  return key.verify(to_bytes(input), sig_bytes);
}

// AES-256-GCM with a key derived from a passphrase (PBKDF2-HMAC-SHA256).
// Layout: salt(16) | iv(12) | ciphertext | tag(16).
using SealKey = std::array<unsigned char, 32>;

inline SealKey derive_seal_key(std::string_view passphrase, ByteView salt) {
  require(salt.size() == 16, Errc::InvalidArgument, "seal salt must be 16 bytes");
  SealKey key;
  PKCS5_PBKDF2_HMAC(passphrase.data(), static_cast<int>(passphrase.size()), salt.data(), 16, 100000,
                    EVP_sha256(), 32, key.data());
  return key;
}

// Same layout as seal(); `salt` must be the one `key` was derived with.
inline Bytes seal_with_key(const SealKey& key, ByteView salt, ByteView plaintext) {
  Bytes iv = random_bytes(12);
  std::unique_ptr<EVP_CIPHER_CTX, detail::CipherCtxFree> ctx(EVP_CIPHER_CTX_new());
  EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.data(), iv.data());
  Bytes out(salt.begin(), salt.end());
  out.insert(out.end(), iv.begin(), iv.end());
  Bytes ct(plaintext.size() + 16);
  int len = 0;
  EVP_EncryptUpdate(ctx.get(), ct.data(), &len, plaintext.data(), static_cast<int>(plaintext.size()));
  int total = len;
  EVP_EncryptFinal_ex(ctx.get(), ct.data() + total, &len);
  total += len;
  ct.resize(static_cast<std::size_t>(total));
  unsigned char tag[16];
  EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, 16, tag);
  out.insert(out.end(), ct.begin(), ct.end());
  out.insert(out.end(), tag, tag + 16);
  return out;
}

inline Bytes open_with_key(const SealKey& key, ByteView sealed) {
  require(sealed.size() >= 44, Errc::MalformedEncoding, "sealed blob too short");
  std::unique_ptr<EVP_CIPHER_CTX, detail::CipherCtxFree> ctx(EVP_CIPHER_CTX_new());
  EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.data(), sealed.data() + 16);
  std::size_t ct_len = sealed.size() - 44;
  Bytes pt(ct_len + 16);
  int len = 0;
  EVP_DecryptUpdate(ctx.get(), pt.data(), &len, sealed.data() + 28, static_cast<int>(ct_len));
  int total = len;
  Bytes tag(sealed.end() - 16, sealed.end());
  EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, 16, tag.data());
  require(EVP_DecryptFinal_ex(ctx.get(), pt.data() + total, &len) == 1, Errc::VerificationFailed,
          "authentication tag mismatch (wrong passphrase or corrupted data)");
  total += len;
  pt.resize(static_cast<std::size_t>(total));
  return pt;
}

inline Bytes seal(std::string_view passphrase, ByteView plaintext) {
  Bytes salt = random_bytes(16);
  return seal_with_key(derive_seal_key(passphrase, salt), salt, plaintext);
}

inline Bytes open(std::string_view passphrase, ByteView sealed) {
  require(sealed.size() >= 44, Errc::MalformedEncoding, "sealed blob too short");
  return open_with_key(derive_seal_key(passphrase, sealed.first(16)), sealed);
}

}  // namespace beacon::crypto
