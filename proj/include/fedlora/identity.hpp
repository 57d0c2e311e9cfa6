#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <sodium.h>

#include "fedlora/errors.hpp"
#include "fedlora/matrix.hpp"

namespace fedlora {

inline void ensure_sodium() {
    static const int rc = sodium_init();
    if (rc < 0) throw IdentityError("libsodium failed to initialize");
}

using Bytes = std::vector<std::uint8_t>;
using Digest = std::array<std::uint8_t, 32>;

inline std::string to_base64(const std::uint8_t* data, std::size_t len) {
    std::string out(sodium_base64_ENCODED_LEN(len, sodium_base64_VARIANT_ORIGINAL), '\0');
    sodium_bin2base64(out.data(), out.size(), data, len, sodium_base64_VARIANT_ORIGINAL);
    out.resize(std::strlen(out.c_str()));
    return out;
}

inline Bytes from_base64(const std::string& text) {
    Bytes out(text.size());
    std::size_t len = 0;
    if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), nullptr,
                          &len, nullptr, sodium_base64_VARIANT_ORIGINAL) != 0)
        throw IdentityError("invalid base64 input");
    out.resize(len);
    return out;
}

inline std::string to_hex(const std::uint8_t* data, std::size_t len) {
    std::string out(len * 2 + 1, '\0');
    sodium_bin2hex(out.data(), out.size(), data, len);
    out.resize(len * 2);
    return out;
}

inline Digest sha256(const std::uint8_t* data, std::size_t len) {
    ensure_sodium();
    Digest d{};
    crypto_hash_sha256(d.data(), data, len);
    return d;
}

// ---------------------------------------------------------------------------
// Client identities: Ed25519 key pairs, the private half held client-side.

struct ClientIdentity {
    int client_id = 0;
    Bytes public_key;  // 32 bytes
    Bytes secret_key;  // 64 bytes; empty on verifier-side copies
};

inline ClientIdentity generate_identity(int client_id) {
    ensure_sodium();
    ClientIdentity id;
    id.client_id = client_id;
    id.public_key.resize(crypto_sign_PUBLICKEYBYTES);
    id.secret_key.resize(crypto_sign_SECRETKEYBYTES);
    crypto_sign_keypair(id.public_key.data(), id.secret_key.data());
    return id;
}

// Deterministic key pair from an experiment seed; used by the simulated
// deployments so aggregator and clients agree without key distribution.
inline ClientIdentity derive_identity(int client_id, std::uint64_t seed) {
    ensure_sodium();
    std::array<std::uint8_t, crypto_sign_SEEDBYTES> key_seed{};
    std::uint64_t state = mix64(seed, static_cast<std::uint64_t>(client_id) + 0x1d);
    for (std::size_t i = 0; i < key_seed.size(); i += 8) {
        state = mix64(state);
        for (std::size_t b = 0; b < 8; ++b)
            key_seed[i + b] = static_cast<std::uint8_t>(state >> (8 * b));
    }
    ClientIdentity id;
    id.client_id = client_id;
    id.public_key.resize(crypto_sign_PUBLICKEYBYTES);
    id.secret_key.resize(crypto_sign_SECRETKEYBYTES);
    crypto_sign_seed_keypair(id.public_key.data(), id.secret_key.data(), key_seed.data());
    return id;
}

// Detached Ed25519 signature over the canonical update bytes.
inline Bytes sign_update(const ClientIdentity& identity, const Bytes& canonical_bytes) {
    ensure_sodium();
    if (identity.secret_key.size() != crypto_sign_SECRETKEYBYTES)
        throw IdentityError("sign_update: client " + std::to_string(identity.client_id) +
                            " has no private key");
    Bytes sig(crypto_sign_BYTES);
    crypto_sign_detached(sig.data(), nullptr, canonical_bytes.data(),
                         canonical_bytes.size(), identity.secret_key.data());
    return sig;
}

// ---------------------------------------------------------------------------
// Public-key registry, loaded read-only by the aggregator.

class Registry {
public:
    void add(int client_id, const Bytes& public_key) {
        if (public_key.size() != crypto_sign_PUBLICKEYBYTES)
            throw IdentityError("registry: bad public key length");
        if (keys_.count(client_id))
            throw IdentityError("registry: client " + std::to_string(client_id) +
                                " already registered");
        keys_.emplace(client_id, public_key);
    }

    const Bytes* find(int client_id) const {
        auto it = keys_.find(client_id);
        return it == keys_.end() ? nullptr : &it->second;
    }

    std::size_t size() const { return keys_.size(); }

    // JSON object: client id (as string) -> base64 public key.
    void save(const std::string& path) const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [id, key] : keys_)
            j[std::to_string(id)] = to_base64(key.data(), key.size());
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IdentityError("registry: cannot write " + path);
        out << j.dump(2) << '\n';
    }

    static Registry load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IdentityError("registry: cannot read " + path);
        nlohmann::json j;
        in >> j;
        Registry reg;
        for (const auto& [key, value] : j.items())
            reg.add(std::stoi(key), from_base64(value.get<std::string>()));
        return reg;
    }

private:
    std::map<int, Bytes> keys_;
};

struct VerifyResult {
    bool accepted = false;
    std::string reason;  // empty when accepted
};

inline VerifyResult verify_update(const Registry& registry, int client_id,
                                  const Bytes& signature, const Bytes& canonical_bytes) {
    ensure_sodium();
    const Bytes* key = registry.find(client_id);
    if (!key) return {false, "unknown-identity"};
    if (signature.size() != crypto_sign_BYTES) return {false, "bad-signature"};
    if (crypto_sign_verify_detached(signature.data(), canonical_bytes.data(),
                                    canonical_bytes.size(), key->data()) != 0)
        return {false, "bad-signature"};
    return {true, ""};
}

// ---------------------------------------------------------------------------
// Hash-chained append-only reward ledger (the blockchain incentive mock).

struct LedgerEntry {
    std::uint64_t index = 0;
    std::uint64_t round = 0;
    int client_id = 0;
    std::uint64_t reward = 0;
    Digest prev_hash{};
    Digest entry_hash{};

    bool operator==(const LedgerEntry&) const = default;
};

namespace detail {

inline void put_u64_be(Bytes& out, std::uint64_t v) {
    for (int shift = 56; shift >= 0; shift -= 8)
        out.push_back(static_cast<std::uint8_t>(v >> shift));
}

inline Digest ledger_entry_hash(const LedgerEntry& e) {
    Bytes buf;
    buf.reserve(64);
    put_u64_be(buf, e.index);
    put_u64_be(buf, e.round);
    put_u64_be(buf, static_cast<std::uint64_t>(e.client_id));
    put_u64_be(buf, e.reward);
    buf.insert(buf.end(), e.prev_hash.begin(), e.prev_hash.end());
    return sha256(buf.data(), buf.size());
}

} // namespace detail

// Returns the first broken index, or nullopt when the whole chain validates.
inline std::optional<std::size_t> validate_ledger(const std::vector<LedgerEntry>& entries) {
    Digest prev{};  // genesis convention: 32 zero bytes
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const LedgerEntry& e = entries[i];
        if (e.index != i) return i;
        if (e.prev_hash != prev) return i;
        if (detail::ledger_entry_hash(e) != e.entry_hash) return i;
        prev = e.entry_hash;
    }
    return std::nullopt;
}

class Ledger {
public:
    const LedgerEntry& credit(std::uint64_t round, int client_id, std::uint64_t reward) {
        LedgerEntry e;
        e.index = entries_.size();
        e.round = round;
        e.client_id = client_id;
        e.reward = reward;
        e.prev_hash = entries_.empty() ? Digest{} : entries_.back().entry_hash;
        e.entry_hash = detail::ledger_entry_hash(e);
        entries_.push_back(e);
        return entries_.back();
    }

    const std::vector<LedgerEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::optional<std::size_t> validate() const { return validate_ledger(entries_); }

    // JSON-lines, one entry per line.
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw LedgerError("ledger: cannot write " + path, 0);
        for (const LedgerEntry& e : entries_) {
            nlohmann::json j = {
                {"index", e.index},
                {"round", e.round},
                {"client_id", e.client_id},
                {"reward", e.reward},
                {"prev_hash", to_hex(e.prev_hash.data(), e.prev_hash.size())},
                {"entry_hash", to_hex(e.entry_hash.data(), e.entry_hash.size())}};
            out << j.dump() << '\n';
        }
    }

    // Throws LedgerError carrying the first broken index when the stored
    // chain does not validate.
    static Ledger load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw LedgerError("ledger: cannot read " + path, 0);
        Ledger ledger;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line);
            LedgerEntry e;
            e.index = j.at("index").get<std::uint64_t>();
            e.round = j.at("round").get<std::uint64_t>();
            e.client_id = j.at("client_id").get<int>();
            e.reward = j.at("reward").get<std::uint64_t>();
            const Bytes prev = from_hex(j.at("prev_hash").get<std::string>());
            const Bytes hash = from_hex(j.at("entry_hash").get<std::string>());
            if (prev.size() != 32 || hash.size() != 32)
                throw LedgerError("ledger: malformed digest", ledger.entries_.size());
            std::copy(prev.begin(), prev.end(), e.prev_hash.begin());
            std::copy(hash.begin(), hash.end(), e.entry_hash.begin());
            ledger.entries_.push_back(e);
        }
        if (auto broken = ledger.validate())
            throw LedgerError("ledger: chain broken at index " + std::to_string(*broken),
                              *broken);
        return ledger;
    }

private:
    static Bytes from_hex(const std::string& text) {
        Bytes out(text.size() / 2);
        std::size_t len = 0;
        if (sodium_hex2bin(out.data(), out.size(), text.data(), text.size(), nullptr,
                           &len, nullptr) != 0)
            throw LedgerError("ledger: invalid hex digest", 0);
        out.resize(len);
        return out;
    }

    std::vector<LedgerEntry> entries_;
};

// ---------------------------------------------------------------------------
// Key-pair files for the CLI: <dir>/client_<id>.pub and .key, base64.

inline void save_identity(const ClientIdentity& id, const std::string& dir) {
    const std::string stem = dir + "/client_" + std::to_string(id.client_id);
    std::ofstream pub(stem + ".pub", std::ios::binary);
    std::ofstream key(stem + ".key", std::ios::binary);
    if (!pub || !key) throw IdentityError("keygen: cannot write key files in " + dir);
    pub << to_base64(id.public_key.data(), id.public_key.size()) << '\n';
    key << to_base64(id.secret_key.data(), id.secret_key.size()) << '\n';
}

inline ClientIdentity load_identity(int client_id, const std::string& dir) {
    const std::string stem = dir + "/client_" + std::to_string(client_id);
    std::ifstream pub(stem + ".pub"), key(stem + ".key");
    if (!pub || !key)
        throw IdentityError("identity: missing key files for client " +
                            std::to_string(client_id) + " in " + dir);
    std::string pub64, key64;
    pub >> pub64;
    key >> key64;
    ClientIdentity id;
    id.client_id = client_id;
    id.public_key = from_base64(pub64);
    id.secret_key = from_base64(key64);
    if (id.public_key.size() != crypto_sign_PUBLICKEYBYTES ||
        id.secret_key.size() != crypto_sign_SECRETKEYBYTES)
        throw IdentityError("identity: malformed key files for client " +
                            std::to_string(client_id));
    return id;
}

} // namespace fedlora
