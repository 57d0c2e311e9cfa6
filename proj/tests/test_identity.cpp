#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "fedlora/identity.hpp"

using namespace fedlora;

namespace {

Bytes payload(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Bytes out(n);
    for (auto& b : out) b = static_cast<std::uint8_t>(rng.below(256));
    return out;
}

} // namespace

TEST_CASE("sign then verify round trip") {
    ClientIdentity alice = derive_identity(0, 7);
    Registry reg;
    reg.add(0, alice.public_key);

    Bytes bytes = payload(300, 1);
    Bytes sig = sign_update(alice, bytes);
    VerifyResult ok = verify_update(reg, 0, sig, bytes);
    REQUIRE(ok.accepted);
    REQUIRE(ok.reason.empty());
}

TEST_CASE("any flipped payload byte is rejected") {
    ClientIdentity alice = derive_identity(0, 7);
    Registry reg;
    reg.add(0, alice.public_key);

    Bytes bytes = payload(64, 2);
    Bytes sig = sign_update(alice, bytes);
    for (std::size_t i = 0; i < bytes.size(); i += 7) {
        Bytes tampered = bytes;
        tampered[i] ^= 0x01;
        REQUIRE_FALSE(verify_update(reg, 0, sig, tampered).accepted);
    }
}

TEST_CASE("a different client's key does not verify") {
    ClientIdentity alice = derive_identity(0, 7);
    ClientIdentity bob = derive_identity(1, 7);
    Registry reg;
    reg.add(0, alice.public_key);
    reg.add(1, bob.public_key);

    Bytes bytes = payload(128, 3);
    Bytes sig = sign_update(alice, bytes);
    REQUIRE(verify_update(reg, 0, sig, bytes).accepted);
    VerifyResult wrong = verify_update(reg, 1, sig, bytes);
    REQUIRE_FALSE(wrong.accepted);
    REQUIRE(wrong.reason == "bad-signature");
}

TEST_CASE("unregistered client id is rejected with a reason") {
    Registry reg;
    ClientIdentity alice = derive_identity(0, 7);
    Bytes bytes = payload(32, 4);
    Bytes sig = sign_update(alice, bytes);
    VerifyResult r = verify_update(reg, 0, sig, bytes);
    REQUIRE_FALSE(r.accepted);
    REQUIRE(r.reason == "unknown-identity");
}

TEST_CASE("signing without a private key fails") {
    ClientIdentity verifier_side;
    verifier_side.client_id = 3;
    verifier_side.public_key = derive_identity(3, 7).public_key;
    REQUIRE_THROWS_AS(sign_update(verifier_side, payload(8, 5)), IdentityError);
}

TEST_CASE("derived identities are deterministic, generated ones are not") {
    ClientIdentity a = derive_identity(4, 99);
    ClientIdentity b = derive_identity(4, 99);
    REQUIRE(a.public_key == b.public_key);
    REQUIRE(a.secret_key == b.secret_key);
    ClientIdentity c = derive_identity(4, 100);
    REQUIRE(a.public_key != c.public_key);
    REQUIRE(generate_identity(4).public_key != generate_identity(4).public_key);
}

TEST_CASE("registry rejects duplicates and survives save/load") {
    Registry reg;
    for (int k = 0; k < 3; ++k) reg.add(k, derive_identity(k, 11).public_key);
    REQUIRE_THROWS_AS(reg.add(1, derive_identity(1, 11).public_key), IdentityError);

    const std::string path = "/tmp/fedlora_registry_test.json";
    reg.save(path);
    Registry loaded = Registry::load(path);
    REQUIRE(loaded.size() == 3);
    for (int k = 0; k < 3; ++k)
        REQUIRE(*loaded.find(k) == derive_identity(k, 11).public_key);
    REQUIRE(loaded.find(9) == nullptr);
}

TEST_CASE("first ledger credit uses the genesis convention") {
    Ledger ledger;
    const LedgerEntry& e = ledger.credit(1, 0, 10);
    REQUIRE(e.index == 0);
    REQUIRE(e.prev_hash == Digest{});
    REQUIRE_FALSE(ledger.validate().has_value());
}

TEST_CASE("R rounds times K clients leave exactly RK entries") {
    Ledger ledger;
    for (std::uint64_t round = 1; round <= 3; ++round)
        for (int client = 0; client < 3; ++client) ledger.credit(round, client, 10);
    REQUIRE(ledger.size() == 9);
    REQUIRE_FALSE(ledger.validate().has_value());
}

TEST_CASE("any mutated entry breaks validation at its index") {
    Ledger ledger;
    for (std::uint64_t round = 1; round <= 2; ++round)
        for (int client = 0; client < 3; ++client) ledger.credit(round, client, 5);

    for (std::size_t victim = 0; victim < ledger.size(); ++victim) {
        std::vector<LedgerEntry> copy = ledger.entries();
        copy[victim].reward += 1;
        auto broken = validate_ledger(copy);
        REQUIRE(broken.has_value());
        REQUIRE(*broken == victim);
    }
}

TEST_CASE("ledger files round trip and corrupted files fail to load") {
    Ledger ledger;
    for (int client = 0; client < 4; ++client) ledger.credit(1, client, 7);
    const std::string path = "/tmp/fedlora_ledger_test.jsonl";
    ledger.save(path);

    Ledger loaded = Ledger::load(path);
    REQUIRE(loaded.entries() == ledger.entries());

    // single-byte mutation in the stored reward of entry 2
    std::ifstream in(path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    in.close();
    const std::string needle = "\"reward\":7";
    std::size_t pos = 0;
    for (int hit = 0; hit < 3; ++hit) pos = text.find(needle, pos) + 1;
    text.replace(pos - 1 + needle.size() - 1, 1, "8");
    std::ofstream out(path, std::ios::binary);
    out << text;
    out.close();

    try {
        Ledger::load(path);
        FAIL("corrupted ledger loaded");
    } catch (const LedgerError& e) {
        REQUIRE(e.index() == 2);
    }
}

TEST_CASE("key files round trip through a directory") {
    const std::string dir = "/tmp/fedlora_keys_test";
    std::filesystem::create_directories(dir);
    ClientIdentity id = derive_identity(6, 123);
    save_identity(id, dir);
    ClientIdentity back = load_identity(6, dir);
    REQUIRE(back.public_key == id.public_key);
    REQUIRE(back.secret_key == id.secret_key);
    REQUIRE_THROWS_AS(load_identity(7, dir), IdentityError);
}
