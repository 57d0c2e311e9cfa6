#include <catch2/catch_amalgamated.hpp>

#include <thread>

#include "fedlora/federation.hpp"
#include "fedlora/pretrain.hpp"

using namespace fedlora;

namespace {

// Small, fast configuration for protocol-level tests.
FedConfig tiny_config() {
    FedConfig cfg;
    cfg.dims = ModelDims{32, 8, 16, 4, 6};
    cfg.task.clients = 3;
    cfg.task.client_sizes = {24, 16, 20};
    cfg.task.dialect_shift = 0.5;
    cfg.task.label_skew = 0.5;
    cfg.rounds = 3;
    cfg.rank = 4;
    cfg.alpha = 16.0;
    cfg.accumulation = 4;
    cfg.lr = 3e-3;
    cfg.dropout = 0.1;
    cfg.seed = 2024;
    cfg.pretrain.steps = 40;
    cfg.pretrain.batch = 8;
    finalize(cfg);
    return cfg;
}

struct Setup {
    FedConfig cfg;
    BaseModel model;
    std::vector<ClientShard> shards;
};

Setup make_setup(FedConfig cfg) {
    Setup s{cfg, pretrain_base(cfg.dims, cfg.task, cfg.seed, cfg.pretrain),
            generate(cfg.task)};
    return s;
}

Matrix update_delta(const Bytes& frame, const FedConfig& cfg, Target t) {
    Message msg = decode(frame);
    ClientUpdate u;
    u.client_id = msg.sender_id;
    u.round = msg.round;
    u.n_k = msg.extra.at("n_k").get<std::uint64_t>();
    u.adapters = unpack_adapters(msg.manifest, msg.tensor_payload, cfg.rank, cfg.alpha,
                                 cfg.scaling_mode);
    return reconstruct_delta(u, t);
}

} // namespace

TEST_CASE("singleton session: the global equals the client's upload") {
    FedConfig cfg = tiny_config();
    cfg.task.clients = 1;
    cfg.task.client_sizes = {24};
    cfg.rounds = 1;
    finalize(cfg);
    Setup s = make_setup(cfg);

    SimulationResult r = simulate(cfg, s.model, s.shards);
    REQUIRE_FALSE(r.aggregator.abort_reason.has_value());
    REQUIRE(r.aggregator.per_round.size() == 1);
    REQUIRE(r.client_errors.empty());

    const Bytes& frame = r.aggregator.update_frames[0].at(0);
    for (Target t : kAllTargets) {
        Matrix uploaded = update_delta(frame, cfg, t);
        const AdapterPair& p = r.aggregator.per_round[0].adapters.pairs.at(t);
        Matrix global = r.aggregator.per_round[0].adapters.scale(p) * matmul(p.b, p.a);
        REQUIRE(max_abs_diff(global, uploaded) < 1e-10);
    }
}

TEST_CASE("local_epochs=0 echoes the broadcast adapters byte for byte") {
    FedConfig cfg = tiny_config();
    cfg.task.clients = 1;
    cfg.task.client_sizes = {24};
    cfg.rounds = 1;
    cfg.local_epochs = 0;
    finalize(cfg);
    Setup s = make_setup(cfg);

    SimulationResult r = simulate(cfg, s.model, s.shards);
    REQUIRE_FALSE(r.aggregator.abort_reason.has_value());

    AdapterSet broadcast = quantize_adapters(global_init_adapters(cfg));
    Message msg = decode(r.aggregator.update_frames[0].at(0));
    AdapterSet echoed = unpack_adapters(msg.manifest, msg.tensor_payload, cfg.rank,
                                        cfg.alpha, cfg.scaling_mode);
    for (Target t : kAllTargets) {
        REQUIRE(echoed.pairs.at(t).a == broadcast.pairs.at(t).a);
        REQUIRE(echoed.pairs.at(t).b == broadcast.pairs.at(t).b);
    }
    // upload headers echo the round and sample count
    REQUIRE(msg.round == 1);
    REQUIRE(msg.extra.at("n_k").get<std::uint64_t>() == 24);
}

TEST_CASE("healthy three-round run: counts, credits and phases") {
    FedConfig cfg = tiny_config();
    Setup s = make_setup(cfg);

    SimulationResult r = simulate(cfg, s.model, s.shards);
    REQUIRE_FALSE(r.aggregator.abort_reason.has_value());
    REQUIRE(r.client_errors.empty());
    REQUIRE(r.aggregator.per_round.size() == 3);
    REQUIRE(r.aggregator.round_log.size() == 3);
    REQUIRE(r.aggregator.updates_accepted == 9);
    REQUIRE(r.aggregator.ledger.size() == 9);  // conservation of credits
    REQUIRE_FALSE(r.aggregator.ledger.validate().has_value());
    for (const auto& frames : r.aggregator.update_frames) REQUIRE(frames.size() == 3);
    REQUIRE(r.client_finals.size() == 3);

    for (const auto& phases : r.aggregator.phase_log) {
        REQUIRE(phases.size() == 4);
        for (std::size_t i = 0; i + 1 < phases.size(); ++i)
            REQUIRE(static_cast<int>(phases[i]) < static_cast<int>(phases[i + 1]));
    }
    for (const RoundRecord& rec : r.aggregator.round_log) {
        REQUIRE(rec.stragglers.empty());
        REQUIRE(rec.rejected.empty());
        REQUIRE(rec.locals.size() == 3);
    }
}

TEST_CASE("identical seeds give bit-identical runs") {
    FedConfig cfg = tiny_config();
    Setup s = make_setup(cfg);
    SimulationResult a = simulate(cfg, s.model, s.shards);
    SimulationResult b = simulate(cfg, s.model, s.shards);
    REQUIRE(a.aggregator.update_frames == b.aggregator.update_frames);
    REQUIRE(serialize_round_records(a.aggregator.round_log) ==
            serialize_round_records(b.aggregator.round_log));

    FedConfig other = cfg;
    other.seed = cfg.seed + 1;
    finalize(other);
    Setup s2 = make_setup(other);
    SimulationResult c = simulate(other, s2.model, s2.shards);
    REQUIRE(a.aggregator.update_frames != c.aggregator.update_frames);
}

TEST_CASE("a silent client is excluded for its round and rejoins after") {
    FedConfig cfg = tiny_config();
    cfg.timeout_ms = 500;
    finalize(cfg);
    Setup s = make_setup(cfg);

    std::map<int, ClientBehavior> behaviors;
    behaviors[1].skip_update_rounds = {2};
    SimulationResult r = simulate(cfg, s.model, s.shards, behaviors);

    REQUIRE_FALSE(r.aggregator.abort_reason.has_value());
    REQUIRE(r.aggregator.per_round.size() == 3);
    REQUIRE(r.aggregator.round_log[0].stragglers.empty());
    REQUIRE(r.aggregator.round_log[1].stragglers == std::vector<int>{1});
    REQUIRE(r.aggregator.round_log[1].locals.size() == 2);
    REQUIRE(r.aggregator.round_log[2].stragglers.empty());
    REQUIRE(r.aggregator.updates_accepted == 8);
    REQUIRE(r.aggregator.ledger.size() == 8);

    std::size_t credits_round2 = 0;
    for (const LedgerEntry& e : r.aggregator.ledger.entries())
        if (e.round == 2) {
            ++credits_round2;
            REQUIRE(e.client_id != 1);
        }
    REQUIRE(credits_round2 == 2);
}

TEST_CASE("a forged signature never enters aggregation") {
    FedConfig cfg = tiny_config();
    cfg.timeout_ms = 1500;
    finalize(cfg);
    Setup s = make_setup(cfg);

    std::map<int, ClientBehavior> behaviors;
    behaviors[2].forge_signature = true;
    SimulationResult r = simulate(cfg, s.model, s.shards, behaviors);

    REQUIRE_FALSE(r.aggregator.abort_reason.has_value());
    REQUIRE(r.aggregator.updates_accepted == 6);  // 3 rounds x 2 honest clients
    for (const RoundRecord& rec : r.aggregator.round_log) {
        REQUIRE(rec.locals.size() == 2);
        bool logged = false;
        for (const auto& [id, reason] : rec.rejected)
            if (id == 2 && reason == "bad-signature") logged = true;
        REQUIRE(logged);
    }
    for (const LedgerEntry& e : r.aggregator.ledger.entries())
        REQUIRE(e.client_id != 2);
    for (const auto& frames : r.aggregator.update_frames)
        REQUIRE_FALSE(frames.count(2));
}

TEST_CASE("all clients silent aborts the experiment with partial logs") {
    FedConfig cfg = tiny_config();
    cfg.timeout_ms = 300;
    finalize(cfg);
    Setup s = make_setup(cfg);

    std::map<int, ClientBehavior> behaviors;
    for (int k = 0; k < 3; ++k) behaviors[k].skip_update_rounds = {1};
    SimulationResult r = simulate(cfg, s.model, s.shards, behaviors);

    REQUIRE(r.aggregator.abort_reason.has_value());
    REQUIRE(r.aggregator.abort_reason->find("zero verified updates") != std::string::npos);
    REQUIRE(r.aggregator.per_round.empty());
    REQUIRE(r.aggregator.ledger.size() == 0);
}

TEST_CASE("client raises on a round mismatch from the server") {
    FedConfig cfg = tiny_config();
    cfg.task.clients = 1;
    cfg.task.client_sizes = {24};
    finalize(cfg);
    Setup s = make_setup(cfg);

    InProcessHub hub({0});
    auto server = hub.aggregator_channel();
    auto identities = experiment_identities(cfg);

    std::string error;
    std::thread client([&] {
        auto chan = hub.client_channel(0);
        try {
            run_client(cfg, s.model, 0, s.shards[0], *chan, identities.at(0));
        } catch (const ProtocolError& e) {
            error = e.what();
        } catch (const std::exception& e) {
            error = std::string("wrong type: ") + e.what();
        }
    });

    // swallow REGISTER, ack it, then broadcast a wrong-round start
    auto hello = server->recv_any(Clock::now() + std::chrono::seconds(5));
    REQUIRE(hello.has_value());
    server->send_to(0, encode(detail::make_plain(MessageKind::register_ack, 0, -1)));
    Message bad = detail::make_round_start(cfg, 7, global_init_adapters(cfg));
    server->send_to(0, encode(bad));
    client.join();
    REQUIRE(error.find("expected round 1") != std::string::npos);
}

TEST_CASE("in-process and socket transports produce identical federations") {
    FedConfig cfg = tiny_config();
    cfg.rounds = 2;
    finalize(cfg);
    Setup s = make_setup(cfg);

    cfg.transport = TransportKind::in_process;
    SimulationResult mem = simulate(cfg, s.model, s.shards);

    cfg.transport = TransportKind::socket;
    cfg.listen_port = 0;  // ephemeral
    SimulationResult net = simulate(cfg, s.model, s.shards);

    REQUIRE_FALSE(mem.aggregator.abort_reason.has_value());
    REQUIRE_FALSE(net.aggregator.abort_reason.has_value());
    REQUIRE(net.client_errors.empty());
    REQUIRE(mem.aggregator.update_frames == net.aggregator.update_frames);
    REQUIRE(serialize_round_records(mem.aggregator.round_log) ==
            serialize_round_records(net.aggregator.round_log));
}
