#pragma once

#include <atomic>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "fedlora/aggregation.hpp"
#include "fedlora/config.hpp"
#include "fedlora/data.hpp"
#include "fedlora/identity.hpp"
#include "fedlora/metrics.hpp"
#include "fedlora/model.hpp"
#include "fedlora/protocol.hpp"
#include "fedlora/transport.hpp"

namespace fedlora {

// Scripted faults for tests: silent rounds and forged signatures.
struct ClientBehavior {
    std::set<std::uint64_t> skip_update_rounds;
    bool forge_signature = false;
};

enum class RoundPhase { broadcasting, collecting, aggregating, done };

inline const char* round_phase_name(RoundPhase p) {
    switch (p) {
    case RoundPhase::broadcasting: return "broadcasting";
    case RoundPhase::collecting: return "collecting";
    case RoundPhase::aggregating: return "aggregating";
    case RoundPhase::done: return "done";
    }
    return "?";
}

struct FederationResult {
    std::vector<GlobalAdapterState> per_round;
    AdapterSet final_global;  // wire-quantized aggregate of the last round
    std::vector<RoundRecord> round_log;
    Ledger ledger;
    // raw UPDATE wire frames per round, for the PCA diagnostic
    std::vector<std::map<int, Bytes>> update_frames;
    std::vector<std::vector<RoundPhase>> phase_log;
    std::vector<int> never_registered;
    std::size_t updates_accepted = 0;
    std::optional<std::string> abort_reason;
};

// ---------------------------------------------------------------------------
// Local training: one round of `local_epochs` epochs, batch size 1 with
// gradient accumulation. Optimizer moments reset at round boundaries; the
// step counter (and with it the linear decay schedule) spans the whole run.

inline void train_local_round(const FedConfig& cfg, const BaseModel& model,
                              AdapterSet& adapters, const ClientShard& shard,
                              OptimizerState& opt, std::uint64_t round) {
    opt.m.clear();
    opt.v.clear();
    const std::size_t n = shard.train.size();
    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng shuffle_rng(mix64(mix64(cfg.seed, shard.client_id),
                              mix64(round, epoch + 0x10)));
        shuffle_rng.shuffle(order);

        std::size_t i = 0;
        while (i < n) {
            const std::size_t group = std::min(cfg.accumulation, n - i);
            Gradients summed;
            for (std::size_t g = 0; g < group; ++g) {
                DropoutSpec dropout{cfg.dropout,
                                    mix64(mix64(cfg.seed, shard.client_id),
                                          mix64(round * 1000 + epoch, i + g))};
                if (cfg.dropout <= 0.0) dropout.seed.reset();
                LossGrads lg = loss_and_grads(model, adapters,
                                              {shard.train[order[i + g]]}, dropout);
                if (summed.adapters.empty()) {
                    summed = std::move(lg.grads);
                } else {
                    for (auto& [t, gp] : lg.grads.adapters) {
                        summed.adapters.at(t).a += gp.a;
                        summed.adapters.at(t).b += gp.b;
                    }
                }
            }
            train_step(adapters, summed, opt, group);
            i += group;
        }
    }
}

// Adapter initialization broadcast at round 1: seeded A, zero B.
inline AdapterSet global_init_adapters(const FedConfig& cfg) {
    return init_adapters(cfg.dims, cfg.rank, cfg.alpha, cfg.scaling_mode,
                         mix64(cfg.seed, 0x676c6f62ULL));
}

inline std::map<int, ClientIdentity> experiment_identities(const FedConfig& cfg) {
    std::map<int, ClientIdentity> ids;
    for (std::size_t k = 0; k < cfg.task.clients; ++k) {
        const int id = static_cast<int>(k);
        ids[id] = cfg.key_dir.empty() ? derive_identity(id, cfg.seed)
                                      : load_identity(id, cfg.key_dir);
    }
    return ids;
}

inline Registry experiment_registry(const FedConfig& cfg,
                                    const std::map<int, ClientIdentity>& identities) {
    if (!cfg.registry_path.empty()) return Registry::load(cfg.registry_path);
    Registry reg;
    for (const auto& [id, identity] : identities) reg.add(id, identity.public_key);
    return reg;
}

// ---------------------------------------------------------------------------
// Aggregator: registration, then T rounds of broadcast / collect / verify /
// aggregate / record, then shutdown. Stragglers are excluded per round with
// weight renormalization; rejected signatures are logged and excluded.

namespace detail {

inline Message make_round_start(const FedConfig& cfg, std::uint64_t round,
                                const AdapterSet& adapters) {
    Message msg;
    msg.kind = MessageKind::round_start;
    msg.round = round;
    msg.sender_id = -1;
    msg.extra["scaling_mode"] = scaling_mode_name(cfg.scaling_mode);
    msg.extra["alpha"] = cfg.alpha;
    msg.extra["rank"] = cfg.rank;
    auto [manifest, block] = pack_adapters(adapters);
    msg.manifest = std::move(manifest);
    msg.tensor_payload = std::move(block);
    return msg;
}

inline Message make_plain(MessageKind kind, std::uint64_t round, int sender) {
    Message msg;
    msg.kind = kind;
    msg.round = round;
    msg.sender_id = sender;
    return msg;
}

inline bool adapters_conform(const AdapterSet& set, const FedConfig& cfg) {
    if (set.pairs.size() != kAllTargets.size()) return false;
    for (const auto& [t, p] : set.pairs) {
        auto [d_in, d_out] = target_dims(t, cfg.dims);
        if (p.a.rows() != cfg.rank || p.a.cols() != d_in) return false;
        if (p.b.rows() != d_out || p.b.cols() != cfg.rank) return false;
    }
    return true;
}

} // namespace detail

inline FederationResult run_aggregator(const FedConfig& cfg, AggregatorChannel& chan,
                                       const Registry& registry, const BaseModel& model,
                                       const std::vector<ClientShard>& shards) {
    FederationResult result;
    std::map<int, std::vector<Example>> test_sets;
    for (const ClientShard& s : shards) test_sets[s.client_id] = s.test;

    std::set<int> expected;
    for (std::size_t k = 0; k < cfg.task.clients; ++k)
        expected.insert(static_cast<int>(k));

    // Registration phase.
    std::set<int> registered;
    const auto reg_deadline = Clock::now() + std::chrono::milliseconds(cfg.timeout_ms);
    while (registered.size() < expected.size() && Clock::now() < reg_deadline) {
        auto item = chan.recv_any(reg_deadline);
        if (!item) break;
        try {
            Message msg = decode(item->second);
            if (msg.kind == MessageKind::register_ && expected.count(msg.sender_id) &&
                msg.sender_id == item->first && !registered.count(msg.sender_id)) {
                registered.insert(msg.sender_id);
                chan.send_to(msg.sender_id,
                             encode(detail::make_plain(MessageKind::register_ack, 0, -1)));
            }
        } catch (const Error&) {
            // malformed hello: ignore
        }
    }
    for (int id : expected)
        if (!registered.count(id)) result.never_registered.push_back(id);
    if (registered.empty()) {
        result.abort_reason = "no clients registered before the deadline";
        return result;
    }

    AdapterSet global = global_init_adapters(cfg);

    for (std::uint64_t round = 1; round <= cfg.rounds; ++round) {
        std::vector<RoundPhase> phases;
        phases.push_back(RoundPhase::broadcasting);

        Message start = detail::make_round_start(cfg, round, global);
        const Bytes start_wire = encode(start);
        std::set<int> reachable;
        for (int id : registered) {
            try {
                chan.send_to(id, start_wire);
                reachable.insert(id);
            } catch (const ConnectionError&) {
                // dropped connection: excluded this round like a straggler
            }
        }

        phases.push_back(RoundPhase::collecting);
        const auto deadline = Clock::now() + std::chrono::milliseconds(cfg.timeout_ms);
        std::map<int, ClientUpdate> received;
        std::map<int, Bytes> received_frames;
        std::vector<std::pair<int, std::string>> rejected;
        std::set<int> responded;

        auto reject = [&](int id, const std::string& reason) {
            rejected.emplace_back(id, reason);
            responded.insert(id);
            Message err = detail::make_plain(MessageKind::error, round, -1);
            err.extra["reason"] = reason;
            try {
                chan.send_to(id, encode(err));
            } catch (const ConnectionError&) {
            }
        };

        while (responded.size() < reachable.size() && Clock::now() < deadline) {
            auto item = chan.recv_any(deadline);
            if (!item) break;
            const int tag = item->first;
            Message msg;
            try {
                msg = decode(item->second);
            } catch (const Error& e) {
                reject(tag, std::string("malformed: ") + e.what());
                continue;
            }
            if (msg.kind == MessageKind::register_) continue;  // late hello
            if (msg.kind != MessageKind::update) continue;
            if (msg.round < round) continue;  // stale duplicate from a slow client
            if (responded.count(tag)) continue;
            if (msg.sender_id != tag) {
                reject(tag, "sender-mismatch");
                continue;
            }
            if (msg.round > round) {
                reject(tag, "round-mismatch");
                continue;
            }
            std::uint64_t n_k = 0;
            Bytes signature;
            try {
                n_k = msg.extra.at("n_k").get<std::uint64_t>();
                signature = from_base64(msg.extra.at("signature").get<std::string>());
            } catch (const std::exception&) {
                reject(tag, "malformed: header");
                continue;
            }
            const Bytes canonical =
                canonical_update_bytes(round, msg.sender_id, n_k, msg.tensor_payload);
            const VerifyResult vr = verify_update(registry, msg.sender_id, signature,
                                                  canonical);
            if (!vr.accepted) {
                reject(tag, vr.reason);
                continue;
            }
            ClientUpdate update;
            update.client_id = msg.sender_id;
            update.round = round;
            update.n_k = n_k;
            update.signature = signature;
            try {
                update.adapters = unpack_adapters(msg.manifest, msg.tensor_payload,
                                                  cfg.rank, cfg.alpha, cfg.scaling_mode);
            } catch (const Error&) {
                reject(tag, "malformed: tensors");
                continue;
            }
            if (!detail::adapters_conform(update.adapters, cfg)) {
                reject(tag, "shape-mismatch");
                continue;
            }
            responded.insert(tag);
            received_frames[tag] = item->second;
            received.emplace(tag, std::move(update));
            try {
                chan.send_to(tag, encode(detail::make_plain(MessageKind::update_ack,
                                                            round, -1)));
            } catch (const ConnectionError&) {
            }
        }

        std::vector<int> stragglers;
        for (int id : registered)
            if (!responded.count(id)) stragglers.push_back(id);

        phases.push_back(RoundPhase::aggregating);
        if (received.empty()) {
            phases.push_back(RoundPhase::done);
            result.phase_log.push_back(phases);
            result.abort_reason =
                "round " + std::to_string(round) + ": zero verified updates";
            break;
        }

        std::vector<ClientUpdate> updates;
        for (const auto& [id, u] : received) updates.push_back(u);
        GlobalAdapterState state =
            aggregate(updates, cfg.weighting, cfg.rank, cfg.aggregation_method);

        for (const auto& [id, u] : received) {
            result.ledger.credit(round, id, cfg.reward);
            ++result.updates_accepted;
        }

        // Evaluate exactly what the clients will hold: the wire-quantized set.
        AdapterSet global_q = quantize_adapters(state.adapters);
        EvalReport global_report = evaluate_model(
            "global_r" + std::to_string(round), model, global_q, test_sets);
        std::vector<EvalReport> locals;
        for (const auto& [id, u] : received)
            locals.push_back(evaluate_model("client" + std::to_string(id) + "_r" +
                                                std::to_string(round),
                                            model, u.adapters, test_sets));
        result.round_log.push_back(make_round_record(round, std::move(global_report),
                                                     std::move(locals),
                                                     state.residual_norms, stragglers,
                                                     rejected));
        result.update_frames.push_back(std::move(received_frames));
        result.per_round.push_back(std::move(state));
        global = result.per_round.back().adapters;

        Message complete = detail::make_plain(MessageKind::round_complete, round, -1);
        complete.extra["accepted"] = [&] {
            std::vector<int> ids;
            for (const auto& [id, u] : received) ids.push_back(id);
            return ids;
        }();
        const Bytes complete_wire = encode(complete);
        for (int id : registered) {
            try {
                chan.send_to(id, complete_wire);
            } catch (const ConnectionError&) {
            }
        }
        phases.push_back(RoundPhase::done);
        result.phase_log.push_back(phases);
    }

    const Bytes shutdown_wire =
        encode(detail::make_plain(MessageKind::shutdown, cfg.rounds, -1));
    for (int id : registered) {
        try {
            chan.send_to(id, shutdown_wire);
        } catch (const ConnectionError&) {
        }
    }
    if (!result.per_round.empty())
        result.final_global = quantize_adapters(result.per_round.back().adapters);
    return result;
}

// ---------------------------------------------------------------------------
// Client session: register, then per round adopt the broadcast adapters,
// train locally, sign and upload. Deterministic given the config seed.

inline AdapterSet run_client(const FedConfig& cfg, const BaseModel& model,
                             int client_id, const ClientShard& shard,
                             ClientChannel& chan, const ClientIdentity& identity,
                             const ClientBehavior& behavior = {}) {
    if (shard.client_id != client_id)
        throw InputError("run_client: shard does not belong to client " +
                         std::to_string(client_id));
    if (identity.secret_key.empty())
        throw IdentityError("run_client: missing signing key for client " +
                            std::to_string(client_id));

    const auto wait = std::chrono::milliseconds(cfg.timeout_ms * 4);
    chan.send(encode(detail::make_plain(MessageKind::register_, 0, client_id)));

    AdapterSet adapters;
    OptimizerState opt;
    opt.hp.lr = cfg.lr;
    opt.hp.beta1 = cfg.beta1;
    opt.hp.beta2 = cfg.beta2;
    opt.hp.weight_decay = cfg.weight_decay;
    opt.hp.total_steps = std::max<std::size_t>(1, client_total_steps(cfg, shard.n_k));

    std::uint64_t expected_round = 1;
    while (true) {
        auto frame = chan.recv(Clock::now() + wait);
        if (!frame)
            throw ConnectionError("client " + std::to_string(client_id) +
                                  ": aggregator silent");
        Message msg = decode(*frame);
        switch (msg.kind) {
        case MessageKind::shutdown:
            return adapters;
        case MessageKind::register_ack:
        case MessageKind::update_ack:
        case MessageKind::round_complete:
        case MessageKind::error:
            continue;
        case MessageKind::round_start:
            break;
        default:
            continue;
        }

        if (msg.round != expected_round)
            throw ProtocolError("client " + std::to_string(client_id) + ": expected round " +
                                std::to_string(expected_round) + ", server sent " +
                                std::to_string(msg.round));
        adapters = unpack_adapters(msg.manifest, msg.tensor_payload, cfg.rank, cfg.alpha,
                                   cfg.scaling_mode);
        if (cfg.local_epochs > 0)
            train_local_round(cfg, model, adapters, shard, opt, msg.round);

        if (!behavior.skip_update_rounds.count(msg.round)) {
            auto [manifest, block] = pack_adapters(adapters);
            const Bytes canonical = canonical_update_bytes(
                msg.round, client_id, shard.n_k, block);
            const Bytes signature =
                behavior.forge_signature
                    ? sign_update(derive_identity(client_id, mix64(cfg.seed, 0xbad)),
                                  canonical)
                    : sign_update(identity, canonical);

            Message update;
            update.kind = MessageKind::update;
            update.round = msg.round;
            update.sender_id = client_id;
            update.extra["n_k"] = shard.n_k;
            update.extra["signature"] = to_base64(signature.data(), signature.size());
            // self-describing so update files can be decoded on their own
            update.extra["rank"] = cfg.rank;
            update.extra["alpha"] = cfg.alpha;
            update.extra["scaling_mode"] = scaling_mode_name(cfg.scaling_mode);
            update.manifest = std::move(manifest);
            update.tensor_payload = std::move(block);
            chan.send(encode(update));
            // after upload the local copy is the quantized set the server saw
            adapters = quantize_adapters(adapters);
        }
        ++expected_round;
    }
}

// ---------------------------------------------------------------------------
// In-process simulation: all roles in one process, over either transport.

struct SimulationResult {
    FederationResult aggregator;
    std::map<int, AdapterSet> client_finals;
    std::map<int, std::string> client_errors;
};

inline SimulationResult simulate(const FedConfig& cfg, const BaseModel& model,
                                 const std::vector<ClientShard>& shards,
                                 const std::map<int, ClientBehavior>& behaviors = {}) {
    const std::map<int, ClientIdentity> identities = experiment_identities(cfg);
    const Registry registry = experiment_registry(cfg, identities);

    SimulationResult result;
    std::mutex result_mu;
    std::vector<int> ids;
    for (const ClientShard& s : shards) ids.push_back(s.client_id);

    auto client_main = [&](int id, ClientChannel& chan) {
        ClientBehavior behavior;
        if (auto it = behaviors.find(id); it != behaviors.end()) behavior = it->second;
        try {
            AdapterSet final =
                run_client(cfg, model, id, shards[static_cast<std::size_t>(id)], chan,
                           identities.at(id), behavior);
            std::lock_guard lock(result_mu);
            result.client_finals[id] = std::move(final);
        } catch (const std::exception& e) {
            std::lock_guard lock(result_mu);
            result.client_errors[id] = e.what();
        }
    };

    if (cfg.transport == TransportKind::in_process) {
        InProcessHub hub(ids);
        auto agg_chan = hub.aggregator_channel();
        std::vector<std::thread> threads;
        for (int id : ids)
            threads.emplace_back([&, id] {
                auto chan = hub.client_channel(id);
                client_main(id, *chan);
            });
        result.aggregator = run_aggregator(cfg, *agg_chan, registry, model, shards);
        for (auto& t : threads) t.join();
    } else {
        TcpAggregatorChannel server(cfg.listen_host, cfg.listen_port);
        const std::uint16_t port = server.port();
        std::vector<std::thread> threads;
        for (int id : ids)
            threads.emplace_back([&, id, port] {
                try {
                    TcpClientChannel chan(cfg.listen_host, port);
                    client_main(id, chan);
                } catch (const std::exception& e) {
                    std::lock_guard lock(result_mu);
                    result.client_errors[id] = e.what();
                }
            });
        result.aggregator = run_aggregator(cfg, server, registry, model, shards);
        for (auto& t : threads) t.join();
    }
    return result;
}

} // namespace fedlora
