#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedlora/config.hpp"
#include "fedlora/federation.hpp"
#include "fedlora/metrics.hpp"
#include "fedlora/pretrain.hpp"

namespace fedlora {

// Which model variants an experiment runs. "single_client" expands to one
// variant per client, evaluated across every client's test set.
struct ExperimentPlan {
    std::vector<std::string> variants = {"baseline", "single_client", "federated"};
    std::string out_dir;
    FedConfig config;
};

struct ExperimentOutput {
    ComparisonTable table;
    std::vector<RoundRecord> round_log;
    std::optional<PcaProjection> pca;  // over round-1 client updates
    std::optional<std::string> federation_abort;
    bool all_completed = true;
    // relative path -> sha256, as recorded in manifest.json
    std::map<std::string, std::string> artifacts;
};

namespace detail {

inline void write_artifact(ExperimentOutput& out, const std::string& out_dir,
                           const std::string& rel_path, const std::string& content) {
    namespace fs = std::filesystem;
    const fs::path full = fs::path(out_dir) / rel_path;
    fs::create_directories(full.parent_path());
    std::ofstream f(full, std::ios::binary);
    if (!f) throw InputError("cannot write " + full.string());
    f << content;
    f.close();
    const Digest d = sha256(reinterpret_cast<const std::uint8_t*>(content.data()),
                            content.size());
    out.artifacts[rel_path] = to_hex(d.data(), d.size());
}

inline void write_artifact(ExperimentOutput& out, const std::string& out_dir,
                           const std::string& rel_path, const Bytes& content) {
    write_artifact(out, out_dir, rel_path,
                   std::string(content.begin(), content.end()));
}

} // namespace detail

// Runs the requested variants and writes the full report bundle plus a
// manifest of content digests. Deterministic given the config seeds.
inline ExperimentOutput run_experiment(const ExperimentPlan& plan) {
    if (plan.variants.empty()) throw ConfigError("experiment: no variants requested");
    FedConfig cfg = plan.config;
    finalize(cfg);

    const std::vector<ClientShard> shards = generate(cfg.task);
    const BaseModel model = pretrain_base(cfg.dims, cfg.task, cfg.seed, cfg.pretrain);
    std::map<int, std::vector<Example>> test_sets;
    for (const ClientShard& s : shards) test_sets[s.client_id] = s.test;

    ExperimentOutput out;
    std::vector<EvalReport> reports;
    std::map<std::string, AdapterSet> variant_adapters;

    bool want_baseline = false, want_single = false, want_federated = false;
    for (const std::string& v : plan.variants) {
        if (v == "baseline") want_baseline = true;
        else if (v == "single_client") want_single = true;
        else if (v == "federated") want_federated = true;
        else throw ConfigError("experiment: unknown variant '" + v + "'");
    }

    if (want_baseline)
        reports.push_back(evaluate_model("baseline", model, AdapterSet{}, test_sets));

    if (want_single) {
        for (const ClientShard& shard : shards) {
            AdapterSet adapters = quantize_adapters(global_init_adapters(cfg));
            OptimizerState opt;
            opt.hp.lr = cfg.lr;
            opt.hp.beta1 = cfg.beta1;
            opt.hp.beta2 = cfg.beta2;
            opt.hp.weight_decay = cfg.weight_decay;
            opt.hp.total_steps =
                std::max<std::size_t>(1, client_total_steps(cfg, shard.n_k));
            for (std::uint64_t round = 1; round <= cfg.rounds; ++round)
                train_local_round(cfg, model, adapters, shard, opt, round);
            const std::string label =
                "single_client_" + std::to_string(shard.client_id);
            reports.push_back(evaluate_model(label, model, adapters, test_sets));
            variant_adapters[label] = quantize_adapters(adapters);
        }
    }

    SimulationResult fed;
    if (want_federated) {
        fed = simulate(cfg, model, shards);
        out.round_log = fed.aggregator.round_log;
        if (fed.aggregator.abort_reason) {
            out.federation_abort = fed.aggregator.abort_reason;
            out.all_completed = false;
        } else {
            reports.push_back(evaluate_model("federated", model,
                                             fed.aggregator.final_global, test_sets));
            variant_adapters["federated"] = fed.aggregator.final_global;
            if (!fed.aggregator.update_frames.empty() &&
                fed.aggregator.update_frames.front().size() >= 2) {
                std::vector<ClientUpdate> round1;
                for (const auto& [id, frame] : fed.aggregator.update_frames.front()) {
                    Message msg = decode(frame);
                    ClientUpdate u;
                    u.client_id = msg.sender_id;
                    u.round = msg.round;
                    u.n_k = msg.extra.at("n_k").get<std::uint64_t>();
                    u.adapters = unpack_adapters(msg.manifest, msg.tensor_payload,
                                                 cfg.rank, cfg.alpha, cfg.scaling_mode);
                    round1.push_back(std::move(u));
                }
                out.pca = pca_updates(round1);
            }
        }
    }

    out.table = compare(reports);

    if (!plan.out_dir.empty()) {
        detail::write_artifact(out, plan.out_dir, "comparison.csv",
                               render_comparison_csv(out.table));
        detail::write_artifact(out, plan.out_dir, "comparison.txt",
                               render_comparison_text(out.table));
        detail::write_artifact(out, plan.out_dir, "config.toml",
                               render_config_text(cfg));
        for (const auto& [label, adapters] : variant_adapters)
            detail::write_artifact(out, plan.out_dir, "adapters/" + label + ".bin",
                                   adapters_to_bytes(adapters));
        if (want_federated) {
            detail::write_artifact(out, plan.out_dir, "round_log.jsonl",
                                   serialize_round_records(out.round_log));
            std::ostringstream ledger_text;
            for (const LedgerEntry& e : fed.aggregator.ledger.entries()) {
                nlohmann::json j = {
                    {"index", e.index},
                    {"round", e.round},
                    {"client_id", e.client_id},
                    {"reward", e.reward},
                    {"prev_hash", to_hex(e.prev_hash.data(), e.prev_hash.size())},
                    {"entry_hash", to_hex(e.entry_hash.data(), e.entry_hash.size())}};
                ledger_text << j.dump() << '\n';
            }
            detail::write_artifact(out, plan.out_dir, "ledger.jsonl", ledger_text.str());
            for (std::size_t r = 0; r < fed.aggregator.update_frames.size(); ++r)
                for (const auto& [id, frame] : fed.aggregator.update_frames[r])
                    detail::write_artifact(out, plan.out_dir,
                                           "updates/round_" + std::to_string(r + 1) +
                                               "/update_c" + std::to_string(id) + ".msg",
                                           frame);
            if (out.pca) {
                detail::write_artifact(out, plan.out_dir, "pca_points.csv",
                                       render_pca_points_csv(*out.pca));
                detail::write_artifact(out, plan.out_dir, "pca_variance.csv",
                                       render_pca_variance_csv(*out.pca));
            }
        }
        nlohmann::json manifest;
        manifest["artifacts"] = nlohmann::json::array();
        for (const auto& [path, digest] : out.artifacts)
            manifest["artifacts"].push_back({{"path", path}, {"sha256", digest}});
        namespace fs = std::filesystem;
        std::ofstream mf(fs::path(plan.out_dir) / "manifest.json", std::ios::binary);
        mf << manifest.dump(2) << '\n';
    }
    return out;
}

} // namespace fedlora
