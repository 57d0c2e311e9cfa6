// fedlora: federated LoRA fine-tuning at desk scale.
//
// Subcommands cover the full experiment runner (run), the in-process
// simulation (simulate), the standalone socket roles (aggregate, client),
// evaluation of saved adapters (eval), the update-divergence diagnostic
// (pca), and key management (keygen).

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "fedlora/experiment.hpp"

namespace fs = std::filesystem;
using namespace fedlora;

namespace {

void print_round_summary(const std::vector<RoundRecord>& records) {
    for (const RoundRecord& rec : records) {
        std::cout << "round " << rec.round << ": global macro "
                  << detail::pct(rec.global.macro_acc) << "% min "
                  << detail::pct(rec.global.min_acc) << "% h-mean "
                  << detail::pct(rec.global.h_mean) << "%";
        if (rec.round1_dip) std::cout << "  [round-1 dip]";
        if (!rec.stragglers.empty()) {
            std::cout << "  stragglers:";
            for (int id : rec.stragglers) std::cout << ' ' << id;
        }
        for (const auto& [id, reason] : rec.rejected)
            std::cout << "  rejected client " << id << " (" << reason << ")";
        std::cout << '\n';
    }
}

int cmd_run(const std::string& config_path, const std::string& out_dir,
            std::vector<std::string> variants) {
    ExperimentPlan plan;
    plan.config = load_config(config_path);
    plan.out_dir = out_dir;
    if (!variants.empty()) plan.variants = std::move(variants);

    ExperimentOutput out = run_experiment(plan);
    std::cout << render_comparison_text(out.table);
    if (!out.round_log.empty()) {
        std::cout << '\n';
        print_round_summary(out.round_log);
    }
    if (out.federation_abort)
        std::cerr << "federated variant aborted: " << *out.federation_abort << '\n';
    if (!out_dir.empty())
        std::cout << "\nwrote " << out.artifacts.size() << " artifacts to " << out_dir
                  << " (see manifest.json)\n";
    return out.all_completed ? 0 : 1;
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir) {
    FedConfig cfg = load_config(config_path);
    cfg.transport = TransportKind::in_process;  // simulate always runs in-process

    const std::vector<ClientShard> shards = generate(cfg.task);
    const BaseModel model = pretrain_base(cfg.dims, cfg.task, cfg.seed, cfg.pretrain);
    SimulationResult sim = simulate(cfg, model, shards);

    print_round_summary(sim.aggregator.round_log);
    for (const auto& [id, err] : sim.client_errors)
        std::cerr << "client " << id << " failed: " << err << '\n';
    if (sim.aggregator.abort_reason) {
        std::cerr << "aborted: " << *sim.aggregator.abort_reason << '\n';
        return 1;
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream log(fs::path(out_dir) / "round_log.jsonl", std::ios::binary);
        log << serialize_round_records(sim.aggregator.round_log);
        sim.aggregator.ledger.save((fs::path(out_dir) / "ledger.jsonl").string());
        for (std::size_t r = 0; r < sim.aggregator.update_frames.size(); ++r) {
            const fs::path round_dir =
                fs::path(out_dir) / ("round_" + std::to_string(r + 1));
            fs::create_directories(round_dir);
            for (const auto& [id, frame] : sim.aggregator.update_frames[r])
                save_bytes((round_dir / ("update_c" + std::to_string(id) + ".msg"))
                               .string(),
                           frame);
        }
        save_adapters((fs::path(out_dir) / "global_adapters.bin").string(),
                      sim.aggregator.final_global);
        std::cout << "wrote simulation outputs to " << out_dir << '\n';
    }
    return 0;
}

int cmd_aggregate(const std::string& config_path, const std::string& out_dir) {
    FedConfig cfg = load_config(config_path);
    const std::vector<ClientShard> shards = generate(cfg.task);
    const BaseModel model = pretrain_base(cfg.dims, cfg.task, cfg.seed, cfg.pretrain);
    const auto identities = experiment_identities(cfg);
    const Registry registry = experiment_registry(cfg, identities);

    TcpAggregatorChannel chan(cfg.listen_host, cfg.listen_port);
    std::cout << "aggregator listening on " << cfg.listen_host << ':' << chan.port()
              << " for " << cfg.task.clients << " clients\n";
    FederationResult result = run_aggregator(cfg, chan, registry, model, shards);

    print_round_summary(result.round_log);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream log(fs::path(out_dir) / "round_log.jsonl", std::ios::binary);
        log << serialize_round_records(result.round_log);
        result.ledger.save((fs::path(out_dir) / "ledger.jsonl").string());
        if (!result.per_round.empty())
            save_adapters((fs::path(out_dir) / "global_adapters.bin").string(),
                          result.final_global);
    }
    if (result.abort_reason) {
        std::cerr << "aborted: " << *result.abort_reason << '\n';
        return 1;
    }
    return 0;
}

int cmd_client(const std::string& config_path, int client_id,
               const std::string& adapters_out) {
    FedConfig cfg = load_config(config_path);
    if (client_id < 0 || static_cast<std::size_t>(client_id) >= cfg.task.clients) {
        std::cerr << "client-id must lie in [0, " << cfg.task.clients << ")\n";
        return 2;
    }
    const std::vector<ClientShard> shards = generate(cfg.task);
    const BaseModel model = pretrain_base(cfg.dims, cfg.task, cfg.seed, cfg.pretrain);
    const auto identities = experiment_identities(cfg);

    TcpClientChannel chan(cfg.listen_host, cfg.listen_port,
                          std::max<std::int64_t>(cfg.timeout_ms, 5000));
    AdapterSet final = run_client(cfg, model, client_id,
                                  shards[static_cast<std::size_t>(client_id)], chan,
                                  identities.at(client_id));
    std::cout << "client " << client_id << " finished after " << cfg.rounds
              << " rounds\n";
    if (!adapters_out.empty()) {
        save_adapters(adapters_out, final);
        std::cout << "saved final adapters to " << adapters_out << '\n';
    }
    return 0;
}

int cmd_eval(const std::string& config_path, const std::vector<std::string>& adapter_files,
             const std::string& out_dir) {
    FedConfig cfg = load_config(config_path);
    const std::vector<ClientShard> shards = generate(cfg.task);
    const BaseModel model = pretrain_base(cfg.dims, cfg.task, cfg.seed, cfg.pretrain);
    std::map<int, std::vector<Example>> test_sets;
    for (const ClientShard& s : shards) test_sets[s.client_id] = s.test;

    std::vector<EvalReport> reports;
    reports.push_back(evaluate_model("baseline", model, AdapterSet{}, test_sets));
    for (const std::string& file : adapter_files) {
        AdapterSet adapters = load_adapters(file);
        reports.push_back(evaluate_model(fs::path(file).stem().string(), model,
                                         adapters, test_sets));
    }
    ComparisonTable table = compare(reports);
    std::cout << render_comparison_text(table);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream csv(fs::path(out_dir) / "comparison.csv", std::ios::binary);
        csv << render_comparison_csv(table);
        std::cout << "wrote " << (fs::path(out_dir) / "comparison.csv").string() << '\n';
    }
    return 0;
}

int cmd_pca(const std::string& updates_dir, std::string out_dir) {
    if (out_dir.empty()) out_dir = updates_dir;
    std::vector<ClientUpdate> updates;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(updates_dir))
        if (entry.path().extension() == ".msg") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& file : files) {
        Message msg = decode(load_bytes(file.string()));
        if (msg.kind != MessageKind::update) continue;
        ClientUpdate u;
        u.client_id = msg.sender_id;
        u.round = msg.round;
        u.n_k = msg.extra.at("n_k").get<std::uint64_t>();
        u.adapters = unpack_adapters(
            msg.manifest, msg.tensor_payload, msg.extra.at("rank").get<std::size_t>(),
            msg.extra.at("alpha").get<double>(),
            scaling_mode_from_name(msg.extra.at("scaling_mode").get<std::string>()));
        updates.push_back(std::move(u));
    }
    if (updates.size() < 2) {
        std::cerr << "need at least 2 update files in " << updates_dir << '\n';
        return 2;
    }
    PcaProjection proj = pca_updates(updates);

    fs::create_directories(out_dir);
    std::ofstream pts(fs::path(out_dir) / "pca_points.csv", std::ios::binary);
    pts << render_pca_points_csv(proj);
    std::ofstream var(fs::path(out_dir) / "pca_variance.csv", std::ios::binary);
    var << render_pca_variance_csv(proj);
    std::cout << "wrote pca_points.csv and pca_variance.csv to " << out_dir << '\n';
    for (const auto& [id, pt] : proj.points)
        std::cout << "client " << id << ": (" << pt.first << ", " << pt.second << ")\n";
    return 0;
}

int cmd_keygen(int client_id, const std::string& out_dir,
               const std::string& registry_path) {
    fs::create_directories(out_dir);
    ClientIdentity id = generate_identity(client_id);
    save_identity(id, out_dir);
    std::cout << "wrote client_" << client_id << ".pub / .key to " << out_dir << '\n';
    if (!registry_path.empty()) {
        Registry reg;
        if (fs::exists(registry_path)) reg = Registry::load(registry_path);
        reg.add(client_id, id.public_key);
        reg.save(registry_path);
        std::cout << "registered client " << client_id << " in " << registry_path
                  << '\n';
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"federated LoRA fine-tuning with adapter aggregation"};
    app.require_subcommand(1);

    std::string config_path, out_dir, updates_dir, adapters_out, registry_path;
    std::vector<std::string> variants, adapter_files;
    int client_id = 0;

    auto* run = app.add_subcommand("run", "run the full experiment and report bundle");
    run->add_option("--config", config_path, "config file")->required();
    run->add_option("--out", out_dir, "output directory")->required();
    run->add_option("--variants", variants,
                    "subset of baseline,single_client,federated");

    auto* sim = app.add_subcommand("simulate", "federated training, all roles in-process");
    sim->add_option("--config", config_path, "config file")->required();
    sim->add_option("--out", out_dir, "optional output directory");

    auto* agg = app.add_subcommand("aggregate", "run the aggregator over TCP");
    agg->add_option("--config", config_path, "config file")->required();
    agg->add_option("--out", out_dir, "optional output directory");

    auto* cli = app.add_subcommand("client", "run one client over TCP");
    cli->add_option("--config", config_path, "config file")->required();
    cli->add_option("--client-id", client_id, "client index")->required();
    cli->add_option("--adapters-out", adapters_out, "save final adapters here");

    auto* ev = app.add_subcommand("eval", "evaluate saved adapter files");
    ev->add_option("--config", config_path, "config file")->required();
    ev->add_option("--adapters", adapter_files, "adapter files")->expected(-1);
    ev->add_option("--out", out_dir, "optional output directory");

    auto* pca = app.add_subcommand("pca", "PCA over a round directory of updates");
    pca->add_option("--updates", updates_dir, "directory of update_c*.msg files")
        ->required();
    pca->add_option("--out", out_dir, "output directory (default: updates dir)");

    auto* keygen = app.add_subcommand("keygen", "generate an Ed25519 key pair");
    keygen->add_option("--client-id", client_id, "client index")->required();
    keygen->add_option("--out", out_dir, "key output directory")->required();
    keygen->add_option("--registry", registry_path, "merge the public key here");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config_path, out_dir, variants);
        if (sim->parsed()) return cmd_simulate(config_path, out_dir);
        if (agg->parsed()) return cmd_aggregate(config_path, out_dir);
        if (cli->parsed()) return cmd_client(config_path, client_id, adapters_out);
        if (ev->parsed()) return cmd_eval(config_path, adapter_files, out_dir);
        if (pca->parsed()) return cmd_pca(updates_dir, out_dir);
        if (keygen->parsed()) return cmd_keygen(client_id, out_dir, registry_path);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
