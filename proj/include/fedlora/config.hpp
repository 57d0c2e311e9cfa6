#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedlora/aggregation.hpp"
#include "fedlora/data.hpp"
#include "fedlora/errors.hpp"
#include "fedlora/model.hpp"
#include "fedlora/pretrain.hpp"

namespace fedlora {

enum class TransportKind { in_process, socket };

inline const char* transport_kind_name(TransportKind t) {
    return t == TransportKind::in_process ? "in_process" : "socket";
}

inline TransportKind transport_kind_from_name(const std::string& s) {
    if (s == "in_process") return TransportKind::in_process;
    if (s == "socket") return TransportKind::socket;
    throw ConfigError("unknown transport: " + s);
}

// Full experiment configuration. Defaults mirror the published setup where it
// is meaningful at toy scale (r=8, alpha=32, dropout 0.1, three rounds, one
// local epoch, accumulation 4); the learning rate is raised for the toy task.
struct FedConfig {
    // federation
    std::size_t rounds = 3;
    std::size_t local_epochs = 1;
    std::size_t rank = 8;
    double alpha = 32.0;
    ScalingMode scaling_mode = ScalingMode::alpha_over_r;
    WeightingMode weighting = WeightingMode::sample_weighted;
    AggregationMethod aggregation_method = AggregationMethod::svd_refactor;
    double dropout = 0.1;
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    std::size_t accumulation = 4;
    std::int64_t timeout_ms = 60000;
    std::uint64_t seed = 42;

    ModelDims dims;    // vocab 64, d 16, h 32, classes 8, seq_len 12
    TaskSpec task;     // vocab/classes/seq_len/seed synced from above
    PretrainOptions pretrain;

    // identity / incentives
    std::uint64_t reward = 10;
    std::string registry_path;  // empty: derive key pairs from the seed
    std::string key_dir;

    // transport
    TransportKind transport = TransportKind::in_process;
    std::string listen_host = "127.0.0.1";
    std::uint16_t listen_port = 7710;
};

// Copies the shared dimensions into the task spec and validates the result.
inline void finalize(FedConfig& cfg) {
    cfg.task.vocab = cfg.dims.vocab;
    cfg.task.classes = cfg.dims.classes;
    cfg.task.seq_len = cfg.dims.seq_len;
    cfg.task.seed = cfg.seed;
    if (cfg.rounds < 1) throw ConfigError("config: rounds must be >= 1");
    if (cfg.accumulation < 1) throw ConfigError("config: accumulation must be >= 1");
    if (cfg.timeout_ms <= 0) throw ConfigError("config: timeout must be positive");
    if (cfg.rank < 1 || cfg.rank > std::min(cfg.dims.d, cfg.dims.h))
        throw ConfigError("config: rank out of range for the model dims");
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
        throw ConfigError("config: dropout must lie in [0,1)");
    validate(cfg.task);
}

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

inline std::string unquote(const std::string& s) {
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"')
        return s.substr(1, s.size() - 2);
    return s;
}

inline std::vector<std::size_t> parse_size_list(const std::string& raw) {
    std::string body = trim(raw);
    if (body.size() < 2 || body.front() != '[' || body.back() != ']')
        throw ConfigError("config: expected [a, b, ...] list, got " + raw);
    body = body.substr(1, body.size() - 2);
    std::vector<std::size_t> out;
    std::istringstream in(body);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(static_cast<std::size_t>(std::stoull(item)));
    }
    return out;
}

} // namespace detail

// TOML-style "key = value" text; section headers and # comments are skipped.
inline FedConfig parse_config_text(const std::string& text) {
    FedConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty() || line.front() == '[') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        try {
            if (key == "rounds") cfg.rounds = std::stoull(value);
            else if (key == "local_epochs") cfg.local_epochs = std::stoull(value);
            else if (key == "rank") cfg.rank = std::stoull(value);
            else if (key == "alpha") cfg.alpha = std::stod(value);
            else if (key == "scaling_mode")
                cfg.scaling_mode = scaling_mode_from_name(detail::unquote(value));
            else if (key == "weighting")
                cfg.weighting = weighting_mode_from_name(detail::unquote(value));
            else if (key == "aggregation_method") {
                const std::string name = detail::unquote(value);
                if (name == "svd_refactor")
                    cfg.aggregation_method = AggregationMethod::svd_refactor;
                else if (name == "factor_average")
                    cfg.aggregation_method = AggregationMethod::factor_average;
                else throw ConfigError("unknown aggregation_method: " + name);
            }
            else if (key == "dropout") cfg.dropout = std::stod(value);
            else if (key == "lr") cfg.lr = std::stod(value);
            else if (key == "beta1") cfg.beta1 = std::stod(value);
            else if (key == "beta2") cfg.beta2 = std::stod(value);
            else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
            else if (key == "accumulation") cfg.accumulation = std::stoull(value);
            else if (key == "timeout_ms") cfg.timeout_ms = std::stoll(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "vocab") cfg.dims.vocab = std::stoull(value);
            else if (key == "dim") cfg.dims.d = std::stoull(value);
            else if (key == "hidden") cfg.dims.h = std::stoull(value);
            else if (key == "classes") cfg.dims.classes = std::stoull(value);
            else if (key == "seq_len") cfg.dims.seq_len = std::stoull(value);
            else if (key == "clients") cfg.task.clients = std::stoull(value);
            else if (key == "client_sizes")
                cfg.task.client_sizes = detail::parse_size_list(value);
            else if (key == "dialect_shift") cfg.task.dialect_shift = std::stod(value);
            else if (key == "label_skew") cfg.task.label_skew = std::stod(value);
            else if (key == "pretrain_steps") cfg.pretrain.steps = std::stoull(value);
            else if (key == "pretrain_batch") cfg.pretrain.batch = std::stoull(value);
            else if (key == "pretrain_lr") cfg.pretrain.lr = std::stod(value);
            else if (key == "reward") cfg.reward = std::stoull(value);
            else if (key == "registry_path") cfg.registry_path = detail::unquote(value);
            else if (key == "key_dir") cfg.key_dir = detail::unquote(value);
            else if (key == "transport")
                cfg.transport = transport_kind_from_name(detail::unquote(value));
            else if (key == "listen_addr") {
                const std::string addr = detail::unquote(value);
                const auto colon = addr.rfind(':');
                if (colon == std::string::npos)
                    throw ConfigError("listen_addr must be host:port");
                cfg.listen_host = addr.substr(0, colon);
                cfg.listen_port =
                    static_cast<std::uint16_t>(std::stoul(addr.substr(colon + 1)));
            }
            else throw ConfigError("config: unknown key '" + key + "'");
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError("config line " + std::to_string(line_no) + " (" + key +
                              "): " + e.what());
        }
    }
    return cfg;
}

// Loads a config file; FEDLORA_SEED in the environment overrides the seed.
inline FedConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot read " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    FedConfig cfg = parse_config_text(buf.str());
    if (const char* env = std::getenv("FEDLORA_SEED"))
        cfg.seed = std::stoull(env);
    if (cfg.local_epochs < 1)
        throw ConfigError("config: local_epochs must be >= 1");
    finalize(cfg);
    return cfg;
}

// Total AdamW step budget for one client under the linear-decay schedule.
inline std::size_t client_total_steps(const FedConfig& cfg, std::size_t n_k) {
    const std::size_t per_epoch = (n_k + cfg.accumulation - 1) / cfg.accumulation;
    return cfg.rounds * cfg.local_epochs * per_epoch;
}

inline std::string render_config_text(const FedConfig& cfg) {
    std::ostringstream out;
    out << "# federation\n";
    out << "rounds = " << cfg.rounds << "\n";
    out << "local_epochs = " << cfg.local_epochs << "\n";
    out << "rank = " << cfg.rank << "\n";
    out << "alpha = " << cfg.alpha << "\n";
    out << "scaling_mode = \"" << scaling_mode_name(cfg.scaling_mode) << "\"\n";
    out << "weighting = \"" << weighting_mode_name(cfg.weighting) << "\"\n";
    out << "aggregation_method = \""
        << (cfg.aggregation_method == AggregationMethod::svd_refactor ? "svd_refactor"
                                                                      : "factor_average")
        << "\"\n";
    out << "dropout = " << cfg.dropout << "\n";
    out << "lr = " << cfg.lr << "\n";
    out << "beta1 = " << cfg.beta1 << "\n";
    out << "beta2 = " << cfg.beta2 << "\n";
    out << "weight_decay = " << cfg.weight_decay << "\n";
    out << "accumulation = " << cfg.accumulation << "\n";
    out << "timeout_ms = " << cfg.timeout_ms << "\n";
    out << "seed = " << cfg.seed << "\n\n";
    out << "# model dims\n";
    out << "vocab = " << cfg.dims.vocab << "\n";
    out << "dim = " << cfg.dims.d << "\n";
    out << "hidden = " << cfg.dims.h << "\n";
    out << "classes = " << cfg.dims.classes << "\n";
    out << "seq_len = " << cfg.dims.seq_len << "\n\n";
    out << "# task\n";
    out << "clients = " << cfg.task.clients << "\n";
    out << "client_sizes = [";
    for (std::size_t i = 0; i < cfg.task.client_sizes.size(); ++i)
        out << (i ? ", " : "") << cfg.task.client_sizes[i];
    out << "]\n";
    out << "dialect_shift = " << cfg.task.dialect_shift << "\n";
    out << "label_skew = " << cfg.task.label_skew << "\n\n";
    out << "# pretraining\n";
    out << "pretrain_steps = " << cfg.pretrain.steps << "\n";
    out << "pretrain_batch = " << cfg.pretrain.batch << "\n";
    out << "pretrain_lr = " << cfg.pretrain.lr << "\n\n";
    out << "# identity and incentives\n";
    out << "reward = " << cfg.reward << "\n";
    out << "registry_path = \"" << cfg.registry_path << "\"\n";
    out << "key_dir = \"" << cfg.key_dir << "\"\n\n";
    out << "# transport\n";
    out << "transport = \"" << transport_kind_name(cfg.transport) << "\"\n";
    out << "listen_addr = \"" << cfg.listen_host << ":" << cfg.listen_port << "\"\n";
    return out.str();
}

} // namespace fedlora
