#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "fedlora/errors.hpp"
#include "fedlora/example.hpp"
#include "fedlora/matrix.hpp"

namespace fedlora {

// Synthetic classification task with three heterogeneity axes: token
// (dialect) skew, label skew, and sample-size imbalance.
struct TaskSpec {
    std::size_t vocab = 64;
    std::size_t classes = 8;
    std::size_t seq_len = 12;
    std::size_t clients = 3;
    std::vector<std::size_t> client_sizes = {274, 102, 335};
    double dialect_shift = 0.8;  // 0 = shared distribution, 1 = disjoint regions
    double label_skew = 0.7;     // 0 = uniform labels, 1 = one class per client
    std::uint64_t seed = 42;
};

struct ClientShard {
    int client_id = 0;
    std::vector<Example> train;
    std::vector<Example> test;
    std::size_t n_k = 0;  // == train.size()
};

namespace detail {

constexpr std::uint64_t kLabelSalt = 0x6c61626572756c65ULL;
constexpr double kLabelNoise = 0.05;
constexpr std::size_t kMaxRejects = 64;

// Client-invariant token-to-group hash.
inline std::size_t token_group(int token, std::size_t classes) {
    return static_cast<std::size_t>(mix64(kLabelSalt, static_cast<std::uint64_t>(token)) %
                                    classes);
}

// Majority group over the sequence; ties break to the lowest class index.
inline int rule_label(const std::vector<int>& tokens, std::size_t classes) {
    std::vector<int> counts(classes, 0);
    for (int t : tokens) counts[token_group(t, classes)]++;
    int best = 0;
    for (std::size_t c = 1; c < classes; ++c)
        if (counts[c] > counts[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    return best;
}

struct DialectRegion {
    std::size_t lo;
    std::size_t width;
};

inline DialectRegion client_region(const TaskSpec& task, std::size_t k) {
    const std::size_t lo = k * task.vocab / task.clients;
    const std::size_t hi = (k + 1) * task.vocab / task.clients;
    return {lo, hi - lo};
}

// Token distribution of client k: a (1 - shift) share of the full vocabulary
// mixed with a shift share concentrated on the client's own region.
inline int sample_token(const TaskSpec& task, const DialectRegion& region, Rng& rng) {
    if (rng.uniform() <= task.dialect_shift)
        return static_cast<int>(region.lo + rng.below(region.width));
    return static_cast<int>(rng.below(task.vocab));
}

inline Example sample_example(const TaskSpec& task, std::size_t k,
                              const DialectRegion& region, Rng& rng) {
    // Target label: label_skew mixes uniform with the client's dominant class.
    const int dominant = static_cast<int>(k % task.classes);
    const int target = rng.uniform() <= task.label_skew
                           ? dominant
                           : static_cast<int>(rng.below(task.classes));

    Example ex;
    ex.tokens.resize(task.seq_len);
    for (std::size_t attempt = 0; attempt < kMaxRejects; ++attempt) {
        for (std::size_t i = 0; i < task.seq_len; ++i)
            ex.tokens[i] = sample_token(task, region, rng);
        ex.label = rule_label(ex.tokens, task.classes);
        if (ex.label == target) break;
    }
    if (rng.uniform() <= kLabelNoise)
        ex.label = static_cast<int>(rng.below(task.classes));
    return ex;
}

} // namespace detail

inline void validate(const TaskSpec& task) {
    if (task.clients < 1) throw ConfigError("task: clients must be >= 1");
    if (task.client_sizes.size() != task.clients)
        throw ConfigError("task: client_sizes length must equal clients");
    for (std::size_t n : task.client_sizes)
        if (n < 1) throw ConfigError("task: all client sizes must be >= 1");
    if (task.dialect_shift < 0.0 || task.dialect_shift > 1.0 || task.label_skew < 0.0 ||
        task.label_skew > 1.0)
        throw ConfigError("task: dialect_shift and label_skew must lie in [0,1]");
    if (task.label_skew == 1.0 && task.classes < task.clients)
        throw ConfigError("task: label_skew=1 needs classes >= clients so every "
                          "client gets a distinct dominant class");
}

// Deterministic: identical TaskSpec gives bit-identical shards. Train and
// test come from separate seed streams, so the splits are disjoint by
// construction.
inline std::vector<ClientShard> generate(const TaskSpec& task) {
    validate(task);
    std::vector<ClientShard> shards;
    shards.reserve(task.clients);
    for (std::size_t k = 0; k < task.clients; ++k) {
        const detail::DialectRegion region = detail::client_region(task, k);
        ClientShard shard;
        shard.client_id = static_cast<int>(k);
        shard.n_k = task.client_sizes[k];

        Rng train_rng(mix64(mix64(task.seed, k), 0));
        shard.train.reserve(shard.n_k);
        for (std::size_t i = 0; i < shard.n_k; ++i)
            shard.train.push_back(detail::sample_example(task, k, region, train_rng));

        const std::size_t test_size =
            std::max<std::size_t>(8, (shard.n_k + 7) / 8);  // 12.5%, floor 8
        Rng test_rng(mix64(mix64(task.seed, k), 1));
        shard.test.reserve(test_size);
        for (std::size_t i = 0; i < test_size; ++i)
            shard.test.push_back(detail::sample_example(task, k, region, test_rng));

        shards.push_back(std::move(shard));
    }
    return shards;
}

// Union of all train splits, order shuffled by seed.
inline std::vector<Example> pooled(const std::vector<ClientShard>& shards,
                                   std::uint64_t seed) {
    if (shards.empty()) throw InputError("pooled: need at least one shard");
    std::vector<Example> all;
    for (const ClientShard& s : shards)
        all.insert(all.end(), s.train.begin(), s.train.end());
    Rng rng(mix64(seed, 0x706f6f6cULL));
    rng.shuffle(all);
    return all;
}

// One example per line: space-separated token ids, a tab, then the label.
inline void export_examples(const std::vector<Example>& examples,
                            const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("export: cannot open " + path);
    for (const Example& ex : examples) {
        for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
            if (i) out << ' ';
            out << ex.tokens[i];
        }
        out << '\t' << ex.label << '\n';
    }
}

} // namespace fedlora
