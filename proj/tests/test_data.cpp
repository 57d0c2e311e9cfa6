#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "fedlora/data.hpp"
#include "fedlora/pretrain.hpp"

using namespace fedlora;

namespace {

std::vector<double> token_histogram(const ClientShard& shard, std::size_t vocab) {
    std::vector<double> h(vocab, 0.0);
    double total = 0.0;
    for (const Example& ex : shard.train)
        for (int t : ex.tokens) {
            h[static_cast<std::size_t>(t)] += 1.0;
            total += 1.0;
        }
    for (double& x : h) x /= total;
    return h;
}

double tv_distance(const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
    return 0.5 * s;
}

// Two-sample chi-square statistic over token counts.
double chi_square_two_sample(const std::vector<double>& counts_a,
                             const std::vector<double>& counts_b) {
    double na = 0.0, nb = 0.0;
    for (double c : counts_a) na += c;
    for (double c : counts_b) nb += c;
    const double n = na + nb;
    double stat = 0.0;
    for (std::size_t i = 0; i < counts_a.size(); ++i) {
        const double col = counts_a[i] + counts_b[i];
        if (col == 0.0) continue;
        const double ea = col * na / n;
        const double eb = col * nb / n;
        stat += (counts_a[i] - ea) * (counts_a[i] - ea) / ea;
        stat += (counts_b[i] - eb) * (counts_b[i] - eb) / eb;
    }
    return stat;
}

// Wilson-Hilferty approximation of the chi-square quantile.
double chi_square_critical(double df, double z) {
    const double a = 2.0 / (9.0 * df);
    const double inner = 1.0 - a + z * std::sqrt(a);
    return df * inner * inner * inner;
}

std::vector<double> raw_token_counts(const ClientShard& shard, std::size_t vocab) {
    std::vector<double> h(vocab, 0.0);
    for (const Example& ex : shard.train)
        for (int t : ex.tokens) h[static_cast<std::size_t>(t)] += 1.0;
    return h;
}

std::vector<double> label_histogram(const std::vector<Example>& split,
                                    std::size_t classes) {
    std::vector<double> h(classes, 0.0);
    for (const Example& ex : split) h[static_cast<std::size_t>(ex.label)] += 1.0;
    for (double& x : h) x /= static_cast<double>(split.size());
    return h;
}

} // namespace

TEST_CASE("generation is deterministic in the task spec") {
    TaskSpec task;
    auto a = generate(task);
    auto b = generate(task);
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
        REQUIRE(a[k].train == b[k].train);
        REQUIRE(a[k].test == b[k].test);
        REQUIRE(a[k].n_k == a[k].train.size());
    }
}

TEST_CASE("IID degenerate case: token frequencies statistically indistinguishable") {
    TaskSpec task;
    task.dialect_shift = 0.0;
    task.label_skew = 0.0;
    task.client_sizes = {300, 300, 300};
    auto shards = generate(task);
    const double critical = chi_square_critical(static_cast<double>(task.vocab - 1),
                                                2.3263478740408408);  // alpha = 0.01
    for (std::size_t i = 0; i < shards.size(); ++i)
        for (std::size_t j = i + 1; j < shards.size(); ++j) {
            const double stat = chi_square_two_sample(raw_token_counts(shards[i], 64),
                                                      raw_token_counts(shards[j], 64));
            INFO("pair " << i << "," << j << " stat " << stat << " critical " << critical);
            REQUIRE(stat < critical);
        }
}

TEST_CASE("sample-size imbalance reproduces the 3.3x ratio") {
    TaskSpec task;
    auto shards = generate(task);
    std::size_t mn = shards[0].n_k, mx = shards[0].n_k;
    for (const auto& s : shards) {
        mn = std::min(mn, s.n_k);
        mx = std::max(mx, s.n_k);
    }
    REQUIRE(mx == 335);
    REQUIRE(mn == 102);
    REQUIRE(static_cast<double>(mx) / static_cast<double>(mn) ==
            Catch::Approx(3.28).margin(0.01));
}

TEST_CASE("full dialect shift gives near-disjoint token support") {
    TaskSpec task;
    task.dialect_shift = 1.0;
    auto shards = generate(task);
    std::set<int> support0, support2;
    for (const Example& ex : shards[0].train)
        support0.insert(ex.tokens.begin(), ex.tokens.end());
    for (const Example& ex : shards[2].train)
        support2.insert(ex.tokens.begin(), ex.tokens.end());
    std::size_t both = 0;
    for (int t : support0) both += support2.count(t);
    const double overlap = static_cast<double>(both) /
                           static_cast<double>(std::min(support0.size(), support2.size()));
    INFO("support overlap " << overlap);
    REQUIRE(overlap < 0.10);
}

TEST_CASE("label_skew=1 with too few classes is a config error") {
    TaskSpec task;
    task.classes = 2;
    task.clients = 3;
    task.label_skew = 1.0;
    task.client_sizes = {10, 10, 10};
    REQUIRE_THROWS_AS(generate(task), ConfigError);
}

TEST_CASE("test splits have the documented size") {
    TaskSpec task;
    task.client_sizes = {274, 102, 335};
    auto shards = generate(task);
    REQUIRE(shards[0].test.size() == 35);  // ceil(274/8)
    REQUIRE(shards[1].test.size() == 13);  // ceil(102/8)
    REQUIRE(shards[2].test.size() == 42);  // ceil(335/8)
    TaskSpec tiny = task;
    tiny.client_sizes = {10, 10, 10};
    auto small = generate(tiny);
    REQUIRE(small[0].test.size() == 8);  // floor of 8
}

TEST_CASE("pooled is the shuffled union of train splits") {
    TaskSpec task;
    auto shards = generate(task);
    auto pool = pooled(shards, task.seed);
    REQUIRE(pool.size() == 274 + 102 + 335);

    // single shard: same multiset, different order allowed
    std::vector<ClientShard> one = {shards[0]};
    auto single = pooled(one, task.seed);
    REQUIRE(single.size() == shards[0].train.size());
    auto sorted_examples = [](std::vector<Example> v) {
        std::sort(v.begin(), v.end(), [](const Example& a, const Example& b) {
            return std::tie(a.tokens, a.label) < std::tie(b.tokens, b.label);
        });
        return v;
    };
    REQUIRE(sorted_examples(single) == sorted_examples(shards[0].train));
    REQUIRE_THROWS_AS(pooled({}, 0), InputError);
}

TEST_CASE("re-partitioning the pool evens out label histograms") {
    TaskSpec task;  // defaults carry label_skew = 0.7
    auto shards = generate(task);
    auto pool = pooled(shards, task.seed);

    const std::size_t k = task.clients;
    std::vector<std::vector<Example>> repart(k);
    for (std::size_t i = 0; i < pool.size(); ++i) repart[i % k].push_back(pool[i]);

    std::vector<double> uniform(task.classes, 1.0 / static_cast<double>(task.classes));
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        before += tv_distance(label_histogram(shards[i].train, task.classes), uniform);
        after += tv_distance(label_histogram(repart[i], task.classes), uniform);
    }
    INFO("mean TV before " << before / 3.0 << " after " << after / 3.0);
    REQUIRE(after < before);
}

TEST_CASE("heterogeneity grows monotonically with dialect shift") {
    const double grid[5] = {0.0, 0.25, 0.5, 0.75, 1.0};
    double previous = -1.0;
    for (double shift : grid) {
        TaskSpec task;
        task.dialect_shift = shift;
        task.client_sizes = {250, 250, 250};
        auto shards = generate(task);
        double tv = 0.0;
        int pairs = 0;
        for (std::size_t i = 0; i < shards.size(); ++i)
            for (std::size_t j = i + 1; j < shards.size(); ++j) {
                tv += tv_distance(token_histogram(shards[i], task.vocab),
                                  token_histogram(shards[j], task.vocab));
                ++pairs;
            }
        tv /= pairs;
        INFO("shift " << shift << " mean TV " << tv);
        REQUIRE(tv >= previous);
        previous = tv;
    }
}

TEST_CASE("export writes one example per line") {
    TaskSpec task;
    task.client_sizes = {5, 5, 5};
    auto shards = generate(task);
    const std::string path = "/tmp/fedlora_export_test.txt";
    export_examples(shards[0].train, path);
    std::ifstream in(path);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        ++lines;
        REQUIRE(line.find('\t') != std::string::npos);
    }
    REQUIRE(lines == 5);
}

TEST_CASE("the pooled task is learnable well above chance") {
    TaskSpec task;  // default non-IID task
    ModelDims dims;
    BaseModel model = pretrain_base(dims, task, task.seed);
    auto shards = generate(task);
    std::vector<Example> val;
    for (const auto& s : shards) val.insert(val.end(), s.test.begin(), s.test.end());
    std::size_t hits = 0;
    const AdapterSet none;
    for (const Example& ex : val) {
        ForwardCache fc = forward(model, none, ex.tokens);
        int best = 0;
        for (std::size_t c = 1; c < fc.logits.size(); ++c)
            if (fc.logits[c] > fc.logits[static_cast<std::size_t>(best)])
                best = static_cast<int>(c);
        if (best == ex.label) ++hits;
    }
    const double acc = static_cast<double>(hits) / static_cast<double>(val.size());
    INFO("pooled-pretrained accuracy on the union of test splits: " << acc);
    REQUIRE(acc > 2.0 / static_cast<double>(task.classes));
}
