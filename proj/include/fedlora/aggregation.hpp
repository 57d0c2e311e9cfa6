#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <vector>

#include "fedlora/errors.hpp"
#include "fedlora/matrix.hpp"
#include "fedlora/model.hpp"
#include "fedlora/svd.hpp"

namespace fedlora {

// One client's signed per-round contribution.
struct ClientUpdate {
    int client_id = 0;
    std::uint64_t round = 0;
    std::size_t n_k = 0;
    AdapterSet adapters;
    std::vector<std::uint8_t> signature;
};

// The aggregated, re-factorized adapter set broadcast after a round.
struct GlobalAdapterState {
    std::uint64_t round = 0;
    AdapterSet adapters;
    std::map<Target, double> residual_norms;  // Frobenius norm of truncation residual
};

enum class WeightingMode { sample_weighted, uniform };

inline const char* weighting_mode_name(WeightingMode m) {
    return m == WeightingMode::sample_weighted ? "sample_weighted" : "uniform";
}

inline WeightingMode weighting_mode_from_name(const std::string& s) {
    if (s == "sample_weighted") return WeightingMode::sample_weighted;
    if (s == "uniform") return WeightingMode::uniform;
    throw ConfigError("unknown weighting mode: " + s);
}

// Averaging reconstructed products then re-factorizing is the default;
// factor_average (averaging the A and B factors directly) exists for the
// mean(B)mean(A) != mean(BA) ablation.
enum class AggregationMethod { svd_refactor, factor_average };

// s * B_k * A_k: the dense update a client's adapter pair encodes.
inline Matrix reconstruct_delta(const ClientUpdate& update, Target target) {
    auto it = update.adapters.pairs.find(target);
    if (it == update.adapters.pairs.end())
        throw ShapeError(std::string("reconstruct_delta: update from client ") +
                         std::to_string(update.client_id) + " lacks target " +
                         target_name(target));
    const AdapterPair& p = it->second;
    return update.adapters.scale(p) * matmul(p.b, p.a);
}

// Weights over the responding subset only, renormalized to sum to 1.
// Input pairs are (client_id, n_k).
inline std::map<int, double> renormalize_weights(
    const std::vector<std::pair<int, std::size_t>>& responding, WeightingMode mode) {
    if (responding.empty())
        throw AggregationError("renormalize_weights: no responding clients");
    std::map<int, double> weights;
    if (mode == WeightingMode::uniform) {
        const double w = 1.0 / static_cast<double>(responding.size());
        for (const auto& [id, n] : responding) weights[id] = w;
        return weights;
    }
    double total = 0.0;
    for (const auto& [id, n] : responding) total += static_cast<double>(n);
    for (const auto& [id, n] : responding)
        weights[id] = static_cast<double>(n) / total;
    return weights;
}

namespace detail {

inline void check_consistent(const std::vector<const ClientUpdate*>& updates) {
    const ClientUpdate& first = *updates.front();
    for (const ClientUpdate* u : updates) {
        if (u->round != first.round)
            throw ProtocolError("aggregate: updates from mixed rounds " +
                                std::to_string(u->round) + " vs " +
                                std::to_string(first.round));
        if (u->n_k < 1) throw AggregationError("aggregate: n_k must be >= 1");
        if (u->adapters.scaling_mode != first.adapters.scaling_mode)
            throw ShapeError("aggregate: mixed scaling modes");
        if (u->adapters.pairs.size() != first.adapters.pairs.size())
            throw ShapeError("aggregate: differing target sets");
        for (const auto& [t, p] : first.adapters.pairs) {
            auto it = u->adapters.pairs.find(t);
            if (it == u->adapters.pairs.end())
                throw ShapeError("aggregate: differing target sets");
            const AdapterPair& q = it->second;
            if (!q.a.same_shape(p.a) || !q.b.same_shape(p.b) || q.rank != p.rank ||
                q.alpha != p.alpha)
                throw ShapeError(std::string("aggregate: adapter mismatch at target ") +
                                 target_name(t));
        }
    }
}

} // namespace detail

// Weighted mean of the reconstructed dense updates per target, truncated back
// to rank r by SVD; the session scale is divided back out so that
// s * B' * A' equals the rank-r truncation of the mean. Clients are iterated
// in ascending client_id so summation order is deterministic.
inline GlobalAdapterState aggregate(const std::vector<ClientUpdate>& updates,
                                    WeightingMode mode, std::size_t rank,
                                    AggregationMethod method = AggregationMethod::svd_refactor) {
    if (updates.empty()) throw AggregationError("aggregate: empty update list");

    std::vector<const ClientUpdate*> ordered;
    ordered.reserve(updates.size());
    for (const ClientUpdate& u : updates) ordered.push_back(&u);
    std::sort(ordered.begin(), ordered.end(),
              [](const ClientUpdate* a, const ClientUpdate* b) {
                  return a->client_id < b->client_id;
              });
    for (std::size_t i = 0; i + 1 < ordered.size(); ++i)
        if (ordered[i]->client_id == ordered[i + 1]->client_id)
            throw AggregationError("aggregate: duplicate update from client " +
                                   std::to_string(ordered[i]->client_id));
    detail::check_consistent(ordered);

    std::vector<std::pair<int, std::size_t>> responding;
    for (const ClientUpdate* u : ordered) responding.emplace_back(u->client_id, u->n_k);
    const std::map<int, double> weights = renormalize_weights(responding, mode);

    const ClientUpdate& first = *ordered.front();
    GlobalAdapterState state;
    state.round = first.round;
    state.adapters.scaling_mode = first.adapters.scaling_mode;

    for (const auto& [target, proto] : first.adapters.pairs) {
        const double scale = first.adapters.scale(proto);
        AdapterPair merged;
        merged.target = target;
        merged.rank = rank;
        merged.alpha = proto.alpha;

        Matrix mean(proto.b.rows(), proto.a.cols());
        for (const ClientUpdate* u : ordered)
            mean += weights.at(u->client_id) * reconstruct_delta(*u, target);

        if (method == AggregationMethod::factor_average) {
            merged.a = Matrix(rank, proto.a.cols());
            merged.b = Matrix(proto.b.rows(), rank);
            if (rank != proto.rank)
                throw RankError("factor_average cannot change the adapter rank");
            for (const ClientUpdate* u : ordered) {
                const AdapterPair& p = u->adapters.pairs.at(target);
                const double w = weights.at(u->client_id);
                merged.a += w * p.a;
                merged.b += w * p.b;
            }
            state.residual_norms[target] =
                frobenius_norm(mean - scale * matmul(merged.b, merged.a));
        } else {
            SvdResult svd = truncated_svd(mean, rank);
            merged.a = Matrix(rank, mean.cols());
            merged.b = Matrix(mean.rows(), rank);
            for (std::size_t j = 0; j < rank; ++j) {
                const double f = std::sqrt(svd.singular_values[j] / scale);
                for (std::size_t i = 0; i < mean.rows(); ++i)
                    merged.b(i, j) = svd.u(i, j) * f;
                for (std::size_t i = 0; i < mean.cols(); ++i)
                    merged.a(j, i) = f * svd.vt(j, i);
            }
            state.residual_norms[target] =
                frobenius_norm(mean - scale * matmul(merged.b, merged.a));
        }
        state.adapters.pairs.emplace(target, std::move(merged));
    }
    return state;
}

} // namespace fedlora
