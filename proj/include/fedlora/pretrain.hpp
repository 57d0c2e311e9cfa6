#pragma once

#include <cstdint>

#include "fedlora/data.hpp"
#include "fedlora/model.hpp"

namespace fedlora {

struct PretrainOptions {
    std::size_t steps = 400;
    std::size_t batch = 16;
    double lr = 1e-2;
};

// Trains every weight of a fresh model on the pooled (union) distribution,
// then returns it; callers treat the result as frozen. Deterministic in seed.
inline BaseModel pretrain_base(const ModelDims& dims, const TaskSpec& task,
                               std::uint64_t seed, const PretrainOptions& opts = {}) {
    if (dims.vocab != task.vocab || dims.classes != task.classes ||
        dims.seq_len != task.seq_len)
        throw ConfigError("pretrain: model dims disagree with task spec");

    BaseModel model = init_base_model(dims, mix64(seed, 0x62617365ULL));
    if (opts.steps == 0) return model;

    std::vector<Example> pool = pooled(generate(task), seed);
    Rng order_rng(mix64(seed, 0x6f72646572ULL));

    AdamwParams hp;
    hp.lr = opts.lr;
    hp.total_steps = opts.steps;
    hp.weight_decay = 0.0;

    // Moments for every trainable matrix, in a fixed order.
    Matrix m_embed(model.embed.rows(), model.embed.cols()), v_embed = m_embed;
    Matrix m_head(model.w_head.rows(), model.w_head.cols()), v_head = m_head;
    std::map<Target, Matrix> m_base, v_base;
    for (Target t : kAllTargets) {
        const Matrix& w = model.weight(t);
        m_base.emplace(t, Matrix(w.rows(), w.cols()));
        v_base.emplace(t, Matrix(w.rows(), w.cols()));
    }

    const AdapterSet no_adapters;
    std::size_t cursor = 0;
    for (std::size_t step = 1; step <= opts.steps; ++step) {
        std::vector<Example> batch;
        batch.reserve(opts.batch);
        for (std::size_t i = 0; i < opts.batch; ++i) {
            if (cursor == 0) order_rng.shuffle(pool);
            batch.push_back(pool[cursor]);
            cursor = (cursor + 1) % pool.size();
        }
        LossGrads lg = loss_and_grads(model, no_adapters, batch, {}, /*train_base=*/true);
        const double lr_t = linear_decay_lr(hp, step);
        detail::adamw_update(model.embed, lg.grads.d_embed, m_embed, v_embed, step, hp, lr_t);
        for (Target t : kAllTargets)
            detail::adamw_update(model.weight(t), lg.grads.d_base.at(t), m_base.at(t),
                                 v_base.at(t), step, hp, lr_t);
        detail::adamw_update(model.w_head, lg.grads.d_head, m_head, v_head, step, hp, lr_t);
    }
    return model;
}

} // namespace fedlora
