#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedlora/errors.hpp"
#include "fedlora/example.hpp"
#include "fedlora/matrix.hpp"
#include "fedlora/svd.hpp"

namespace fedlora {

// ---------------------------------------------------------------------------
// Injection targets: attention projections and the gated MLP matrices.

enum class Target : int { q = 0, k, v, o, gate, up, down };

constexpr std::array<Target, 7> kAllTargets = {Target::q,    Target::k,  Target::v,
                                               Target::o,    Target::gate,
                                               Target::up,   Target::down};

inline const char* target_name(Target t) {
    switch (t) {
    case Target::q: return "q";
    case Target::k: return "k";
    case Target::v: return "v";
    case Target::o: return "o";
    case Target::gate: return "gate";
    case Target::up: return "up";
    case Target::down: return "down";
    }
    return "?";
}

inline Target target_from_name(const std::string& name) {
    for (Target t : kAllTargets)
        if (name == target_name(t)) return t;
    throw InputError("unknown injection target: " + name);
}

enum class ScalingMode { alpha_over_r, alpha };

inline const char* scaling_mode_name(ScalingMode m) {
    return m == ScalingMode::alpha_over_r ? "alpha_over_r" : "alpha";
}

inline ScalingMode scaling_mode_from_name(const std::string& s) {
    if (s == "alpha_over_r") return ScalingMode::alpha_over_r;
    if (s == "alpha") return ScalingMode::alpha;
    throw ConfigError("unknown scaling_mode: " + s);
}

inline double lora_scale(double alpha, std::size_t rank, ScalingMode mode) {
    return mode == ScalingMode::alpha_over_r ? alpha / static_cast<double>(rank) : alpha;
}

struct ModelDims {
    std::size_t vocab = 64;
    std::size_t d = 16;
    std::size_t h = 32;
    std::size_t classes = 8;
    std::size_t seq_len = 12;
};

// (d_in, d_out) of the base matrix a target adapts.
inline std::pair<std::size_t, std::size_t> target_dims(Target t, const ModelDims& dims) {
    switch (t) {
    case Target::q:
    case Target::k:
    case Target::v:
    case Target::o: return {dims.d, dims.d};
    case Target::gate:
    case Target::up: return {dims.d, dims.h};
    case Target::down: return {dims.h, dims.d};
    }
    throw InputError("bad target");
}

// ---------------------------------------------------------------------------
// Frozen base model: embedding, one attention block, gated MLP, linear head.

struct BaseModel {
    ModelDims dims;
    Matrix embed;  // vocab x d
    Matrix wq, wk, wv, wo;   // d x d
    Matrix w_gate, w_up;     // h x d
    Matrix w_down;           // d x h
    Matrix w_head;           // classes x d

    const Matrix& weight(Target t) const {
        switch (t) {
        case Target::q: return wq;
        case Target::k: return wk;
        case Target::v: return wv;
        case Target::o: return wo;
        case Target::gate: return w_gate;
        case Target::up: return w_up;
        case Target::down: return w_down;
        }
        throw InputError("bad target");
    }

    Matrix& weight(Target t) {
        return const_cast<Matrix&>(static_cast<const BaseModel*>(this)->weight(t));
    }

    bool operator==(const BaseModel&) const = default;
};

inline bool operator==(const ModelDims& a, const ModelDims& b) {
    return a.vocab == b.vocab && a.d == b.d && a.h == b.h && a.classes == b.classes &&
           a.seq_len == b.seq_len;
}

inline BaseModel init_base_model(const ModelDims& dims, std::uint64_t seed) {
    BaseModel m;
    m.dims = dims;
    const double ds = 1.0 / std::sqrt(static_cast<double>(dims.d));
    const double hs = 1.0 / std::sqrt(static_cast<double>(dims.h));
    m.embed = random_init(dims.vocab, dims.d, 0.5, mix64(seed, 1));
    m.wq = random_init(dims.d, dims.d, ds, mix64(seed, 2));
    m.wk = random_init(dims.d, dims.d, ds, mix64(seed, 3));
    m.wv = random_init(dims.d, dims.d, ds, mix64(seed, 4));
    m.wo = random_init(dims.d, dims.d, ds, mix64(seed, 5));
    m.w_gate = random_init(dims.h, dims.d, ds, mix64(seed, 6));
    m.w_up = random_init(dims.h, dims.d, ds, mix64(seed, 7));
    m.w_down = random_init(dims.d, dims.h, hs, mix64(seed, 8));
    m.w_head = random_init(dims.classes, dims.d, ds, mix64(seed, 9));
    return m;
}

// ---------------------------------------------------------------------------
// Adapters.

struct AdapterPair {
    Target target = Target::q;
    Matrix a;  // rank x d_in
    Matrix b;  // d_out x rank
    std::size_t rank = 0;
    double alpha = 0.0;
};

struct AdapterSet {
    std::map<Target, AdapterPair> pairs;
    ScalingMode scaling_mode = ScalingMode::alpha_over_r;

    bool empty() const { return pairs.empty(); }

    double scale(const AdapterPair& p) const {
        return lora_scale(p.alpha, p.rank, scaling_mode);
    }
};

// Standard LoRA start: A ~ N(0, 1/d_in), B = 0, so the initial update is zero.
inline AdapterSet init_adapters(const ModelDims& dims, std::size_t rank, double alpha,
                                ScalingMode mode, std::uint64_t seed) {
    AdapterSet set;
    set.scaling_mode = mode;
    for (Target t : kAllTargets) {
        auto [d_in, d_out] = target_dims(t, dims);
        AdapterPair p;
        p.target = t;
        p.rank = rank;
        p.alpha = alpha;
        p.a = random_init(rank, d_in, std::sqrt(1.0 / static_cast<double>(d_in)),
                          mix64(seed, static_cast<std::uint64_t>(t) + 100));
        p.b = Matrix(d_out, rank);
        set.pairs.emplace(t, std::move(p));
    }
    return set;
}

// W + s*B*A with s = alpha/rank (or plain alpha, per mode).
inline Matrix adapted_matrix(const Matrix& base, const AdapterPair& pair,
                             ScalingMode mode = ScalingMode::alpha_over_r) {
    if (pair.a.rows() != pair.rank || pair.b.cols() != pair.rank ||
        pair.b.rows() != base.rows() || pair.a.cols() != base.cols())
        throw ShapeError("adapted_matrix: adapter does not conform to base " +
                         shape_str(base));
    return base + lora_scale(pair.alpha, pair.rank, mode) * matmul(pair.b, pair.a);
}

// ---------------------------------------------------------------------------
// Forward pass.

struct DropoutSpec {
    double rate = 0.0;
    std::optional<std::uint64_t> seed;  // absent -> dropout off

    bool active() const { return seed.has_value() && rate > 0.0; }
};

struct ForwardCache {
    std::vector<int> tokens;
    Matrix x0;        // seq x d
    Matrix q, k, v;   // seq x d
    Matrix attn;      // seq x seq, post-softmax
    Matrix ctx;       // seq x d
    Matrix attn_out;  // seq x d
    Matrix gate_pre;  // seq x h
    Matrix up_out;    // seq x h
    Matrix mlp_mid;   // seq x h
    Matrix mlp_out;   // seq x d
    Matrix pooled;    // 1 x d
    std::vector<double> logits;
    std::map<Target, Matrix> lora_xa;    // input * A^T per adapted target
    std::map<Target, Matrix> lora_mask;  // inverted-dropout mask, empty if off
};

namespace detail {

inline Matrix dropout_mask(std::size_t rows, std::size_t cols, double rate,
                           std::uint64_t key) {
    CounterRng rng(key);
    Matrix mask(rows, cols);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask.data()[i] = rng.uniform(i) <= rate ? 0.0 : keep_scale;
    return mask;
}

// y = x W^T + mask ⊙ (s (x A^T) B^T); caches xa and mask for the backward pass.
inline Matrix adapted_mul(const Matrix& x, Target t, const BaseModel& model,
                          const AdapterSet& adapters, const DropoutSpec& dropout,
                          ForwardCache& cache) {
    const Matrix& w = model.weight(t);
    Matrix y = matmul(x, transpose(w));
    auto it = adapters.pairs.find(t);
    if (it == adapters.pairs.end()) return y;

    const AdapterPair& p = it->second;
    if (p.b.rows() != w.rows() || p.a.cols() != w.cols())
        throw ShapeError(std::string("adapter shape mismatch at target ") +
                         target_name(t));
    const double s = adapters.scale(p);
    Matrix xa = matmul(x, transpose(p.a));       // n x r
    Matrix y_lora = s * matmul(xa, transpose(p.b));  // n x d_out

    if (dropout.active()) {
        Matrix mask = dropout_mask(y_lora.rows(), y_lora.cols(), dropout.rate,
                                   mix64(*dropout.seed, static_cast<std::uint64_t>(t)));
        for (std::size_t i = 0; i < y_lora.size(); ++i)
            y_lora.data()[i] *= mask.data()[i];
        cache.lora_mask[t] = std::move(mask);
    }
    cache.lora_xa[t] = std::move(xa);
    return y + y_lora;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

inline void softmax_rows(Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double mx = m(i, 0);
        for (std::size_t j = 1; j < m.cols(); ++j) mx = std::max(mx, m(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            m(i, j) = std::exp(m(i, j) - mx);
            sum += m(i, j);
        }
        for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) /= sum;
    }
}

} // namespace detail

// Single-head self-attention over the embedded tokens, gated MLP, mean pool,
// linear head. Dropout applies to the LoRA branch output only.
inline ForwardCache forward(const BaseModel& model, const AdapterSet& adapters,
                            const std::vector<int>& tokens,
                            const DropoutSpec& dropout = {}) {
    const ModelDims& dims = model.dims;
    if (tokens.size() != dims.seq_len)
        throw InputError("forward: expected " + std::to_string(dims.seq_len) +
                         " tokens, got " + std::to_string(tokens.size()));
    for (int t : tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= dims.vocab)
            throw InputError("forward: token id " + std::to_string(t) +
                             " out of vocab");

    ForwardCache c;
    c.tokens = tokens;
    const std::size_t n = dims.seq_len;

    c.x0 = Matrix(n, dims.d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dims.d; ++j)
            c.x0(i, j) = model.embed(static_cast<std::size_t>(tokens[i]), j);

    c.q = detail::adapted_mul(c.x0, Target::q, model, adapters, dropout, c);
    c.k = detail::adapted_mul(c.x0, Target::k, model, adapters, dropout, c);
    c.v = detail::adapted_mul(c.x0, Target::v, model, adapters, dropout, c);

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dims.d));
    c.attn = inv_sqrt_d * matmul(c.q, transpose(c.k));
    detail::softmax_rows(c.attn);
    c.ctx = matmul(c.attn, c.v);
    c.attn_out = detail::adapted_mul(c.ctx, Target::o, model, adapters, dropout, c);

    c.gate_pre = detail::adapted_mul(c.attn_out, Target::gate, model, adapters, dropout, c);
    c.up_out = detail::adapted_mul(c.attn_out, Target::up, model, adapters, dropout, c);
    c.mlp_mid = Matrix(n, dims.h);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dims.h; ++j)
            c.mlp_mid(i, j) = detail::silu(c.gate_pre(i, j)) * c.up_out(i, j);
    c.mlp_out = detail::adapted_mul(c.mlp_mid, Target::down, model, adapters, dropout, c);

    c.pooled = Matrix(1, dims.d);
    for (std::size_t j = 0; j < dims.d; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += c.mlp_out(i, j);
        c.pooled(0, j) = s / static_cast<double>(n);
    }

    c.logits.assign(dims.classes, 0.0);
    for (std::size_t cl = 0; cl < dims.classes; ++cl) {
        double s = 0.0;
        for (std::size_t j = 0; j < dims.d; ++j) s += c.pooled(0, j) * model.w_head(cl, j);
        c.logits[cl] = s;
    }
    return c;
}

// ---------------------------------------------------------------------------
// Backward pass. Adapter gradients always; base gradients only when asked
// (used by pretraining). The base weights never receive updates outside
// pretraining, which keeps the frozen-base invariant trivially true.

struct GradPair {
    Matrix a;
    Matrix b;
};

struct Gradients {
    std::map<Target, GradPair> adapters;
    bool has_base = false;
    Matrix d_embed;
    std::map<Target, Matrix> d_base;
    Matrix d_head;
};

namespace detail {

inline void init_grads(Gradients& g, const BaseModel& model, const AdapterSet& adapters,
                       bool train_base) {
    for (const auto& [t, p] : adapters.pairs) {
        GradPair gp;
        gp.a = Matrix(p.a.rows(), p.a.cols());
        gp.b = Matrix(p.b.rows(), p.b.cols());
        g.adapters.emplace(t, std::move(gp));
    }
    if (train_base) {
        g.has_base = true;
        g.d_embed = Matrix(model.embed.rows(), model.embed.cols());
        for (Target t : kAllTargets) {
            const Matrix& w = model.weight(t);
            g.d_base.emplace(t, Matrix(w.rows(), w.cols()));
        }
        g.d_head = Matrix(model.w_head.rows(), model.w_head.cols());
    }
}

// Backward of adapted_mul: returns dX and accumulates dA/dB (and dW).
inline Matrix adapted_mul_backward(const Matrix& dy, const Matrix& x, Target t,
                                   const BaseModel& model, const AdapterSet& adapters,
                                   const ForwardCache& cache, Gradients& grads) {
    const Matrix& w = model.weight(t);
    Matrix dx = matmul(dy, w);
    if (grads.has_base) {
        grads.d_base.at(t) += matmul(transpose(dy), x);
    }
    auto it = adapters.pairs.find(t);
    if (it == adapters.pairs.end()) return dx;

    const AdapterPair& p = it->second;
    const double s = adapters.scale(p);
    Matrix dyl = dy;
    auto mit = cache.lora_mask.find(t);
    if (mit != cache.lora_mask.end())
        for (std::size_t i = 0; i < dyl.size(); ++i)
            dyl.data()[i] *= mit->second.data()[i];

    const Matrix& xa = cache.lora_xa.at(t);
    GradPair& gp = grads.adapters.at(t);
    gp.b += s * matmul(transpose(dyl), xa);
    Matrix dxa = s * matmul(dyl, p.b);
    gp.a += matmul(transpose(dxa), x);
    dx += matmul(dxa, p.a);
    return dx;
}

// Cross-entropy on the cached logits; adds example gradients into `grads`.
inline double backprop_example(const BaseModel& model, const AdapterSet& adapters,
                               const ForwardCache& c, int label, Gradients& grads) {
    const ModelDims& dims = model.dims;
    const std::size_t n = dims.seq_len;

    // stable log-softmax
    double mx = c.logits[0];
    for (double z : c.logits) mx = std::max(mx, z);
    double sum = 0.0;
    for (double z : c.logits) sum += std::exp(z - mx);
    const double log_z = mx + std::log(sum);
    const double loss = log_z - c.logits[static_cast<std::size_t>(label)];

    std::vector<double> dlogits(dims.classes);
    for (std::size_t cl = 0; cl < dims.classes; ++cl)
        dlogits[cl] = std::exp(c.logits[cl] - log_z);
    dlogits[static_cast<std::size_t>(label)] -= 1.0;

    Matrix dpooled(1, dims.d);
    for (std::size_t j = 0; j < dims.d; ++j) {
        double s = 0.0;
        for (std::size_t cl = 0; cl < dims.classes; ++cl)
            s += dlogits[cl] * model.w_head(cl, j);
        dpooled(0, j) = s;
    }
    if (grads.has_base)
        for (std::size_t cl = 0; cl < dims.classes; ++cl)
            for (std::size_t j = 0; j < dims.d; ++j)
                grads.d_head(cl, j) += dlogits[cl] * c.pooled(0, j);

    Matrix d_mlp_out(n, dims.d);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dims.d; ++j)
            d_mlp_out(i, j) = dpooled(0, j) * inv_n;

    Matrix d_mid = adapted_mul_backward(d_mlp_out, c.mlp_mid, Target::down, model,
                                        adapters, c, grads);

    Matrix d_gate(n, dims.h), d_up(n, dims.h);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dims.h; ++j) {
            d_gate(i, j) = d_mid(i, j) * c.up_out(i, j) * detail::silu_grad(c.gate_pre(i, j));
            d_up(i, j) = d_mid(i, j) * detail::silu(c.gate_pre(i, j));
        }

    Matrix d_attn_out =
        adapted_mul_backward(d_gate, c.attn_out, Target::gate, model, adapters, c, grads);
    d_attn_out +=
        adapted_mul_backward(d_up, c.attn_out, Target::up, model, adapters, c, grads);

    Matrix d_ctx = adapted_mul_backward(d_attn_out, c.ctx, Target::o, model, adapters,
                                        c, grads);

    Matrix d_attn = matmul(d_ctx, transpose(c.v));
    Matrix dv = matmul(transpose(c.attn), d_ctx);

    Matrix d_scores(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += d_attn(i, j) * c.attn(i, j);
        for (std::size_t j = 0; j < n; ++j)
            d_scores(i, j) = c.attn(i, j) * (d_attn(i, j) - dot);
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dims.d));
    Matrix dq = inv_sqrt_d * matmul(d_scores, c.k);
    Matrix dk = inv_sqrt_d * matmul(transpose(d_scores), c.q);

    Matrix dx0 = adapted_mul_backward(dq, c.x0, Target::q, model, adapters, c, grads);
    dx0 += adapted_mul_backward(dk, c.x0, Target::k, model, adapters, c, grads);
    dx0 += adapted_mul_backward(dv, c.x0, Target::v, model, adapters, c, grads);

    if (grads.has_base)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < dims.d; ++j)
                grads.d_embed(static_cast<std::size_t>(c.tokens[i]), j) += dx0(i, j);

    return loss;
}

inline void scale_grads(Gradients& g, double s) {
    for (auto& [t, gp] : g.adapters) {
        for (std::size_t i = 0; i < gp.a.size(); ++i) gp.a.data()[i] *= s;
        for (std::size_t i = 0; i < gp.b.size(); ++i) gp.b.data()[i] *= s;
    }
    if (g.has_base) {
        for (std::size_t i = 0; i < g.d_embed.size(); ++i) g.d_embed.data()[i] *= s;
        for (auto& [t, m] : g.d_base)
            for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] *= s;
        for (std::size_t i = 0; i < g.d_head.size(); ++i) g.d_head.data()[i] *= s;
    }
}

} // namespace detail

struct LossGrads {
    double loss = 0.0;
    Gradients grads;
};

// Mean cross-entropy and adapter gradients over a batch. Base weights get no
// gradient unless train_base is set (pretraining only). Per-example dropout
// keys are derived from the batch seed and the example index.
inline LossGrads loss_and_grads(const BaseModel& model, const AdapterSet& adapters,
                                const std::vector<Example>& batch,
                                const DropoutSpec& dropout = {},
                                bool train_base = false) {
    if (batch.empty()) throw InputError("loss_and_grads: empty batch");
    LossGrads out;
    detail::init_grads(out.grads, model, adapters, train_base);
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        DropoutSpec ex_dropout = dropout;
        if (dropout.active()) ex_dropout.seed = mix64(*dropout.seed, i);
        ForwardCache cache = forward(model, adapters, batch[i].tokens, ex_dropout);
        total += detail::backprop_example(model, adapters, cache, batch[i].label,
                                          out.grads);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    out.loss = total * inv;
    detail::scale_grads(out.grads, inv);
    return out;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and a linear learning-rate decay.

struct AdamwParams {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::size_t total_steps = 1;
};

struct OptimizerState {
    AdamwParams hp;
    std::size_t step = 0;  // completed update steps
    std::map<Target, GradPair> m;
    std::map<Target, GradPair> v;
};

namespace detail {

inline void adamw_update(Matrix& param, const Matrix& grad, Matrix& m, Matrix& v,
                         std::size_t t, const AdamwParams& hp, double lr_t) {
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad.data()[i];
        m.data()[i] = hp.beta1 * m.data()[i] + (1.0 - hp.beta1) * g;
        v.data()[i] = hp.beta2 * v.data()[i] + (1.0 - hp.beta2) * g * g;
        const double mhat = m.data()[i] / bc1;
        const double vhat = v.data()[i] / bc2;
        param.data()[i] -= lr_t * (mhat / (std::sqrt(vhat) + hp.eps) +
                                   hp.weight_decay * param.data()[i]);
    }
}

} // namespace detail

inline double linear_decay_lr(const AdamwParams& hp, std::size_t step_index) {
    // step_index is 1-based; lr ramps linearly down to 0 over total_steps.
    return hp.lr * (1.0 - static_cast<double>(step_index - 1) /
                              static_cast<double>(hp.total_steps));
}

// One AdamW step on A,B only. `grads` holds the sum over `accumulation`
// micro-batch mean-gradients; the division happens here.
inline void train_step(AdapterSet& adapters, const Gradients& grads,
                       OptimizerState& opt, std::size_t accumulation = 1) {
    if (opt.step >= opt.hp.total_steps)
        throw ScheduleError("train_step: step budget " +
                            std::to_string(opt.hp.total_steps) + " exhausted");
    const std::size_t t = opt.step + 1;
    const double lr_t = linear_decay_lr(opt.hp, t);
    const double inv_acc = 1.0 / static_cast<double>(accumulation);

    for (auto& [target, pair] : adapters.pairs) {
        const GradPair& g = grads.adapters.at(target);
        if (!opt.m.count(target)) {
            opt.m[target] = {Matrix(pair.a.rows(), pair.a.cols()),
                             Matrix(pair.b.rows(), pair.b.cols())};
            opt.v[target] = {Matrix(pair.a.rows(), pair.a.cols()),
                             Matrix(pair.b.rows(), pair.b.cols())};
        }
        Matrix ga = inv_acc * g.a;
        Matrix gb = inv_acc * g.b;
        detail::adamw_update(pair.a, ga, opt.m[target].a, opt.v[target].a, t, opt.hp, lr_t);
        detail::adamw_update(pair.b, gb, opt.m[target].b, opt.v[target].b, t, opt.hp, lr_t);
    }
    opt.step = t;
}

} // namespace fedlora
