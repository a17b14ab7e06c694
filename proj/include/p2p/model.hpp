#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "p2p/errors.hpp"
#include "p2p/graph.hpp"
#include "p2p/mat.hpp"
#include "p2p/rng.hpp"

namespace p2p {

enum class AttentionMode { dual, vanilla };

struct EncoderConfig {
    std::size_t d_embed = 32;
    std::size_t heads = 8;
    std::size_t ffn_neurons = 512;
    std::size_t neighbourhood_k = 32;
    std::size_t n = 128;  // packets per flow
    AttentionMode mode = AttentionMode::dual;
    double leaky_slope = 0.01;
    double ln_eps = 1e-5;

    std::size_t d_head() const { return d_embed / heads; }

    void validate() const {
        if (d_embed == 0 || heads == 0 || ffn_neurons == 0 || n == 0)
            throw UsageError("encoder config: dimensions must be positive");
        if (d_embed % heads != 0)
            throw UsageError("encoder config: d_embed must be divisible by heads");
        if (neighbourhood_k == 0 || neighbourhood_k >= n)
            throw BadDegree("encoder config: neighbourhood degree must satisfy 0 < k < n");
    }
};

inline const char* attention_mode_name(AttentionMode m) {
    return m == AttentionMode::dual ? "dual" : "vanilla";
}

// Band mask |i-j| <= k. Row i keeps min(i,k) + min(n-1-i,k) + 1 entries.
template <typename T>
std::shared_ptr<const Mat<T>> neighbourhood_mask(std::size_t n, std::size_t k) {
    if (k == 0 || k >= n) throw BadDegree("neighbourhood_mask: need 0 < k < n");
    auto m = std::make_shared<Mat<T>>(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            (*m)(i, j) = (i > j ? i - j : j - i) <= k ? T(1) : T(0);
    return m;
}

template <typename T>
std::shared_ptr<const Mat<T>> full_mask(std::size_t n) {
    return std::make_shared<Mat<T>>(n, n, T(1));
}

// Sinusoidal table, positions 0..n-1: PE[p][2i] = sin(p / 10000^(2i/d)),
// PE[p][2i+1] = cos(...). Row 0 is [0,1,0,1,...].
template <typename T>
Mat<T> positional_table(std::size_t n, std::size_t d) {
    Mat<T> pe(n, d);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, double(i) / double(d));
            pe(p, i) = static_cast<T>(std::sin(double(p) / freq));
            if (i + 1 < d) pe(p, i + 1) = static_cast<T>(std::cos(double(p) / freq));
        }
    return pe;
}

inline constexpr std::size_t kNumTasks = 4;
inline const char* const kTaskNames[kNumTasks] = {"bitrate", "jitter", "fps", "loss"};
enum Task : std::size_t { kBitrate = 0, kJitter = 1, kFps = 2, kLoss = 3 };

template <typename T>
struct Tensor {
    std::string name;
    Mat<T> value;
    Mat<T> grad;
    Mat<T> adam_m;
    Mat<T> adam_v;

    explicit Tensor(std::string nm, std::size_t r, std::size_t c)
        : name(std::move(nm)), value(r, c), grad(r, c), adam_m(r, c), adam_v(r, c) {}
};

// Every learnable tensor of encoder + heads + task weights, in a fixed order
// so checkpoints and deterministic init are stable.
template <typename T>
class ModelParams {
public:
    explicit ModelParams(const EncoderConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        const std::size_t d = cfg.d_embed;
        const std::size_t dh = cfg.d_head();
        add("embed.w", 6, d);
        add("embed.b", 1, d);
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const std::string p = "attn.h" + std::to_string(h);
            add(p + ".wq", d, dh);
            add(p + ".wk", d, dh);
            add(p + ".wv", d, dh);
        }
        add("attn.wo", d, d);
        add("ln1.g", 1, d);
        add("ln1.b", 1, d);
        add("ffn.w1", d, cfg.ffn_neurons);
        add("ffn.b1", 1, cfg.ffn_neurons);
        add("ffn.w2", cfg.ffn_neurons, d);
        add("ffn.b2", 1, d);
        add("ln2.g", 1, d);
        add("ln2.b", 1, d);
        add("lnf.g", 1, cfg.n);
        add("lnf.b", 1, cfg.n);
        for (std::size_t t = 0; t < kNumTasks; ++t) {
            const std::string p = std::string("head.") + kTaskNames[t];
            add(p + ".w1", cfg.n, 64);
            add(p + ".b1", 1, 64);
            add(p + ".w2", 64, 1);
            add(p + ".b2", 1, 1);
            add(std::string("task.s.") + kTaskNames[t], 1, 1);
        }
    }

    // Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases, shifts and task
    // log-variances start at 0; layer-norm gains at 1.
    void init(Rng& rng) {
        for (auto& t : tensors_) {
            const bool is_gain = t.name.size() > 2 && t.name.substr(t.name.size() - 2) == ".g" &&
                                 t.name.rfind("ln", 0) == 0;
            const bool is_weight = t.name.find(".w") != std::string::npos;
            if (is_gain) {
                t.value.fill(T(1));
            } else if (is_weight && t.value.rows() > 1) {
                const double bound = 1.0 / std::sqrt(double(t.value.rows()));
                for (std::size_t i = 0; i < t.value.size(); ++i)
                    t.value[i] = static_cast<T>(rng.uniform(-bound, bound));
            } else {
                t.value.fill(T(0));
            }
        }
    }

    void zero_grad() {
        for (auto& t : tensors_) t.grad.fill(T(0));
    }

    Tensor<T>& find(const std::string& name) {
        for (auto& t : tensors_) {
            if (t.name == name) return t;
        }
        throw UsageError("unknown parameter tensor: " + name);
    }
    const Tensor<T>& find(const std::string& name) const {
        return const_cast<ModelParams*>(this)->find(name);
    }

    std::vector<Tensor<T>>& tensors() { return tensors_; }
    const std::vector<Tensor<T>>& tensors() const { return tensors_; }
    const EncoderConfig& config() const { return cfg_; }

    std::size_t total_values() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.value.size();
        return n;
    }

private:
    void add(std::string name, std::size_t r, std::size_t c) {
        tensors_.emplace_back(std::move(name), r, c);
    }

    EncoderConfig cfg_;
    std::vector<Tensor<T>> tensors_;
};

// Handles into a built forward graph.
template <typename T>
struct ModelGraph {
    using NodeId = typename Graph<T>::NodeId;
    NodeId attn_out = 0;              // (n*L) x d_embed, after Wo
    NodeId encodings = 0;             // L x n per-flow encodings
    NodeId task_out[kNumTasks] = {};  // L x 1 each; loss entry holds logits
    NodeId p_loss = 0;                // sigmoid of the loss logits
    std::vector<NodeId> attn_weights;  // per head: (n*L) x n post-softmax
    std::vector<std::vector<T>> injected;  // per head: (f, g!=f, i) max values
    std::size_t L = 0;
};

// Builds the full forward pass for one WindowBatch. features_norm is the
// vertically stacked (n*L) x 6 matrix of already-normalized features in flow
// order. with_grad routes parameter gradients into ModelParams::grad.
template <typename T>
ModelGraph<T> build_forward(Graph<T>& g, const Mat<T>& features_norm, std::size_t L,
                            ModelParams<T>& params, bool with_grad = true,
                            bool want_attention = false) {
    const EncoderConfig& cfg = params.config();
    const std::size_t n = cfg.n;
    if (L == 0 || features_norm.rows() != n * L || features_norm.cols() != 6)
        throw ShapeMismatch("build_forward: features must be (n*L) x 6");

    auto P = [&](const char* name) {
        Tensor<T>& t = params.find(name);
        return g.param(t.value, with_grad ? &t.grad : nullptr);
    };
    auto Ps = [&](const std::string& name) {
        Tensor<T>& t = params.find(name);
        return g.param(t.value, with_grad ? &t.grad : nullptr);
    };

    ModelGraph<T> mg;
    mg.L = L;

    // embedding + per-flow positional encoding
    auto x = g.input(features_norm);
    auto e0 = g.linear(x, P("embed.w"), P("embed.b"));
    Mat<T> pe_block = positional_table<T>(n, cfg.d_embed);
    Mat<T> pe(n * L, cfg.d_embed);
    for (std::size_t f = 0; f < L; ++f)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < cfg.d_embed; ++j) pe(f * n + i, j) = pe_block(i, j);
    auto e = g.add(e0, g.input(std::move(pe)));

    // multi-head block-diagonal attention
    const bool inject = cfg.mode == AttentionMode::dual;
    auto mask = cfg.mode == AttentionMode::dual
                    ? neighbourhood_mask<T>(n, cfg.neighbourhood_k)
                    : full_mask<T>(n);
    const T scale = static_cast<T>(1.0 / std::sqrt(double(cfg.d_head())));
    std::vector<typename Graph<T>::NodeId> head_outs;
    head_outs.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const std::string p = "attn.h" + std::to_string(h);
        auto q = g.matmul(e, Ps(p + ".wq"));
        auto k = g.matmul(e, Ps(p + ".wk"));
        auto v = g.matmul(e, Ps(p + ".wv"));
        std::vector<T>* inj_out = nullptr;
        if (want_attention) {
            mg.injected.emplace_back();
            inj_out = &mg.injected.back();
        }
        auto s = g.block_scores(q, k, L, n, scale, inject, inj_out);
        auto w = g.masked_softmax_rows(s, mask);
        if (want_attention) mg.attn_weights.push_back(w);
        head_outs.push_back(g.block_diag_matmul(w, v, L, n));
    }
    auto attn = g.matmul(g.concat_cols(head_outs), P("attn.wo"));
    mg.attn_out = attn;

    // post-norm residual blocks
    auto x1 = g.layer_norm(g.add(e, attn), P("ln1.g"), P("ln1.b"), static_cast<T>(cfg.ln_eps));
    auto f1 = g.leaky_relu(g.linear(x1, P("ffn.w1"), P("ffn.b1")),
                           static_cast<T>(cfg.leaky_slope));
    auto f2 = g.linear(f1, P("ffn.w2"), P("ffn.b2"));
    auto x2 = g.layer_norm(g.add(x1, f2), P("ln2.g"), P("ln2.b"), static_cast<T>(cfg.ln_eps));

    // mean over the embedding dimension, then per-flow layer norm over each
    // n-segment
    auto pooled = g.reshape(g.mean_cols(x2), L, n);
    mg.encodings =
        g.layer_norm(pooled, P("lnf.g"), P("lnf.b"), static_cast<T>(cfg.ln_eps));

    // four parallel heads
    for (std::size_t t = 0; t < kNumTasks; ++t) {
        const std::string p = std::string("head.") + kTaskNames[t];
        auto h1 = g.leaky_relu(g.linear(mg.encodings, Ps(p + ".w1"), Ps(p + ".b1")),
                               static_cast<T>(cfg.leaky_slope));
        mg.task_out[t] = g.linear(h1, Ps(p + ".w2"), Ps(p + ".b2"));
    }
    mg.p_loss = g.sigmoid(mg.task_out[kLoss]);
    return mg;
}

// (count lossless)/(count lossy), clamped to [1, 1000]. degenerate flags the
// no-positives case, where the weight falls back to 1 and callers warn.
struct PosWeight {
    double value = 1.0;
    bool degenerate = false;
};

inline PosWeight compute_pos_weight(std::size_t lossless, std::size_t lossy) {
    if (lossy == 0) return {1.0, true};
    double w = double(lossless) / double(lossy);
    if (w < 1.0) w = 1.0;
    if (w > 1000.0) w = 1000.0;
    return {w, false};
}

// Labels and masks for one window, all L x 1.
template <typename T>
struct WindowTargets {
    Mat<T> y[kNumTasks];
    Mat<T> mask[kNumTasks];
};

// Total = sum over tasks with >=1 unmasked sample of exp(-s_t)*L_t + s_t.
// Raw (un-weighted) per-task loss nodes, for logging. present[t] is false
// when task t was fully masked and contributed nothing.
template <typename T>
struct TaskLossNodes {
    std::array<typename Graph<T>::NodeId, kNumTasks> node{};
    std::array<bool, kNumTasks> present{};
};

// Regressions use MAE, loss uses weighted BCE from logits. A fully masked
// task contributes nothing, including no gradient to its s_t.
template <typename T>
typename Graph<T>::NodeId build_loss(Graph<T>& g, const ModelGraph<T>& mg,
                                     const WindowTargets<T>& tgt, ModelParams<T>& params,
                                     T pos_weight, bool with_grad = true,
                                     TaskLossNodes<T>* raw = nullptr) {
    auto S = [&](std::size_t t) {
        Tensor<T>& ten = params.find(std::string("task.s.") + kTaskNames[t]);
        return g.param(ten.value, with_grad ? &ten.grad : nullptr);
    };
    typename Graph<T>::NodeId total = 0;
    bool have = false;
    for (std::size_t t = 0; t < kNumTasks; ++t) {
        std::size_t count = 0;
        for (std::size_t i = 0; i < tgt.mask[t].size(); ++i)
            if (tgt.mask[t][i] != T(0)) ++count;
        if (count == 0) continue;
        typename Graph<T>::NodeId lt;
        if (t == kLoss) {
            lt = g.masked_mean(
                g.bce_logits(mg.task_out[t], tgt.y[t], tgt.mask[t], pos_weight), tgt.mask[t],
                count);
        } else {
            lt = g.masked_mean(g.abs_val(g.sub(mg.task_out[t], g.input(tgt.y[t]))), tgt.mask[t],
                               count);
        }
        if (raw) {
            raw->node[t] = lt;
            raw->present[t] = true;
        }
        auto s = S(t);
        auto term = g.add(g.mul_elem(g.exp_op(g.scale(s, T(-1))), lt), s);
        total = have ? g.add(total, term) : term;
        have = true;
    }
    if (!have) return g.input(Mat<T>(1, 1));
    return total;
}

}  // namespace p2p
