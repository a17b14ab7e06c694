#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "p2p/errors.hpp"
#include "p2p/kernels/kernels.hpp"
#include "p2p/model.hpp"
#include "p2p/rng.hpp"
#include "p2p/windowing.hpp"

namespace p2p {

struct TrainConfig {
    double lr = 1e-3;
    int lr_decay_every_epochs = 2;
    double lr_decay_factor = 0.1;
    int batch_windows = 8;  // windows per optimizer step (gradient accumulation)
    int epochs = 6;
    std::uint64_t seed = 1;
    int precision = 64;  // 32 or 64
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
    // lr * factor^(epoch / every), with integer division: the schedule that
    // holds 1e-3 for epochs 0-1, 1e-4 for 2-3, and so on.
    double lr_for_epoch(int epoch) const;
};

// Session indices assigned to each split. Proportions follow 50/10/11 out of
// 71: val and test get max(1, round(n*10/71)) and max(1, round(n*11/71)),
// train gets the rest. Assignment order is a seeded shuffle of 0..n-1.
struct SessionSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};
SessionSplit split_sessions(std::size_t n_sessions, std::uint64_t seed);

// Per-column z-score statistics fitted on the training split only.
// Population std, floored at 1e-8 so constant columns normalize to zero.
struct FeatureNorm {
    std::array<double, 6> mean{};
    std::array<double, 6> stdev{};
};
FeatureNorm fit_feature_norm(const std::vector<WindowBatch>& split);

// Positive-class weight for the loss head, from the training split's
// lossless/lossy sample counts.
PosWeight split_pos_weight(const std::vector<WindowBatch>& split);

// Stacks a batch's per-flow features into the (n*L) x 6 normalized matrix
// build_forward expects. Throws ShapeMismatch when a sample's feature matrix
// is not n x 6.
template <typename T>
Mat<T> batch_features(const WindowBatch& b, const FeatureNorm& norm, std::size_t n) {
    const std::size_t L = b.samples.size();
    if (L == 0) throw ShapeMismatch("batch_features: empty window batch");
    Mat<T> out(n * L, 6);
    for (std::size_t f = 0; f < L; ++f) {
        const Mat<double>& feat = b.samples[f].features;
        if (feat.rows() != n || feat.cols() != 6)
            throw ShapeMismatch("batch_features: sample features are " +
                                std::to_string(feat.rows()) + "x" + std::to_string(feat.cols()) +
                                ", expected " + std::to_string(n) + "x6");
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < 6; ++c)
                out(f * n + i, c) =
                    static_cast<T>((feat(i, c) - norm.mean[c]) / norm.stdev[c]);
    }
    return out;
}

// L x 1 targets and masks per task. Bitrate and loss are always unmasked;
// jitter and fps carry the per-sample masks from windowing.
template <typename T>
WindowTargets<T> batch_targets(const WindowBatch& b) {
    const std::size_t L = b.samples.size();
    WindowTargets<T> tgt;
    for (std::size_t t = 0; t < kNumTasks; ++t) {
        tgt.y[t] = Mat<T>(L, 1);
        tgt.mask[t] = Mat<T>(L, 1);
    }
    for (std::size_t f = 0; f < L; ++f) {
        const WindowSample& s = b.samples[f];
        tgt.y[kBitrate](f, 0) = static_cast<T>(s.label_bitrate_mbps);
        tgt.mask[kBitrate](f, 0) = T(1);
        tgt.y[kJitter](f, 0) = static_cast<T>(s.label_jitter_ms);
        tgt.mask[kJitter](f, 0) = s.jitter_mask ? T(1) : T(0);
        tgt.y[kFps](f, 0) = static_cast<T>(s.label_fps);
        tgt.mask[kFps](f, 0) = s.fps_mask ? T(1) : T(0);
        tgt.y[kLoss](f, 0) = s.label_loss ? T(1) : T(0);
        tgt.mask[kLoss](f, 0) = T(1);
    }
    return tgt;
}

// Everything needed to restart training or run inference. Values and Adam
// moments are stored in double regardless of training precision so that a
// round trip through disk is bit-exact.
struct Checkpoint {
    int precision = 64;
    EncoderConfig encoder;
    TrainConfig train;
    FeatureNorm norm;
    double pos_weight = 1.0;
    std::array<std::uint64_t, 4> rng_state{};
    std::uint64_t epochs_done = 0;  // completed epochs
    std::uint64_t adam_t = 0;       // optimizer steps taken
    double val_loss = std::numeric_limits<double>::infinity();

    struct Entry {
        std::string name;
        Mat<double> value;
        Mat<double> adam_m;
        Mat<double> adam_v;
    };
    std::vector<Entry> tensors;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Copies values and Adam moments between a checkpoint and live parameters.
// Matching is by tensor name; a missing name or shape difference throws
// ShapeMismatch.
template <typename T>
void load_params(ModelParams<T>& params, const Checkpoint& ck) {
    for (auto& t : params.tensors()) {
        const Checkpoint::Entry* e = nullptr;
        for (const auto& cand : ck.tensors)
            if (cand.name == t.name) {
                e = &cand;
                break;
            }
        if (!e) throw ShapeMismatch("checkpoint: missing tensor " + t.name);
        if (e->value.rows() != t.value.rows() || e->value.cols() != t.value.cols())
            throw ShapeMismatch("checkpoint: tensor " + t.name + " has shape " +
                                std::to_string(e->value.rows()) + "x" +
                                std::to_string(e->value.cols()) + ", expected " +
                                std::to_string(t.value.rows()) + "x" +
                                std::to_string(t.value.cols()));
        for (std::size_t i = 0; i < t.value.size(); ++i) {
            t.value[i] = static_cast<T>(e->value[i]);
            t.adam_m[i] = static_cast<T>(e->adam_m[i]);
            t.adam_v[i] = static_cast<T>(e->adam_v[i]);
        }
    }
}

template <typename T>
void store_params(Checkpoint& ck, const ModelParams<T>& params) {
    ck.tensors.clear();
    ck.tensors.reserve(params.tensors().size());
    for (const auto& t : params.tensors()) {
        Checkpoint::Entry e;
        e.name = t.name;
        e.value = Mat<double>(t.value.rows(), t.value.cols());
        e.adam_m = Mat<double>(t.value.rows(), t.value.cols());
        e.adam_v = Mat<double>(t.value.rows(), t.value.cols());
        for (std::size_t i = 0; i < t.value.size(); ++i) {
            e.value[i] = static_cast<double>(t.value[i]);
            e.adam_m[i] = static_cast<double>(t.adam_m[i]);
            e.adam_v[i] = static_cast<double>(t.adam_v[i]);
        }
        ck.tensors.push_back(std::move(e));
    }
}

// One Adam update over every parameter tensor from its accumulated gradients.
// step_t is the 1-based optimizer step used for bias correction. Exposed so
// the no-op and lr-0 invariants can be tested directly.
template <typename T>
void adam_step(ModelParams<T>& params, const TrainConfig& cfg, double lr, std::uint64_t step_t) {
    const auto& k = kernels::ops<T>();
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, double(step_t));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, double(step_t));
    for (auto& t : params.tensors())
        k.adam_update(t.value.data(), t.grad.data(), t.adam_m.data(), t.adam_v.data(),
                      t.value.size(), T(lr), T(cfg.adam_beta1), T(cfg.adam_beta2),
                      T(cfg.adam_eps), T(bc1), T(bc2));
}

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double train_total = 0.0;  // mean combined loss per training window
    std::array<double, 4> train_task{};  // mean raw task losses (0 when never present)
    double val_total = 0.0;    // mean combined loss per validation window
    bool best = false;
};

struct TrainResult {
    Checkpoint best;              // lowest validation loss
    std::vector<EpochLog> log;    // one entry per completed epoch
};

// Runs the full training loop. Gradients are accumulated over
// cfg.batch_windows windows (each scaled by 1/group so the step uses the
// batch-mean gradient), the LR decays by cfg.lr_decay_factor every
// cfg.lr_decay_every_epochs, and the checkpoint with the lowest validation
// loss is returned. resume, when given, restores parameters, moments and the
// epoch counter and continues to cfg.epochs. A non-finite training or
// validation loss throws DivergedLoss; when on_diverge is non-null it
// receives the last good checkpoint first.
TrainResult train(const std::vector<WindowBatch>& train_split,
                  const std::vector<WindowBatch>& val_split, const EncoderConfig& ecfg,
                  const TrainConfig& cfg, const Checkpoint* resume = nullptr,
                  Checkpoint* on_diverge = nullptr);

}  // namespace p2p
