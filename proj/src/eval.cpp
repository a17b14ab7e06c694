#include "p2p/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>

#include "p2p/graph.hpp"
#include "p2p/model.hpp"

namespace p2p {

RegressionMetrics regression_metrics(const std::vector<double>& pred,
                                     const std::vector<double>& truth,
                                     const std::vector<bool>& mask) {
    if (pred.size() != truth.size() || pred.size() != mask.size())
        throw ShapeMismatch("regression_metrics: length mismatch");

    RegressionMetrics m;
    double se = 0.0, ae = 0.0, ape = 0.0, ysum = 0.0;
    std::size_t ape_n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        const double e = pred[i] - truth[i];
        se += e * e;
        ae += std::fabs(e);
        ysum += truth[i];
        if (std::fabs(truth[i]) < 1e-6) {
            ++m.mape_excluded;
        } else {
            ape += std::fabs(e / truth[i]);
            ++ape_n;
        }
        ++m.count;
    }
    if (m.count == 0) throw AllMasked("regression_metrics: every point is masked");

    m.rmse = std::sqrt(se / double(m.count));
    m.mae = ae / double(m.count);
    m.mape = ape_n ? 100.0 * ape / double(ape_n) : 0.0;

    if (m.count >= 2) {
        const double mean = ysum / double(m.count);
        double sst = 0.0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (!mask[i]) continue;
            const double d = truth[i] - mean;
            sst += d * d;
        }
        if (sst > 0.0)
            m.r2 = 1.0 - se / sst;
        else if (se == 0.0)
            m.r2 = 1.0;
    }
    return m;
}

ClassificationMetrics classification_metrics(const std::vector<double>& p_hat,
                                             const std::vector<bool>& truth, double threshold) {
    if (p_hat.size() != truth.size())
        throw ShapeMismatch("classification_metrics: length mismatch");
    if (p_hat.empty()) throw AllMasked("classification_metrics: empty input");

    ClassificationMetrics m;
    for (std::size_t i = 0; i < p_hat.size(); ++i) {
        const bool hat = p_hat[i] >= threshold;
        if (truth[i])
            (hat ? m.tp : m.fn)++;
        else
            (hat ? m.fp : m.tn)++;
    }
    m.count = p_hat.size();

    const std::size_t n0 = m.tn + m.fp;  // actual negatives
    const std::size_t n1 = m.tp + m.fn;  // actual positives
    const auto f1 = [](double tp2, double fp_fn) {
        // 2tp / (2tp + fp + fn); zero when the class is never predicted
        // correctly but is present.
        const double denom = tp2 + fp_fn;
        return denom > 0.0 ? tp2 / denom : 0.0;
    };
    double macro = 0.0;
    std::size_t present = 0;
    if (n0 > 0) {
        m.recall_0 = double(m.tn) / double(n0);
        m.recall_0_defined = true;
        m.f1_class0 = f1(2.0 * double(m.tn), double(m.fn + m.fp));
        macro += m.f1_class0;
        ++present;
    }
    if (n1 > 0) {
        m.recall_1 = double(m.tp) / double(n1);
        m.recall_1_defined = true;
        m.f1_class1 = f1(2.0 * double(m.tp), double(m.fp + m.fn));
        macro += m.f1_class1;
        ++present;
    }
    if (present > 0) m.f1_macro = macro / double(present);
    return m;
}

// ---------------------------------------------------------------------------

namespace {

struct Collected {
    std::vector<double> pred[kNumTasks];
    std::vector<double> truth[3];  // regressions only
    std::vector<bool> mask[3];
    std::vector<bool> lossy;
};

template <typename T>
void collect_predictions(const Checkpoint& ck, const std::vector<WindowBatch>& dataset,
                         Collected& out) {
    ModelParams<T> params(ck.encoder);
    load_params(params, ck);
    for (const auto& b : dataset) {
        if (b.samples.empty()) continue;
        Graph<T> g;
        const Mat<T> feats = batch_features<T>(b, ck.norm, ck.encoder.n);
        const ModelGraph<T> mg = build_forward(g, feats, b.samples.size(), params, false, false);
        const Mat<T>& p_loss = g.val(mg.p_loss);
        for (std::size_t f = 0; f < b.samples.size(); ++f) {
            const WindowSample& s = b.samples[f];
            out.pred[kBitrate].push_back(double(g.val(mg.task_out[kBitrate])(f, 0)));
            out.truth[kBitrate].push_back(s.label_bitrate_mbps);
            out.mask[kBitrate].push_back(true);
            out.pred[kJitter].push_back(double(g.val(mg.task_out[kJitter])(f, 0)));
            out.truth[kJitter].push_back(s.label_jitter_ms);
            out.mask[kJitter].push_back(s.jitter_mask);
            out.pred[kFps].push_back(double(g.val(mg.task_out[kFps])(f, 0)));
            out.truth[kFps].push_back(s.label_fps);
            out.mask[kFps].push_back(s.fps_mask);
            out.pred[kLoss].push_back(double(p_loss(f, 0)));
            out.lossy.push_back(s.label_loss);
        }
    }
}

}  // namespace

EvalReport evaluate(const Checkpoint& ck, const std::vector<WindowBatch>& dataset) {
    Collected col;
    if (ck.precision == 32)
        collect_predictions<float>(ck, dataset, col);
    else
        collect_predictions<double>(ck, dataset, col);
    if (col.lossy.empty()) throw AllMasked("evaluate: dataset has no samples");

    EvalReport rep;
    rep.bitrate = regression_metrics(col.pred[kBitrate], col.truth[kBitrate], col.mask[kBitrate]);
    rep.jitter = regression_metrics(col.pred[kJitter], col.truth[kJitter], col.mask[kJitter]);
    rep.fps = regression_metrics(col.pred[kFps], col.truth[kFps], col.mask[kFps]);
    rep.loss = classification_metrics(col.pred[kLoss], col.lossy);
    rep.windows = dataset.size();
    rep.samples = col.lossy.size();
    return rep;
}

PersistenceReport persistence_baseline(const std::vector<WindowBatch>& dataset) {
    struct Last {
        double bitrate, jitter, fps;
        bool loss, jitter_ok, fps_ok;
    };
    std::map<FlowKey, Last> last;

    PersistenceReport rep;
    std::vector<double> pred[3], truth[3], p_loss;
    std::vector<bool> mask[3], lossy;

    for (const auto& b : dataset) {
        for (const auto& s : b.samples) {
            const auto it = last.find(s.flow);
            if (it != last.end()) {
                const Last& p = it->second;
                pred[kBitrate].push_back(p.bitrate);
                truth[kBitrate].push_back(s.label_bitrate_mbps);
                mask[kBitrate].push_back(true);
                pred[kJitter].push_back(p.jitter);
                truth[kJitter].push_back(s.label_jitter_ms);
                mask[kJitter].push_back(s.jitter_mask && p.jitter_ok);
                pred[kFps].push_back(p.fps);
                truth[kFps].push_back(s.label_fps);
                mask[kFps].push_back(s.fps_mask && p.fps_ok);
                p_loss.push_back(p.loss ? 1.0 : 0.0);
                lossy.push_back(s.label_loss);
                ++rep.used;
            } else {
                ++rep.skipped;
            }
            last[s.flow] = Last{s.label_bitrate_mbps, s.label_jitter_ms, s.label_fps,
                                s.label_loss,         s.jitter_mask,     s.fps_mask};
        }
    }
    if (lossy.empty()) throw AllMasked("persistence_baseline: no flow has two windows");

    rep.bitrate = regression_metrics(pred[kBitrate], truth[kBitrate], mask[kBitrate]);
    rep.jitter = regression_metrics(pred[kJitter], truth[kJitter], mask[kJitter]);
    rep.fps = regression_metrics(pred[kFps], truth[kFps], mask[kFps]);
    rep.loss = classification_metrics(p_loss, lossy);
    return rep;
}

// ---------------------------------------------------------------------------

namespace {

LatencyStats summarize_ms(std::vector<double>& samples) {
    std::sort(samples.begin(), samples.end());
    LatencyStats st;
    const std::size_t n = samples.size();
    st.median_ms = n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
    const std::size_t p95 = std::min(n - 1, std::size_t(std::ceil(0.95 * double(n))) - 1);
    st.p95_ms = samples[p95];
    return st;
}

template <typename T>
std::vector<LatencyRow> latency_bench_impl(const Checkpoint& ck, std::size_t lo, std::size_t hi,
                                           std::size_t reps, std::uint64_t seed) {
    using clock = std::chrono::steady_clock;
    if (lo == 0 || hi < lo) throw UsageError("latency_bench: need 1 <= flows_min <= flows_max");
    if (reps == 0) throw UsageError("latency_bench: repetitions must be positive");

    ModelParams<T> params(ck.encoder);
    load_params(params, ck);
    EncoderConfig vcfg = ck.encoder;
    vcfg.mode = AttentionMode::vanilla;
    ModelParams<T> vparams(vcfg);
    load_params(vparams, ck);

    const std::size_t n = ck.encoder.n;
    Rng rng(seed);
    std::vector<LatencyRow> rows;
    for (std::size_t L = lo; L <= hi; ++L) {
        Mat<T> feats(n * L, 6);
        for (std::size_t i = 0; i < feats.size(); ++i) feats[i] = static_cast<T>(rng.gauss());

        const auto single_once = [&] {
            Graph<T> g;
            build_forward(g, feats, L, params, false, false);
        };
        const auto sequential_once = [&] {
            for (std::size_t f = 0; f < L; ++f) {
                Mat<T> one(n, 6);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t c = 0; c < 6; ++c) one(i, c) = feats(f * n + i, c);
                Graph<T> g;
                build_forward(g, one, 1, vparams, false, false);
            }
        };

        for (int w = 0; w < 5; ++w) {
            single_once();
            sequential_once();
        }

        std::vector<double> single_ms, seq_ms;
        single_ms.reserve(reps);
        seq_ms.reserve(reps);
        for (std::size_t r = 0; r < reps; ++r) {
            auto t0 = clock::now();
            single_once();
            auto t1 = clock::now();
            sequential_once();
            auto t2 = clock::now();
            single_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            seq_ms.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
        }

        LatencyRow row;
        row.flows = L;
        row.single_shot = summarize_ms(single_ms);
        row.sequential = summarize_ms(seq_ms);
        rows.push_back(row);
    }
    return rows;
}

}  // namespace

std::vector<LatencyRow> latency_bench(const Checkpoint& ck, std::size_t flows_min,
                                      std::size_t flows_max, std::size_t repetitions,
                                      std::uint64_t seed) {
    if (ck.precision == 32)
        return latency_bench_impl<float>(ck, flows_min, flows_max, repetitions, seed);
    return latency_bench_impl<double>(ck, flows_min, flows_max, repetitions, seed);
}

}  // namespace p2p
