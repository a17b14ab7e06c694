#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "p2p/trainer.hpp"
#include "p2p/windowing.hpp"

namespace p2p {

// Standard regression metrics over the unmasked points. MAPE excludes
// targets with |y| < 1e-6 (stalled flows label 0) and reports how many were
// excluded. r2 is NaN when fewer than 2 points survive or the truth is
// constant (SST = 0) without a perfect fit.
struct RegressionMetrics {
    double rmse = 0.0;
    double mae = 0.0;
    double mape = 0.0;  // percent
    double r2 = std::numeric_limits<double>::quiet_NaN();
    std::size_t count = 0;          // unmasked points
    std::size_t mape_excluded = 0;  // near-zero targets left out of MAPE
};
RegressionMetrics regression_metrics(const std::vector<double>& pred,
                                     const std::vector<double>& truth,
                                     const std::vector<bool>& mask);

// Confusion at a probability threshold (p >= threshold predicts lossy).
// A class absent from the truth has recall and per-class F1 undefined
// (reported as NaN with the defined flag false); macro-F1 averages over the
// present classes only.
struct ClassificationMetrics {
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    double recall_0 = std::numeric_limits<double>::quiet_NaN();
    double recall_1 = std::numeric_limits<double>::quiet_NaN();
    bool recall_0_defined = false;
    bool recall_1_defined = false;
    double f1_class0 = std::numeric_limits<double>::quiet_NaN();
    double f1_class1 = std::numeric_limits<double>::quiet_NaN();
    double f1_macro = std::numeric_limits<double>::quiet_NaN();
    std::size_t count = 0;
};
ClassificationMetrics classification_metrics(const std::vector<double>& p_hat,
                                             const std::vector<bool>& truth,
                                             double threshold = 0.5);

// Metric suite for one split: per-task regression metrics plus the loss
// classification, and the sample bookkeeping.
struct EvalReport {
    RegressionMetrics bitrate;
    RegressionMetrics jitter;
    RegressionMetrics fps;
    ClassificationMetrics loss;
    std::size_t windows = 0;
    std::size_t samples = 0;
};

// Runs the checkpointed model over every window and scores predictions
// against the labels. Masks follow the dataset (jitter/fps per sample).
EvalReport evaluate(const Checkpoint& ck, const std::vector<WindowBatch>& dataset);

// Last-value baseline: each flow's window is predicted by that flow's
// previous window (labels carried forward); the first window of every flow
// is skipped. Masked points require both windows' labels to be valid.
struct PersistenceReport {
    RegressionMetrics bitrate;
    RegressionMetrics jitter;
    RegressionMetrics fps;
    ClassificationMetrics loss;
    std::size_t used = 0;     // scored samples
    std::size_t skipped = 0;  // first-window-per-flow samples
};
PersistenceReport persistence_baseline(const std::vector<WindowBatch>& dataset);

// Wall-time distribution of (a) one single-shot forward over an L-flow
// window versus (b) L sequential single-flow forwards in vanilla attention
// mode, per flow count. Inputs are synthetic standard-normal features;
// timings include graph construction, matching how inference runs.
struct LatencyStats {
    double median_ms = 0.0;
    double p95_ms = 0.0;
};
struct LatencyRow {
    std::size_t flows = 0;
    LatencyStats single_shot;
    LatencyStats sequential;
};
std::vector<LatencyRow> latency_bench(const Checkpoint& ck, std::size_t flows_min,
                                      std::size_t flows_max, std::size_t repetitions,
                                      std::uint64_t seed = 1);

}  // namespace p2p
