#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "p2p/graph.hpp"
#include "p2p/rng.hpp"

namespace p2p {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t probes = 0;
};

// Central-difference check of a scalar loss built by f from parameter leaves.
// f receives a fresh Graph and one leaf per entry of params and must return a
// 1x1 node. Relative error per probe: |a-n| / max(1e-8, |a|+|n|). Probe
// points should sit away from kinks (LeakyReLU zero crossings, max-pool
// ties); the callers draw parameters continuously, which makes kink hits
// measure-zero events.
template <typename T, typename F>
GradCheckReport grad_check(F&& f, std::vector<Mat<T>> params, double eps = 1e-5,
                           std::size_t max_probes = static_cast<std::size_t>(-1),
                           Rng* rng = nullptr) {
    std::vector<Mat<T>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.emplace_back(p.rows(), p.cols());

    auto eval = [&](bool with_grad) -> double {
        Graph<T> g;
        std::vector<typename Graph<T>::NodeId> ids(params.size());
        for (std::size_t i = 0; i < params.size(); ++i)
            ids[i] = g.param(params[i], with_grad ? &grads[i] : nullptr);
        const auto root = f(g, ids);
        if (with_grad) g.backward(root);
        return double(g.val(root)[0]);
    };
    eval(true);

    std::size_t total = 0;
    for (const auto& p : params) total += p.size();

    std::vector<std::pair<std::size_t, std::size_t>> probes;
    if (total <= max_probes) {
        for (std::size_t i = 0; i < params.size(); ++i)
            for (std::size_t j = 0; j < params[i].size(); ++j) probes.emplace_back(i, j);
    } else {
        Rng fallback(0x9e3779b97f4a7c15ULL);
        Rng& r = rng ? *rng : fallback;
        for (std::size_t p = 0; p < max_probes; ++p) {
            std::size_t flat = r.below(total);
            std::size_t i = 0;
            while (flat >= params[i].size()) flat -= params[i++].size();
            probes.emplace_back(i, flat);
        }
    }

    GradCheckReport report;
    report.probes = probes.size();
    for (const auto& [i, j] : probes) {
        const T saved = params[i][j];
        params[i][j] = saved + static_cast<T>(eps);
        const double fp = eval(false);
        params[i][j] = saved - static_cast<T>(eps);
        const double fm = eval(false);
        params[i][j] = saved;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double analytic = double(grads[i][j]);
        const double denom = std::max(1e-8, std::abs(analytic) + std::abs(numeric));
        const double rel = std::abs(analytic - numeric) / denom;
        if (rel > report.max_rel_err) report.max_rel_err = rel;
    }
    return report;
}

}  // namespace p2p
