#include "p2p/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "p2p/graph.hpp"

namespace p2p {

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw UsageError("train config: lr must be positive");
    if (lr_decay_every_epochs <= 0)
        throw UsageError("train config: lr_decay_every_epochs must be positive");
    if (!(lr_decay_factor > 0.0) || lr_decay_factor > 1.0)
        throw UsageError("train config: lr_decay_factor must be in (0, 1]");
    if (batch_windows <= 0) throw UsageError("train config: batch_windows must be positive");
    if (epochs <= 0) throw UsageError("train config: epochs must be positive");
    if (precision != 32 && precision != 64)
        throw UsageError("train config: precision must be 32 or 64");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
        throw UsageError("train config: adam betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw UsageError("train config: adam_eps must be positive");
}

double TrainConfig::lr_for_epoch(int epoch) const {
    return lr * std::pow(lr_decay_factor, double(epoch / lr_decay_every_epochs));
}

SessionSplit split_sessions(std::size_t n_sessions, std::uint64_t seed) {
    if (n_sessions < 3)
        throw TooFewSessions("split_sessions: need at least 3 sessions, got " +
                             std::to_string(n_sessions));
    const auto share = [n_sessions](double frac) {
        const double raw = double(n_sessions) * frac;
        return std::max<std::size_t>(1, std::size_t(std::llround(raw)));
    };
    std::size_t n_val = share(10.0 / 71.0);
    std::size_t n_test = share(11.0 / 71.0);
    // Degenerate tiny counts: leave at least one training session.
    while (n_val + n_test + 1 > n_sessions) {
        if (n_test > 1)
            --n_test;
        else
            --n_val;
    }
    std::vector<std::size_t> order(n_sessions);
    std::iota(order.begin(), order.end(), std::size_t(0));
    Rng rng = Rng(seed).fork(0x5B117);
    rng.shuffle(order);

    SessionSplit out;
    std::size_t i = 0;
    for (std::size_t k = 0; k < n_sessions - n_val - n_test; ++k) out.train.push_back(order[i++]);
    for (std::size_t k = 0; k < n_val; ++k) out.val.push_back(order[i++]);
    for (std::size_t k = 0; k < n_test; ++k) out.test.push_back(order[i++]);
    return out;
}

FeatureNorm fit_feature_norm(const std::vector<WindowBatch>& split) {
    std::size_t rows = 0;
    for (const auto& b : split)
        for (const auto& s : b.samples) rows += s.features.rows();
    if (rows == 0) throw EmptySplit("fit_feature_norm: split has no feature rows");

    FeatureNorm norm;
    for (std::size_t c = 0; c < 6; ++c) {
        double sum = 0.0;
        for (const auto& b : split)
            for (const auto& s : b.samples)
                for (std::size_t i = 0; i < s.features.rows(); ++i) sum += s.features(i, c);
        const double mean = sum / double(rows);
        double sq = 0.0;
        for (const auto& b : split)
            for (const auto& s : b.samples)
                for (std::size_t i = 0; i < s.features.rows(); ++i) {
                    const double d = s.features(i, c) - mean;
                    sq += d * d;
                }
        norm.mean[c] = mean;
        norm.stdev[c] = std::max(std::sqrt(sq / double(rows)), 1e-8);
    }
    return norm;
}

PosWeight split_pos_weight(const std::vector<WindowBatch>& split) {
    std::size_t lossy = 0, lossless = 0;
    for (const auto& b : split)
        for (const auto& s : b.samples) (s.label_loss ? lossy : lossless)++;
    return compute_pos_weight(lossless, lossy);
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: little-endian binary, stable across platforms.

namespace {

constexpr char kMagic[8] = {'P', '2', 'P', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

struct Writer {
    std::string buf;
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void str(const std::string& s) {
        u32(std::uint32_t(s.size()));
        buf.append(s);
    }
};

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    explicit Reader(const std::string& b) : buf(b) {}
    void need(std::size_t n) const {
        if (pos + n > buf.size())
            throw TooShort("checkpoint: truncated at byte " + std::to_string(pos));
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

void put_mat(Writer& w, const Mat<double>& m) {
    w.u32(std::uint32_t(m.rows()));
    w.u32(std::uint32_t(m.cols()));
    for (std::size_t i = 0; i < m.size(); ++i) w.f64(m[i]);
}

Mat<double> get_mat(Reader& r) {
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (rows == 0 || cols == 0 || std::uint64_t(rows) * cols > (1u << 28))
        throw ShapeMismatch("checkpoint: implausible tensor shape " + std::to_string(rows) + "x" +
                            std::to_string(cols));
    Mat<double> m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = r.f64();
    return m;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    Writer w;
    w.buf.append(kMagic, 8);
    w.u32(kVersion);
    w.u32(std::uint32_t(ck.precision));

    const EncoderConfig& e = ck.encoder;
    w.u32(std::uint32_t(e.d_embed));
    w.u32(std::uint32_t(e.heads));
    w.u32(std::uint32_t(e.ffn_neurons));
    w.u32(std::uint32_t(e.neighbourhood_k));
    w.u32(std::uint32_t(e.n));
    w.u32(e.mode == AttentionMode::dual ? 0 : 1);
    w.f64(e.leaky_slope);
    w.f64(e.ln_eps);

    const TrainConfig& t = ck.train;
    w.f64(t.lr);
    w.u32(std::uint32_t(t.lr_decay_every_epochs));
    w.f64(t.lr_decay_factor);
    w.u32(std::uint32_t(t.batch_windows));
    w.u32(std::uint32_t(t.epochs));
    w.u64(t.seed);
    w.u32(std::uint32_t(t.precision));
    w.f64(t.adam_beta1);
    w.f64(t.adam_beta2);
    w.f64(t.adam_eps);

    for (double v : ck.norm.mean) w.f64(v);
    for (double v : ck.norm.stdev) w.f64(v);
    w.f64(ck.pos_weight);
    for (std::uint64_t v : ck.rng_state) w.u64(v);
    w.u64(ck.epochs_done);
    w.u64(ck.adam_t);
    w.f64(ck.val_loss);

    w.u32(std::uint32_t(ck.tensors.size()));
    for (const auto& entry : ck.tensors) {
        w.str(entry.name);
        put_mat(w, entry.value);
        put_mat(w, entry.adam_m);
        put_mat(w, entry.adam_v);
    }

    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw UnreadableFile("cannot open checkpoint for writing: " + path);
    const std::size_t written = std::fwrite(w.buf.data(), 1, w.buf.size(), f);
    std::fclose(f);
    if (written != w.buf.size())
        throw UnreadableFile("short write while saving checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw UnreadableFile("cannot open checkpoint: " + path);
    std::string buf;
    char chunk[65536];
    std::size_t got;
    while ((got = std::fread(chunk, 1, sizeof chunk, f)) > 0) buf.append(chunk, got);
    std::fclose(f);

    Reader r(buf);
    r.need(8);
    if (std::memcmp(buf.data(), kMagic, 8) != 0)
        throw BadVersion("checkpoint: bad magic in " + path);
    r.pos = 8;
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw BadVersion("checkpoint: unsupported version " + std::to_string(version));

    Checkpoint ck;
    ck.precision = int(r.u32());
    EncoderConfig& e = ck.encoder;
    e.d_embed = r.u32();
    e.heads = r.u32();
    e.ffn_neurons = r.u32();
    e.neighbourhood_k = r.u32();
    e.n = r.u32();
    e.mode = r.u32() == 0 ? AttentionMode::dual : AttentionMode::vanilla;
    e.leaky_slope = r.f64();
    e.ln_eps = r.f64();

    TrainConfig& t = ck.train;
    t.lr = r.f64();
    t.lr_decay_every_epochs = int(r.u32());
    t.lr_decay_factor = r.f64();
    t.batch_windows = int(r.u32());
    t.epochs = int(r.u32());
    t.seed = r.u64();
    t.precision = int(r.u32());
    t.adam_beta1 = r.f64();
    t.adam_beta2 = r.f64();
    t.adam_eps = r.f64();

    for (double& v : ck.norm.mean) v = r.f64();
    for (double& v : ck.norm.stdev) v = r.f64();
    ck.pos_weight = r.f64();
    for (std::uint64_t& v : ck.rng_state) v = r.u64();
    ck.epochs_done = r.u64();
    ck.adam_t = r.u64();
    ck.val_loss = r.f64();

    const std::uint32_t ntensors = r.u32();
    ck.tensors.reserve(ntensors);
    for (std::uint32_t i = 0; i < ntensors; ++i) {
        Checkpoint::Entry entry;
        entry.name = r.str();
        entry.value = get_mat(r);
        entry.adam_m = get_mat(r);
        entry.adam_v = get_mat(r);
        ck.tensors.push_back(std::move(entry));
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Training loop.

namespace {

template <typename T>
Checkpoint snapshot(const ModelParams<T>& params, const EncoderConfig& ecfg,
                    const TrainConfig& cfg, const FeatureNorm& norm, double pos_weight,
                    std::uint64_t epochs_done, std::uint64_t adam_t, double val_loss) {
    Checkpoint ck;
    ck.precision = cfg.precision;
    ck.encoder = ecfg;
    ck.train = cfg;
    ck.norm = norm;
    ck.pos_weight = pos_weight;
    ck.rng_state = Rng(cfg.seed).state();
    ck.epochs_done = epochs_done;
    ck.adam_t = adam_t;
    ck.val_loss = val_loss;
    store_params(ck, params);
    return ck;
}

template <typename T>
TrainResult train_impl(const std::vector<WindowBatch>& tr, const std::vector<WindowBatch>& va,
                       const EncoderConfig& ecfg, const TrainConfig& cfg,
                       const Checkpoint* resume, Checkpoint* on_diverge) {
    if (tr.empty()) throw EmptySplit("train: training split is empty");
    if (va.empty()) throw EmptySplit("train: validation split is empty");

    const FeatureNorm norm = resume ? resume->norm : fit_feature_norm(tr);
    const double pos_weight = resume ? resume->pos_weight : split_pos_weight(tr).value;

    ModelParams<T> params(ecfg);
    std::uint64_t adam_t = 0;
    int start_epoch = 0;
    if (resume) {
        load_params(params, *resume);
        adam_t = resume->adam_t;
        start_epoch = int(resume->epochs_done);
    } else {
        Rng init_rng = Rng(cfg.seed).fork(0x1217);
        params.init(init_rng);
    }

    const auto validate_loss = [&]() {
        double total = 0.0;
        for (const auto& b : va) {
            Graph<T> g;
            const Mat<T> feats = batch_features<T>(b, norm, ecfg.n);
            ModelGraph<T> mg = build_forward(g, feats, b.samples.size(), params, false, false);
            const WindowTargets<T> tgt = batch_targets<T>(b);
            const auto loss = build_loss(g, mg, tgt, params, T(pos_weight), false);
            total += double(g.val(loss)(0, 0));
        }
        return total / double(va.size());
    };

    TrainResult out;
    Checkpoint last_good =
        snapshot(params, ecfg, cfg, norm, pos_weight, std::uint64_t(start_epoch), adam_t,
                 std::numeric_limits<double>::infinity());
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t best_idx = 0;
    bool have_best = false;

    const auto diverge = [&](const std::string& what, double value) {
        if (on_diverge) *on_diverge = last_good;
        throw DivergedLoss("train: non-finite " + what + " (" + std::to_string(value) + ")");
    };

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr_for_epoch(epoch);
        std::vector<std::size_t> order(tr.size());
        std::iota(order.begin(), order.end(), std::size_t(0));
        Rng erng = Rng(cfg.seed).fork(0xE000 + std::uint64_t(epoch));
        erng.shuffle(order);

        double loss_sum = 0.0;
        std::array<double, 4> task_sum{};
        std::array<std::size_t, 4> task_cnt{};

        for (std::size_t base = 0; base < order.size();
             base += std::size_t(cfg.batch_windows)) {
            const std::size_t group =
                std::min<std::size_t>(std::size_t(cfg.batch_windows), order.size() - base);
            params.zero_grad();
            for (std::size_t gi = 0; gi < group; ++gi) {
                const WindowBatch& b = tr[order[base + gi]];
                Graph<T> g;
                const Mat<T> feats = batch_features<T>(b, norm, ecfg.n);
                ModelGraph<T> mg =
                    build_forward(g, feats, b.samples.size(), params, true, false);
                const WindowTargets<T> tgt = batch_targets<T>(b);
                TaskLossNodes<T> raw;
                const auto loss = build_loss(g, mg, tgt, params, T(pos_weight), true, &raw);
                g.backward(g.scale(loss, T(1.0 / double(group))));
                const double lv = double(g.val(loss)(0, 0));
                if (!std::isfinite(lv)) diverge("training loss", lv);
                loss_sum += lv;
                for (std::size_t t = 0; t < kNumTasks; ++t)
                    if (raw.present[t]) {
                        task_sum[t] += double(g.val(raw.node[t])(0, 0));
                        ++task_cnt[t];
                    }
            }
            ++adam_t;
            adam_step(params, cfg, lr, adam_t);
        }

        const double vloss = validate_loss();
        if (!std::isfinite(vloss)) diverge("validation loss", vloss);

        EpochLog el;
        el.epoch = epoch;
        el.lr = lr;
        el.train_total = loss_sum / double(tr.size());
        for (std::size_t t = 0; t < kNumTasks; ++t)
            el.train_task[t] = task_cnt[t] ? task_sum[t] / double(task_cnt[t]) : 0.0;
        el.val_total = vloss;
        out.log.push_back(el);

        last_good =
            snapshot(params, ecfg, cfg, norm, pos_weight, std::uint64_t(epoch) + 1, adam_t, vloss);
        if (vloss < best_val) {
            best_val = vloss;
            out.best = last_good;
            best_idx = out.log.size() - 1;
            have_best = true;
        }
    }

    if (!have_best) out.best = last_good;  // resume already past cfg.epochs
    if (!out.log.empty() && have_best) out.log[best_idx].best = true;
    return out;
}

}  // namespace

TrainResult train(const std::vector<WindowBatch>& train_split,
                  const std::vector<WindowBatch>& val_split, const EncoderConfig& ecfg,
                  const TrainConfig& cfg, const Checkpoint* resume, Checkpoint* on_diverge) {
    cfg.validate();
    ecfg.validate();
    if (cfg.precision == 32)
        return train_impl<float>(train_split, val_split, ecfg, cfg, resume, on_diverge);
    return train_impl<double>(train_split, val_split, ecfg, cfg, resume, on_diverge);
}

}  // namespace p2p
