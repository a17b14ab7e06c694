// p2p: packet-to-prediction pipeline entry point.
//
// Subcommands: ingest, dataset, synth, train, eval, predict, bench, selftest.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <algorithm>
#include <cctype>
#include <cinttypes>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "p2p/errors.hpp"
#include "p2p/eval.hpp"
#include "p2p/gradcheck.hpp"
#include "p2p/ingest.hpp"
#include "p2p/ini.hpp"
#include "p2p/model.hpp"
#include "p2p/synth.hpp"
#include "p2p/trainer.hpp"
#include "p2p/windowing.hpp"

namespace {

using nlohmann::json;
using namespace p2p;

// ---------------------------------------------------------------------------
// Logging

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, quiet = 4 };
LogLevel g_log_level = LogLevel::info;

void logmsg(LogLevel lvl, const char* fmt, ...) {
    if (lvl < g_log_level) return;
    static const char* names[] = {"debug", "info", "warn", "error"};
    std::fprintf(stderr, "p2p %s: ", names[int(lvl)]);
    va_list ap;
    va_start(ap, fmt);
    std::vfprintf(stderr, fmt, ap);
    va_end(ap);
    std::fputc('\n', stderr);
}

LogLevel parse_log_level(const std::string& s) {
    if (s == "debug") return LogLevel::debug;
    if (s == "info") return LogLevel::info;
    if (s == "warn") return LogLevel::warn;
    if (s == "error") return LogLevel::error;
    if (s == "quiet") return LogLevel::quiet;
    throw UsageError("unknown log level '" + s + "' (debug|info|warn|error|quiet)");
}

// ---------------------------------------------------------------------------
// Configuration: defaults <- config file <- explicit CLI flags.

struct GlobalConfig {
    WindowingConfig windowing = WindowingConfig::defaults();
    EncoderConfig encoder;
    TrainConfig train;
    std::string log_level = "info";
};

std::uint64_t cfg_u64(const IniEntry& e) {
    try {
        std::size_t used = 0;
        const std::uint64_t v = std::stoull(e.value, &used);
        if (used != e.value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw UsageError("config line " + std::to_string(e.line) + ": '" + e.key +
                         "' expects an unsigned integer, got '" + e.value + "'");
    }
}

double cfg_num(const IniEntry& e) {
    try {
        std::size_t used = 0;
        const double v = std::stod(e.value, &used);
        if (used != e.value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw UsageError("config line " + std::to_string(e.line) + ": '" + e.key +
                         "' expects a number, got '" + e.value + "'");
    }
}

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

void apply_config_entry(GlobalConfig& cfg, const IniEntry& e) {
    const auto unknown = [&]() -> UsageError {
        return UsageError("config line " + std::to_string(e.line) + ": unknown key '" + e.key +
                          "' in section [" + e.section + "]");
    };
    if (e.key.empty()) {  // bare section header
        if (e.section != "windowing" && e.section != "encoder" && e.section != "train")
            throw UsageError("config line " + std::to_string(e.line) + ": unknown section [" +
                             e.section + "]");
        return;
    }
    if (e.section.empty()) {
        if (e.key == "log_level") {
            cfg.log_level = e.value;
            return;
        }
        throw unknown();
    }
    if (e.section == "windowing") {
        WindowingConfig& w = cfg.windowing;
        if (e.key == "window_ms")
            w.window_ms = cfg_num(e);
        else if (e.key == "history_packets")
            w.history_packets = std::size_t(cfg_u64(e));
        else if (e.key == "per_flow_packets")
            w.per_flow_packets = std::size_t(cfg_u64(e));
        else if (e.key == "staleness_s")
            w.staleness_s = cfg_num(e);
        else if (e.key == "clock_rates") {
            w.clock_rates.clear();
            for (const std::string& item : split_list(e.value, ',')) {
                if (item.empty()) continue;
                const auto colon = item.find(':');
                if (colon == std::string::npos)
                    throw UsageError("config line " + std::to_string(e.line) +
                                     ": clock_rates items are 'payload_type:hz'");
                IniEntry pt{e.section, e.key, item.substr(0, colon), e.line};
                IniEntry hz{e.section, e.key, item.substr(colon + 1), e.line};
                w.clock_rates[int(cfg_u64(pt))] = cfg_num(hz);
            }
        } else if (e.key == "video_payload_types") {
            w.video_payload_types.clear();
            for (const std::string& item : split_list(e.value, ',')) {
                if (item.empty()) continue;
                IniEntry pt{e.section, e.key, item, e.line};
                w.video_payload_types.insert(int(cfg_u64(pt)));
            }
        } else {
            throw unknown();
        }
        return;
    }
    if (e.section == "encoder") {
        EncoderConfig& m = cfg.encoder;
        if (e.key == "d_embed")
            m.d_embed = std::size_t(cfg_u64(e));
        else if (e.key == "heads")
            m.heads = std::size_t(cfg_u64(e));
        else if (e.key == "ffn_neurons")
            m.ffn_neurons = std::size_t(cfg_u64(e));
        else if (e.key == "neighbourhood_k")
            m.neighbourhood_k = std::size_t(cfg_u64(e));
        else if (e.key == "n")
            m.n = std::size_t(cfg_u64(e));
        else if (e.key == "mode") {
            if (e.value == "dual")
                m.mode = AttentionMode::dual;
            else if (e.value == "vanilla")
                m.mode = AttentionMode::vanilla;
            else
                throw UsageError("config line " + std::to_string(e.line) +
                                 ": mode must be dual or vanilla");
        } else if (e.key == "leaky_slope")
            m.leaky_slope = cfg_num(e);
        else if (e.key == "ln_eps")
            m.ln_eps = cfg_num(e);
        else
            throw unknown();
        return;
    }
    if (e.section == "train") {
        TrainConfig& t = cfg.train;
        if (e.key == "lr")
            t.lr = cfg_num(e);
        else if (e.key == "lr_decay_every_epochs")
            t.lr_decay_every_epochs = int(cfg_u64(e));
        else if (e.key == "lr_decay_factor")
            t.lr_decay_factor = cfg_num(e);
        else if (e.key == "batch_windows")
            t.batch_windows = int(cfg_u64(e));
        else if (e.key == "epochs")
            t.epochs = int(cfg_u64(e));
        else if (e.key == "seed")
            t.seed = cfg_u64(e);
        else if (e.key == "precision")
            t.precision = int(cfg_u64(e));
        else if (e.key == "adam_beta1")
            t.adam_beta1 = cfg_num(e);
        else if (e.key == "adam_beta2")
            t.adam_beta2 = cfg_num(e);
        else if (e.key == "adam_eps")
            t.adam_eps = cfg_num(e);
        else
            throw unknown();
        return;
    }
    throw UsageError("config line " + std::to_string(e.line) + ": unknown section [" + e.section +
                     "]");
}

GlobalConfig load_config(const std::string& path) {
    GlobalConfig cfg;
    if (!path.empty())
        for (const IniEntry& e : parse_ini_file(path)) apply_config_entry(cfg, e);
    return cfg;
}

// ---------------------------------------------------------------------------
// Shared helpers

// Capture files are detected by magic; anything else is read as the CSV
// packet-log format.
std::vector<PacketRecord> load_records(const std::string& path, bool udp_only,
                                       IngestStats* stats = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw UnreadableFile("cannot open input: " + path);
    std::uint8_t m[4] = {0, 0, 0, 0};
    in.read(reinterpret_cast<char*>(m), 4);
    in.close();
    const std::uint32_t be = std::uint32_t(m[0]) << 24 | std::uint32_t(m[1]) << 16 |
                             std::uint32_t(m[2]) << 8 | std::uint32_t(m[3]);
    const bool is_capture = be == 0xA1B2C3D4u || be == 0xD4C3B2A1u || be == 0xA1B23C4Du ||
                            be == 0x4D3CB2A1u || be == 0x0A0D0D0Au;
    if (is_capture) return ingest_pcap(path, udp_only, stats);
    return read_packet_log(path);
}

// A dataset argument may be one file or a directory of one dataset per
// session; directory entries are sorted by filename for stable session ids.
std::vector<std::string> dataset_files(const std::string& path) {
    namespace fs = std::filesystem;
    if (fs::is_directory(path)) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(path))
            if (entry.is_regular_file() && entry.path().extension() == ".jsonl")
                files.push_back(entry.path().string());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw UnreadableFile("no .jsonl dataset files in " + path);
        return files;
    }
    if (fs::is_regular_file(path)) return {path};
    throw UnreadableFile("dataset path does not exist: " + path);
}

json jnum(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json regression_json(const RegressionMetrics& m) {
    return json{{"rmse", jnum(m.rmse)},   {"mae", jnum(m.mae)},
                {"mape_pct", jnum(m.mape)}, {"r2", jnum(m.r2)},
                {"count", m.count},       {"mape_excluded", m.mape_excluded}};
}

json classification_json(const ClassificationMetrics& m) {
    return json{{"recall_0", jnum(m.recall_0)},
                {"recall_1", jnum(m.recall_1)},
                {"f1_class0", jnum(m.f1_class0)},
                {"f1_class1", jnum(m.f1_class1)},
                {"f1_macro", jnum(m.f1_macro)},
                {"confusion", json{{"tp", m.tp}, {"tn", m.tn}, {"fp", m.fp}, {"fn", m.fn}}},
                {"count", m.count}};
}

json encoder_json(const EncoderConfig& e) {
    return json{{"d_embed", e.d_embed},
                {"heads", e.heads},
                {"ffn_neurons", e.ffn_neurons},
                {"neighbourhood_k", e.neighbourhood_k},
                {"n", e.n},
                {"mode", attention_mode_name(e.mode)},
                {"leaky_slope", e.leaky_slope},
                {"ln_eps", e.ln_eps}};
}

json train_json(const TrainConfig& t) {
    return json{{"lr", t.lr},
                {"lr_decay_every_epochs", t.lr_decay_every_epochs},
                {"lr_decay_factor", t.lr_decay_factor},
                {"batch_windows", t.batch_windows},
                {"epochs", t.epochs},
                {"seed", t.seed},
                {"precision", t.precision},
                {"adam_beta1", t.adam_beta1},
                {"adam_beta2", t.adam_beta2},
                {"adam_eps", t.adam_eps}};
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out.good()) throw UnreadableFile("cannot open for writing: " + path);
    out << text;
    if (!out.good()) throw UnreadableFile("short write: " + path);
}

// ---------------------------------------------------------------------------
// Commands

struct IngestArgs {
    std::string input, output;
    bool udp_only = false;
};

int cmd_ingest(const IngestArgs& a) {
    IngestStats stats;
    const std::vector<PacketRecord> records = load_records(a.input, a.udp_only, &stats);
    write_packet_log(records, a.output);
    if (stats.frames_total > 0)
        logmsg(LogLevel::info,
               "capture: %zu frames, %zu accepted RTP, %zu non-UDP, %zu non-RTP, %zu RTCP",
               stats.frames_total, stats.accepted, stats.non_udp, stats.not_rtp,
               stats.rtcp_excluded);
    logmsg(LogLevel::info, "wrote %zu packets to %s", records.size(), a.output.c_str());
    return 0;
}

struct DatasetArgs {
    std::string input, output;
};

int cmd_dataset(const DatasetArgs& a, const GlobalConfig& cfg) {
    cfg.windowing.validate();
    const std::vector<PacketRecord> records = load_records(a.input, false);
    const std::vector<WindowBatch> batches = build_dataset(records, cfg.windowing);
    std::size_t samples = 0;
    for (const auto& b : batches) samples += b.samples.size();
    write_dataset(batches, cfg.windowing.per_flow_packets, a.output);
    logmsg(LogLevel::info, "dataset: %zu packets -> %zu windows, %zu flow samples -> %s",
           records.size(), batches.size(), samples, a.output.c_str());
    return 0;
}

struct SynthArgs {
    std::string scenario, out, truth;
    double benchmark_s = 0.0;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

int cmd_synth(const SynthArgs& a, const GlobalConfig& cfg) {
    SynthScenario sc;
    if (!a.scenario.empty()) {
        sc = parse_scenario_file(a.scenario);
        if (a.seed_set) sc.seed = a.seed;
    } else {
        sc = default_benchmark_scenario(a.benchmark_s, a.seed_set ? a.seed : 1);
    }
    sc.finalize();
    const auto [records, truth] = generate(sc, cfg.windowing);
    write_packet_log(records, a.out);
    logmsg(LogLevel::info, "synth: %zu flows, %zu packets, %zu truth windows, seed %" PRIu64,
           sc.flows.size(), records.size(), truth.num_windows, sc.seed);
    if (!a.truth.empty()) {
        write_truth(truth, a.truth);
        logmsg(LogLevel::info, "synth: ground truth -> %s", a.truth.c_str());
    }
    return 0;
}

struct TrainArgs {
    std::string dataset, out, resume;
};

int cmd_train(const TrainArgs& a, GlobalConfig& cfg) {
    cfg.train.validate();
    cfg.encoder.validate();
    if (cfg.encoder.n != cfg.windowing.per_flow_packets)
        throw UsageError("encoder n (" + std::to_string(cfg.encoder.n) +
                         ") must equal windowing per_flow_packets (" +
                         std::to_string(cfg.windowing.per_flow_packets) + ")");

    const std::vector<std::string> files = dataset_files(a.dataset);
    std::vector<std::vector<WindowBatch>> sessions;
    sessions.reserve(files.size());
    for (const std::string& f : files)
        sessions.push_back(read_dataset(f, cfg.windowing.per_flow_packets));

    const SessionSplit split = split_sessions(sessions.size(), cfg.train.seed);
    std::vector<WindowBatch> tr, va;
    for (std::size_t i : split.train)
        tr.insert(tr.end(), sessions[i].begin(), sessions[i].end());
    for (std::size_t i : split.val)
        va.insert(va.end(), sessions[i].begin(), sessions[i].end());
    logmsg(LogLevel::info,
           "train: %zu sessions -> %zu train / %zu val / %zu test; %zu train windows, %zu val",
           sessions.size(), split.train.size(), split.val.size(), split.test.size(), tr.size(),
           va.size());

    Checkpoint resume_ck;
    const Checkpoint* resume = nullptr;
    if (!a.resume.empty()) {
        resume_ck = load_checkpoint(a.resume);
        const EncoderConfig& r = resume_ck.encoder;
        if (r.d_embed != cfg.encoder.d_embed || r.heads != cfg.encoder.heads ||
            r.ffn_neurons != cfg.encoder.ffn_neurons ||
            r.neighbourhood_k != cfg.encoder.neighbourhood_k || r.n != cfg.encoder.n)
            throw UsageError("resume checkpoint encoder shape differs from the configured model");
        resume = &resume_ck;
        logmsg(LogLevel::info, "train: resuming after %" PRIu64 " epochs from %s",
               resume_ck.epochs_done, a.resume.c_str());
    }

    Checkpoint rescue;
    TrainResult res;
    try {
        res = train(tr, va, cfg.encoder, cfg.train, resume, &rescue);
    } catch (const DivergedLoss&) {
        if (!rescue.tensors.empty()) {
            save_checkpoint(rescue, a.out);
            logmsg(LogLevel::error, "training diverged; last good checkpoint (epoch %" PRIu64
                                    ") saved to %s",
                   rescue.epochs_done, a.out.c_str());
        }
        throw;
    }

    for (const EpochLog& el : res.log)
        logmsg(LogLevel::info,
               "epoch %d lr %.1e total %.5f (bitrate %.5f jitter %.5f fps %.5f bce %.5f) val "
               "%.5f%s",
               el.epoch, el.lr, el.train_total, el.train_task[kBitrate], el.train_task[kJitter],
               el.train_task[kFps], el.train_task[kLoss], el.val_total, el.best ? " *" : "");
    save_checkpoint(res.best, a.out);
    logmsg(LogLevel::info, "train: best val %.5f after epoch %" PRIu64 " -> %s",
           res.best.val_loss, res.best.epochs_done, a.out.c_str());
    return 0;
}

struct EvalArgs {
    std::string ckpt, dataset, report, split = "test";
};

int cmd_eval(const EvalArgs& a) {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    const std::vector<std::string> files = dataset_files(a.dataset);
    std::vector<std::vector<WindowBatch>> sessions;
    for (const std::string& f : files) sessions.push_back(read_dataset(f, ck.encoder.n));

    std::vector<WindowBatch> windows;
    std::size_t session_count = 0;
    if (a.split == "all") {
        for (const auto& s : sessions) windows.insert(windows.end(), s.begin(), s.end());
        session_count = sessions.size();
    } else {
        // The split is derived from the checkpoint's seed, so "test" selects
        // the sessions training never saw.
        const SessionSplit split = split_sessions(sessions.size(), ck.train.seed);
        const std::vector<std::size_t>* pick = nullptr;
        if (a.split == "train")
            pick = &split.train;
        else if (a.split == "val")
            pick = &split.val;
        else if (a.split == "test")
            pick = &split.test;
        else
            throw UsageError("--split must be train, val, test, or all");
        for (std::size_t i : *pick)
            windows.insert(windows.end(), sessions[i].begin(), sessions[i].end());
        session_count = pick->size();
    }

    const EvalReport model = evaluate(ck, windows);
    const PersistenceReport base = persistence_baseline(windows);

    json report{
        {"format", "p2p-eval-report"},
        {"version", 1},
        {"split", a.split},
        {"sessions", session_count},
        {"windows", model.windows},
        {"samples", model.samples},
        {"model",
         {{"bitrate", regression_json(model.bitrate)},
          {"jitter", regression_json(model.jitter)},
          {"fps", regression_json(model.fps)},
          {"loss", classification_json(model.loss)}}},
        {"persistence",
         {{"bitrate", regression_json(base.bitrate)},
          {"jitter", regression_json(base.jitter)},
          {"fps", regression_json(base.fps)},
          {"loss", classification_json(base.loss)},
          {"used", base.used},
          {"skipped", base.skipped}}},
        {"checkpoint",
         {{"precision", ck.precision},
          {"epochs_done", ck.epochs_done},
          {"val_loss", jnum(ck.val_loss)},
          {"pos_weight", ck.pos_weight},
          {"encoder", encoder_json(ck.encoder)},
          {"train", train_json(ck.train)}}},
    };
    write_text(a.report, report.dump(2) + "\n");

    const auto line = [](const char* name, const RegressionMetrics& m, const RegressionMetrics& p) {
        std::printf("%-8s rmse %9.5f mae %9.5f mape %8.3f%% r2 %8.5f | persistence mae %9.5f\n",
                    name, m.rmse, m.mae, m.mape, m.r2, p.mae);
    };
    std::printf("split %s: %zu sessions, %zu windows, %zu samples\n", a.split.c_str(),
                session_count, model.windows, model.samples);
    line("bitrate", model.bitrate, base.bitrate);
    line("jitter", model.jitter, base.jitter);
    line("fps", model.fps, base.fps);
    std::printf("loss     recall_0 %.4f recall_1 %.4f f1_macro %.4f | persistence recall_1 %.4f\n",
                model.loss.recall_0, model.loss.recall_1, model.loss.f1_macro,
                base.loss.recall_1);
    logmsg(LogLevel::info, "eval: report -> %s", a.report.c_str());
    return 0;
}

struct BenchArgs {
    std::string ckpt, flows = "1..11", report;
    std::size_t reps = 200;
    std::uint64_t seed = 1;
};

int cmd_bench(const BenchArgs& a) {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    const auto dots = a.flows.find("..");
    std::size_t lo = 0, hi = 0;
    try {
        if (dots == std::string::npos) {
            lo = hi = std::stoul(a.flows);
        } else {
            lo = std::stoul(a.flows.substr(0, dots));
            hi = std::stoul(a.flows.substr(dots + 2));
        }
    } catch (const std::exception&) {
        throw UsageError("--flows expects N or LO..HI, got '" + a.flows + "'");
    }

    const std::vector<LatencyRow> rows = latency_bench(ck, lo, hi, a.reps, a.seed);
    std::printf("flows  single-shot ms (med/p95)  sequential ms (med/p95)  speedup\n");
    json jrows = json::array();
    for (const LatencyRow& r : rows) {
        const double speedup = r.sequential.median_ms / r.single_shot.median_ms;
        std::printf("%5zu  %11.3f / %-9.3f  %10.3f / %-9.3f  %6.2fx\n", r.flows,
                    r.single_shot.median_ms, r.single_shot.p95_ms, r.sequential.median_ms,
                    r.sequential.p95_ms, speedup);
        jrows.push_back(json{{"flows", r.flows},
                             {"single_shot_ms",
                              {{"median", r.single_shot.median_ms}, {"p95", r.single_shot.p95_ms}}},
                             {"sequential_ms",
                              {{"median", r.sequential.median_ms}, {"p95", r.sequential.p95_ms}}},
                             {"speedup", speedup}});
    }
    if (!a.report.empty()) {
        json report{{"format", "p2p-bench-report"},
                    {"version", 1},
                    {"reps", a.reps},
                    {"encoder", encoder_json(ck.encoder)},
                    {"rows", jrows}};
        write_text(a.report, report.dump(2) + "\n");
        logmsg(LogLevel::info, "bench: report -> %s", a.report.c_str());
    }
    return 0;
}

struct PredictArgs {
    std::string ckpt, input, dump_attention;
    double at = 0.0;
    double threshold = 0.5;
};

template <typename T>
void run_predict(const Checkpoint& ck, const WindowBatch& batch, const PredictArgs& a) {
    ModelParams<T> params(ck.encoder);
    load_params(params, ck);
    Graph<T> g;
    const Mat<T> feats = batch_features<T>(batch, ck.norm, ck.encoder.n);
    const bool want_attention = !a.dump_attention.empty();
    const ModelGraph<T> mg =
        build_forward(g, feats, batch.samples.size(), params, false, want_attention);

    for (std::size_t f = 0; f < batch.samples.size(); ++f) {
        const WindowSample& s = batch.samples[f];
        const double p_loss = double(g.val(mg.p_loss)(f, 0));
        json rec{{"at", a.at},
                 {"flow", s.flow.str()},
                 {"ssrc", s.flow.ssrc},
                 {"payload_type", s.flow.payload_type},
                 {"bitrate_mbps", double(g.val(mg.task_out[kBitrate])(f, 0))},
                 {"jitter_ms", double(g.val(mg.task_out[kJitter])(f, 0))},
                 {"fps", s.fps_mask ? json(double(g.val(mg.task_out[kFps])(f, 0))) : json(nullptr)},
                 {"p_loss", p_loss},
                 {"lossy", p_loss >= a.threshold}};
        std::printf("%s\n", rec.dump().c_str());
    }

    if (want_attention) {
        json flows = json::array();
        for (const auto& s : batch.samples) flows.push_back(s.flow.str());
        json heads = json::array();
        for (std::size_t h = 0; h < mg.attn_weights.size(); ++h) {
            const Mat<T>& W = g.val(mg.attn_weights[h]);
            json wj = json::array();
            for (std::size_t i = 0; i < W.rows(); ++i) {
                json row = json::array();
                for (std::size_t j = 0; j < W.cols(); ++j) row.push_back(double(W(i, j)));
                wj.push_back(std::move(row));
            }
            json inj = json::array();
            if (h < mg.injected.size())
                for (const T v : mg.injected[h]) inj.push_back(double(v));
            heads.push_back(json{{"weights", std::move(wj)}, {"injected", std::move(inj)}});
        }
        // weights rows are the L stacked n x n diagonal blocks post-softmax;
        // injected is flat over (flow f, other flow g != f, row i).
        json dump{{"format", "p2p-attention"},
                  {"version", 1},
                  {"at", a.at},
                  {"n", ck.encoder.n},
                  {"flows", std::move(flows)},
                  {"mode", attention_mode_name(ck.encoder.mode)},
                  {"weights_layout", "per head: (n*L) x n, rows [f*n,(f+1)*n) are flow f's block"},
                  {"injected_layout", "per head: flat (f, g != f, i) max-pooled logits"},
                  {"heads", std::move(heads)}};
        write_text(a.dump_attention, dump.dump() + "\n");
        logmsg(LogLevel::info, "predict: attention dump -> %s", a.dump_attention.c_str());
    }
}

int cmd_predict(const PredictArgs& a, const GlobalConfig& cfg) {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    WindowingConfig wcfg = cfg.windowing;
    if (wcfg.per_flow_packets != ck.encoder.n) {
        logmsg(LogLevel::warn, "per_flow_packets %zu overridden by checkpoint n=%zu",
               wcfg.per_flow_packets, ck.encoder.n);
        wcfg.per_flow_packets = ck.encoder.n;
    }
    wcfg.validate();

    const std::vector<PacketRecord> records = load_records(a.input, false);
    const std::vector<FlowKey> keys = active_flows(records, a.at, wcfg);
    if (keys.empty())
        throw NoActiveFlows("no active flows at t=" + format_seconds(a.at) +
                            " (need >= " + std::to_string(wcfg.per_flow_packets) +
                            " packets per flow in the preceding " +
                            std::to_string(wcfg.history_packets) + ")");

    // Gather each active flow's feature packets: its last per_flow_packets
    // packets before t, matching the dataset builder's selection.
    std::map<FlowKey, std::vector<const PacketRecord*>> per_flow;
    for (const PacketRecord& r : records) {
        if (r.arrival_time >= a.at) break;
        FlowKey k;
        k.ip_src = r.ip_src;
        k.ip_dst = r.ip_dst;
        k.port_src = r.port_src;
        k.port_dst = r.port_dst;
        k.ssrc = r.ssrc;
        k.payload_type = r.payload_type;
        per_flow[k].push_back(&r);
    }

    WindowBatch batch;
    batch.window_start = a.at;
    for (const FlowKey& k : keys) {
        auto& pkts = per_flow[k];
        std::vector<const PacketRecord*> tail(pkts.end() - long(wcfg.per_flow_packets),
                                              pkts.end());
        WindowSample s;
        s.flow = k;
        s.features = build_features(tail, wcfg);
        s.fps_mask = wcfg.is_video(k.payload_type);
        s.jitter_mask = wcfg.clock_rate_for(k.payload_type) > 0.0;
        s.window_start = a.at;
        batch.samples.push_back(std::move(s));
    }
    logmsg(LogLevel::info, "predict: %zu active flows at t=%s", batch.samples.size(),
           format_seconds(a.at).c_str());

    if (ck.precision == 32)
        run_predict<float>(ck, batch, a);
    else
        run_predict<double>(ck, batch, a);
    return 0;
}

// ---------------------------------------------------------------------------
// selftest

struct SelfTest {
    int failed = 0;
    int ran = 0;
    void check(const char* name, bool ok, const std::string& detail = "") {
        ++ran;
        if (!ok) ++failed;
        std::printf("selftest: %-38s %s%s%s\n", name, ok ? "ok" : "FAIL",
                    detail.empty() ? "" : "  ", detail.c_str());
    }
};

EncoderConfig selftest_encoder(AttentionMode mode) {
    EncoderConfig e;
    e.d_embed = 8;
    e.heads = 2;
    e.ffn_neurons = 16;
    e.neighbourhood_k = 2;
    e.n = 8;
    e.mode = mode;
    return e;
}

// Central-difference check of the full model loss at a perturbed parameter
// point (the structured init parks head units on the LeakyReLU kink).
double model_grad_check(AttentionMode mode, std::size_t probes) {
    // Seeds pick generic parameter points: central differences are
    // meaningless within eps of a LeakyReLU or max-pool kink.
    const EncoderConfig cfg = selftest_encoder(mode);
    Rng rng(mode == AttentionMode::dual ? 20260821 : 20260823);
    Mat<double> features(16, 6);
    for (std::size_t i = 0; i < features.size(); ++i) features[i] = rng.uniform(-1.0, 1.0);
    WindowTargets<double> tgt;
    for (std::size_t t = 0; t < kNumTasks; ++t) {
        tgt.y[t] = Mat<double>(2, 1);
        for (std::size_t i = 0; i < 2; ++i) tgt.y[t][i] = rng.uniform(0.5, 2.0);
        tgt.mask[t] = Mat<double>(2, 1, 1.0);
    }
    tgt.y[kLoss](0, 0) = 1.0;
    tgt.y[kLoss](1, 0) = 0.0;
    tgt.mask[kFps](1, 0) = 0.0;

    ModelParams<double> params(cfg);
    params.init(rng);
    for (auto& t : params.tensors())
        for (std::size_t i = 0; i < t.value.size(); ++i) t.value[i] += rng.uniform(-0.3, 0.3);
    std::vector<Mat<double>> values;
    for (auto& t : params.tensors()) values.push_back(t.value);

    const auto eval_loss = [&](const std::vector<Mat<double>>& vals, bool with_grad) {
        for (std::size_t i = 0; i < vals.size(); ++i) params.tensors()[i].value = vals[i];
        if (with_grad) params.zero_grad();
        Graph<double> g;
        const ModelGraph<double> mg = build_forward(g, features, 2, params, with_grad);
        const auto loss = build_loss(g, mg, tgt, params, 3.0, with_grad);
        if (with_grad) g.backward(loss);
        return g.val(loss)(0, 0);
    };
    eval_loss(values, true);
    std::vector<Mat<double>> grads;
    for (auto& t : params.tensors()) grads.push_back(t.grad);

    std::size_t total = 0;
    for (const auto& m : values) total += m.size();
    Rng probe_rng(99);
    double max_rel = 0.0;
    const double eps = 1e-5;
    for (std::size_t p = 0; p < probes; ++p) {
        std::size_t flat = probe_rng.below(total);
        std::size_t ti = 0;
        while (flat >= values[ti].size()) flat -= values[ti++].size();
        auto probe = values;
        probe[ti][flat] += eps;
        const double fp = eval_loss(probe, false);
        probe[ti][flat] -= 2 * eps;
        const double fm = eval_loss(probe, false);
        const double numeric = (fp - fm) / (2 * eps);
        const double analytic = grads[ti][flat];
        const double rel = std::abs(analytic - numeric) /
                           std::max(1e-8, std::abs(analytic) + std::abs(numeric));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

int cmd_selftest(bool grad_only) {
    SelfTest st;
    char buf[64];

    // Gradient checks (always run; these catch a corrupted backward pass).
    {
        const double rel = model_grad_check(AttentionMode::dual, 120);
        std::snprintf(buf, sizeof buf, "max rel err %.2e", rel);
        st.check("gradients: dual-attention model", rel < 1e-4, buf);
    }
    {
        const double rel = model_grad_check(AttentionMode::vanilla, 60);
        std::snprintf(buf, sizeof buf, "max rel err %.2e", rel);
        st.check("gradients: vanilla-attention model", rel < 1e-4, buf);
    }
    {
        Rng rng(7);
        Mat<double> x(3, 5);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.gauss();
        const auto rep = grad_check<double>(
            [](Graph<double>& g, const std::vector<Graph<double>::NodeId>& ids) {
                return g.mean_all(g.mul_elem(g.row_max_pool(ids[0]), g.row_max_pool(ids[0])));
            },
            {x});
        std::snprintf(buf, sizeof buf, "max rel err %.2e", rep.max_rel_err);
        st.check("gradients: row_max_pool", rep.max_rel_err < 1e-6, buf);
    }

    if (!grad_only) {
        {
            // Band mask cardinality at the production size.
            const auto mask = neighbourhood_mask<double>(128, 32);
            bool ok = true;
            for (std::size_t i = 0; i < 128 && ok; ++i) {
                double sum = 0;
                for (std::size_t j = 0; j < 128; ++j) sum += (*mask)(i, j);
                const double want =
                    double(std::min<std::size_t>(i, 32) + std::min<std::size_t>(127 - i, 32) + 1);
                ok = sum == want;
            }
            st.check("mask: neighbourhood cardinality n=128 k=32", ok);
        }
        {
            // Vanilla mode isolates flows: two flows together equal each alone.
            const EncoderConfig cfg = selftest_encoder(AttentionMode::vanilla);
            Rng rng(3);
            ModelParams<double> params(cfg);
            params.init(rng);
            Mat<double> two(16, 6);
            for (std::size_t i = 0; i < two.size(); ++i) two[i] = rng.gauss();
            Graph<double> g;
            const auto both = build_forward(g, two, 2, params, false);
            Mat<double> solo(8, 6);
            for (std::size_t i = 0; i < 8; ++i)
                for (std::size_t c = 0; c < 6; ++c) solo(i, c) = two(8 + i, c);
            const auto alone = build_forward(g, solo, 1, params, false);
            double diff = 0;
            for (std::size_t j = 0; j < 8; ++j)
                diff = std::max(diff, std::abs(g.val(both.encodings)(1, j) -
                                               g.val(alone.encodings)(0, j)));
            std::snprintf(buf, sizeof buf, "max diff %.2e", diff);
            st.check("attention: vanilla flow isolation", diff < 1e-12, buf);
        }
        {
            // RFC 3550 running jitter oracle.
            JitterEstimator est;
            est.update(0.0, 0, 90000.0);
            const double j1 = est.update(0.010, 900, 90000.0);
            const double j2 = est.update(0.030, 1800, 90000.0);
            st.check("oracle: rfc3550 jitter estimate",
                     j1 == 0.0 && std::abs(j2 - 0.000625) < 1e-15);
        }
        {
            const auto ext = unwrap_seq({65534, 65535, 0, 1});
            st.check("oracle: sequence unwrap across 2^16",
                     ext == std::vector<std::int64_t>{65534, 65535, 65536, 65537});
        }
        {
            // 10 packets x 625 bytes in 500 ms is exactly 0.1 Mbps.
            std::vector<PacketRecord> pkts(10);
            std::vector<const PacketRecord*> ptrs;
            for (auto& p : pkts) {
                p.size_bytes = 625;
                ptrs.push_back(&p);
            }
            st.check("oracle: bitrate label arithmetic", label_bitrate(ptrs, 500.0) == 0.1);
        }
        {
            // Active backend agrees with the scalar reference kernels.
            const auto& active = kernels::ops<double>();
            const auto& scalar = kernels::scalar_ops_f64();
            Rng rng(11);
            Mat<double> A(17, 9), B(9, 13), C1(17, 13), C2(17, 13);
            for (std::size_t i = 0; i < A.size(); ++i) A[i] = rng.gauss();
            for (std::size_t i = 0; i < B.size(); ++i) B[i] = rng.gauss();
            active.gemm(C1.data(), A.data(), B.data(), 17, 9, 13, false);
            scalar.gemm(C2.data(), A.data(), B.data(), 17, 9, 13, false);
            double diff = 0;
            for (std::size_t i = 0; i < C1.size(); ++i)
                diff = std::max(diff, std::abs(C1[i] - C2[i]));
            std::snprintf(buf, sizeof buf, "backend %s, max diff %.2e",
                          kernels::backend_name(kernels::active_backend()).c_str(), diff);
            st.check("kernels: gemm backend equivalence", diff < 1e-10, buf);
        }
        {
            // Same seed, same forward: bitwise deterministic.
            const EncoderConfig cfg = selftest_encoder(AttentionMode::dual);
            Rng r1(5), r2(5);
            ModelParams<double> p1(cfg), p2(cfg);
            p1.init(r1);
            p2.init(r2);
            Mat<double> f(16, 6);
            Rng fr(6);
            for (std::size_t i = 0; i < f.size(); ++i) f[i] = fr.gauss();
            Graph<double> g1, g2;
            const auto a = build_forward(g1, f, 2, p1, false);
            const auto b = build_forward(g2, f, 2, p2, false);
            bool same = true;
            for (std::size_t i = 0; i < 16 && same; ++i)
                same = g1.val(a.encodings)[i] == g2.val(b.encodings)[i];
            st.check("determinism: repeated forward bitwise equal", same);
        }
    }

    std::printf("selftest: %d/%d checks passed\n", st.ran - st.failed, st.ran);
    if (st.failed) throw NumericError(std::to_string(st.failed) + " selftest check(s) failed");
    return 0;
}

}  // namespace

// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
    CLI::App app{"p2p: RTP flow QoS prediction pipeline"};
    app.require_subcommand(1);
    app.fallthrough();  // allow the global flags after the subcommand name

    std::string config_path;
    std::uint64_t seed = 0;
    int precision = 0;
    std::string log_level;
    app.add_option("--config", config_path, "INI config file ([windowing]/[encoder]/[train])");
    auto* seed_opt = app.add_option("--seed", seed, "override the RNG seed");
    auto* prec_opt =
        app.add_option("--precision", precision, "float width")->check(CLI::IsMember({32, 64}));
    app.add_option("--log-level", log_level, "debug|info|warn|error|quiet");

    IngestArgs ingest_args;
    auto* c_ingest = app.add_subcommand("ingest", "capture/log -> normalized packet log");
    c_ingest->add_option("--input", ingest_args.input, "pcap, pcapng, or packet log")->required();
    c_ingest->add_option("--output", ingest_args.output, "packet log CSV")->required();
    c_ingest->add_flag("--udp-only", ingest_args.udp_only, "warn when non-UDP traffic is present");

    DatasetArgs dataset_args;
    auto* c_dataset = app.add_subcommand("dataset", "packet log -> windowed dataset");
    c_dataset->add_option("--input", dataset_args.input, "packet log or capture")->required();
    c_dataset->add_option("--output", dataset_args.output, "dataset JSONL")->required();

    SynthArgs synth_args;
    auto* c_synth = app.add_subcommand("synth", "generate synthetic traffic with ground truth");
    auto* scen_opt = c_synth->add_option("--scenario", synth_args.scenario, "scenario INI file");
    auto* bench_dur = c_synth->add_option("--benchmark", synth_args.benchmark_s,
                                          "built-in benchmark scenario of this many seconds");
    scen_opt->excludes(bench_dur);
    c_synth->add_option("--out", synth_args.out, "packet log CSV")->required();
    c_synth->add_option("--truth", synth_args.truth, "ground-truth JSON");

    TrainArgs train_args;
    auto* c_train = app.add_subcommand("train", "train the predictor");
    c_train->add_option("--dataset", train_args.dataset, "dataset file or directory of sessions")
        ->required();
    c_train->add_option("--out", train_args.out, "output checkpoint")->required();
    c_train->add_option("--resume", train_args.resume, "checkpoint to continue from");

    EvalArgs eval_args;
    auto* c_eval = app.add_subcommand("eval", "metric suite + persistence baseline");
    c_eval->add_option("--ckpt", eval_args.ckpt, "trained checkpoint")->required();
    c_eval->add_option("--dataset", eval_args.dataset, "dataset file or directory")->required();
    c_eval->add_option("--report", eval_args.report, "JSON report path")->required();
    c_eval->add_option("--split", eval_args.split, "train|val|test|all (default test)");

    BenchArgs bench_args;
    auto* c_bench = app.add_subcommand("bench", "single-shot vs sequential latency");
    c_bench->add_option("--ckpt", bench_args.ckpt, "trained checkpoint")->required();
    c_bench->add_option("--flows", bench_args.flows, "flow counts, N or LO..HI (default 1..11)");
    c_bench->add_option("--reps", bench_args.reps, "repetitions per flow count (default 200)");
    c_bench->add_option("--report", bench_args.report, "optional JSON report path");

    PredictArgs predict_args;
    auto* c_predict = app.add_subcommand("predict", "per-flow QoS predictions at a time point");
    c_predict->add_option("--ckpt", predict_args.ckpt, "trained checkpoint")->required();
    c_predict->add_option("--input", predict_args.input, "packet log or capture")->required();
    c_predict->add_option("--at", predict_args.at, "prediction time t (seconds)")->required();
    c_predict->add_option("--threshold", predict_args.threshold,
                          "loss probability threshold (default 0.5)");
    c_predict->add_option("--dump-attention", predict_args.dump_attention,
                          "write attention weights JSON here");

    bool grad_only = false;
    auto* c_selftest = app.add_subcommand("selftest", "built-in consistency checks");
    c_selftest->add_flag("--grad", grad_only, "gradient checks only");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        GlobalConfig cfg = load_config(config_path);
        if (seed_opt->count()) cfg.train.seed = seed;
        if (prec_opt->count()) cfg.train.precision = precision;
        if (!log_level.empty()) cfg.log_level = log_level;
        g_log_level = parse_log_level(cfg.log_level);
        synth_args.seed = cfg.train.seed;
        synth_args.seed_set = seed_opt->count() > 0;
        bench_args.seed = cfg.train.seed;

        if (*c_ingest) return cmd_ingest(ingest_args);
        if (*c_dataset) return cmd_dataset(dataset_args, cfg);
        if (*c_synth) {
            if (synth_args.scenario.empty() && bench_dur->count() == 0)
                throw UsageError("synth needs --scenario or --benchmark");
            return cmd_synth(synth_args, cfg);
        }
        if (*c_train) return cmd_train(train_args, cfg);
        if (*c_eval) return cmd_eval(eval_args);
        if (*c_bench) return cmd_bench(bench_args);
        if (*c_predict) return cmd_predict(predict_args, cfg);
        if (*c_selftest) return cmd_selftest(grad_only);
        throw UsageError("no subcommand selected");
    } catch (const UsageError& e) {
        logmsg(LogLevel::error, "%s", e.what());
        return 1;
    } catch (const DataError& e) {
        logmsg(LogLevel::error, "%s", e.what());
        return 2;
    } catch (const NumericError& e) {
        logmsg(LogLevel::error, "%s", e.what());
        return 3;
    } catch (const std::exception& e) {
        logmsg(LogLevel::error, "unexpected: %s", e.what());
        return 1;
    }
}
