#include "p2p/windowing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace p2p {

using nlohmann::json;

std::string FlowKey::str() const {
    char buf[32];
    std::snprintf(buf, sizeof buf, ":%u->", port_src);
    std::string s = ip_src + buf + ip_dst;
    std::snprintf(buf, sizeof buf, ":%u/%08x/pt%u", port_dst, ssrc, payload_type);
    return s + buf;
}

FlowKey key_of(const PacketRecord& r) {
    return {r.ip_src, r.ip_dst, r.port_src, r.port_dst, r.ssrc, r.payload_type};
}

WindowingConfig WindowingConfig::defaults() {
    WindowingConfig cfg;
    // dynamic video types used here and by the generator
    for (int pt : {96, 97, 98, 99}) {
        cfg.clock_rates[pt] = 90000.0;
        cfg.video_payload_types.insert(pt);
    }
    // dynamic audio (opus-style) and common static assignments
    cfg.clock_rates[111] = 48000.0;
    cfg.clock_rates[0] = 8000.0;   // PCMU
    cfg.clock_rates[8] = 8000.0;   // PCMA
    cfg.clock_rates[9] = 8000.0;   // G722 (RTP clock is 8 kHz by RFC 3551)
    return cfg;
}

void WindowingConfig::validate() const {
    if (window_ms <= 0.0 || staleness_s <= 0.0)
        throw UsageError("windowing config: durations must be positive");
    if (per_flow_packets == 0 || history_packets == 0)
        throw UsageError("windowing config: packet counts must be positive");
    if (per_flow_packets > history_packets)
        throw UsageError("windowing config: per_flow_packets must not exceed history_packets");
}

double WindowingConfig::clock_rate_for(int payload_type) const {
    auto it = clock_rates.find(payload_type);
    return it == clock_rates.end() ? 0.0 : it->second;
}

std::vector<std::int64_t> unwrap_seq(const std::vector<std::uint16_t>& raw) {
    std::vector<std::int64_t> ext;
    ext.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (i == 0) {
            ext.push_back(raw[0]);
            continue;
        }
        int delta = int(raw[i]) - int(raw[i - 1] & 0xFFFF);
        if (delta < -32768)
            delta += 65536;
        else if (delta > 32767)
            delta -= 65536;
        ext.push_back(ext.back() + delta);
    }
    return ext;
}

double JitterEstimator::update(double arrival, std::uint32_t rtp_timestamp,
                               double clock_rate_hz) {
    if (has_prev_) {
        const double transit_ts =
            double(std::int32_t(rtp_timestamp - prev_ts_)) / clock_rate_hz;
        const double d = (arrival - prev_arrival_) - transit_ts;
        j_ += (std::abs(d) - j_) / 16.0;
    }
    has_prev_ = true;
    prev_arrival_ = arrival;
    prev_ts_ = rtp_timestamp;
    return j_;
}

namespace {

struct FlowData {
    FlowKey key;
    double first_arrival = 0.0;
    std::vector<std::size_t> idx;       // global record indices, ascending
    std::vector<std::int64_t> ext;      // extended seq per packet
    std::vector<double> jitter;         // running J (seconds) after each packet
    bool clock_known = false;
    double clock_rate = 0.0;
};

struct SessionIndex {
    const std::vector<PacketRecord>* recs = nullptr;
    std::vector<FlowData> flows;  // ordered by (first_arrival, key)

    SessionIndex(const std::vector<PacketRecord>& session, const WindowingConfig& cfg) {
        recs = &session;
        std::map<FlowKey, std::size_t> by_key;
        for (std::size_t i = 0; i < session.size(); ++i) {
            if (i > 0 && session[i].arrival_time < session[i - 1].arrival_time)
                throw NonMonotonicTime("session records must be arrival-sorted");
            FlowKey k = key_of(session[i]);
            auto [it, fresh] = by_key.emplace(std::move(k), flows.size());
            if (fresh) {
                flows.push_back(FlowData{});
                flows.back().key = it->first;
                flows.back().first_arrival = session[i].arrival_time;
            }
            flows[it->second].idx.push_back(i);
        }
        std::sort(flows.begin(), flows.end(), [](const FlowData& a, const FlowData& b) {
            if (a.first_arrival != b.first_arrival) return a.first_arrival < b.first_arrival;
            return a.key < b.key;
        });
        for (auto& f : flows) {
            std::vector<std::uint16_t> raw;
            raw.reserve(f.idx.size());
            for (std::size_t i : f.idx) raw.push_back(session[i].seq);
            f.ext = unwrap_seq(raw);
            f.clock_rate = cfg.clock_rate_for(f.key.payload_type);
            f.clock_known = f.clock_rate > 0.0;
            if (f.clock_known) {
                JitterEstimator est;
                f.jitter.reserve(f.idx.size());
                for (std::size_t i : f.idx)
                    f.jitter.push_back(est.update(session[i].arrival_time,
                                                  session[i].rtp_timestamp, f.clock_rate));
            }
        }
    }

    std::size_t global_pos(double t) const {  // first record index with arrival >= t
        auto it = std::lower_bound(recs->begin(), recs->end(), t,
                                   [](const PacketRecord& r, double v) {
                                       return r.arrival_time < v;
                                   });
        return std::size_t(it - recs->begin());
    }

    // Indices into flows of the flows active at window start t.
    std::vector<std::size_t> active_at(double t, const WindowingConfig& cfg) const {
        const std::size_t g = global_pos(t);
        const std::size_t lo = g > cfg.history_packets ? g - cfg.history_packets : 0;
        std::vector<std::size_t> out;
        for (std::size_t fi = 0; fi < flows.size(); ++fi) {
            const FlowData& f = flows[fi];
            const auto lo_it = std::lower_bound(f.idx.begin(), f.idx.end(), lo);
            const auto hi_it = std::lower_bound(f.idx.begin(), f.idx.end(), g);
            if (std::size_t(hi_it - lo_it) < cfg.per_flow_packets) continue;
            const double last_arrival = (*recs)[*(hi_it - 1)].arrival_time;
            if (last_arrival < t - cfg.staleness_s) continue;
            out.push_back(fi);
        }
        return out;
    }
};

}  // namespace

std::vector<FlowKey> active_flows(const std::vector<PacketRecord>& session, double t,
                                  const WindowingConfig& cfg) {
    cfg.validate();
    SessionIndex index(session, cfg);
    std::vector<FlowKey> out;
    for (std::size_t fi : index.active_at(t, cfg)) out.push_back(index.flows[fi].key);
    return out;
}

Mat<double> build_features(const std::vector<const PacketRecord*>& flow_packets,
                           const WindowingConfig& cfg) {
    const std::size_t n = cfg.per_flow_packets;
    if (flow_packets.size() != n)
        throw WrongCount("build_features: want " + std::to_string(n) + " packets, got " +
                         std::to_string(flow_packets.size()));
    std::vector<std::uint16_t> raw;
    raw.reserve(n);
    for (const PacketRecord* p : flow_packets) raw.push_back(p->seq);
    const auto ext = unwrap_seq(raw);
    const double clock = cfg.clock_rate_for(flow_packets[0]->payload_type);

    Mat<double> m(n, 6);
    const double t0 = flow_packets[0]->arrival_time;
    const std::uint32_t ts0 = flow_packets[0]->rtp_timestamp;
    for (std::size_t i = 0; i < n; ++i) {
        const PacketRecord& p = *flow_packets[i];
        m(i, 0) = i == 0 ? 0.0 : p.arrival_time - flow_packets[i - 1]->arrival_time;
        m(i, 1) = p.arrival_time - t0;
        m(i, 2) = double(p.size_bytes);
        const double ticks = double(std::uint32_t(p.rtp_timestamp - ts0));
        m(i, 3) = clock > 0.0 ? ticks / clock : ticks * 1e-5;
        m(i, 4) = p.marker ? 1.0 : 0.0;
        m(i, 5) = i == 0 ? 1.0 : double(ext[i] - ext[i - 1]);
    }
    return m;
}

double label_bitrate(const std::vector<const PacketRecord*>& window_packets, double window_ms) {
    double bytes = 0.0;
    for (const PacketRecord* p : window_packets) bytes += double(p->size_bytes);
    return bytes * 8.0 / (window_ms / 1000.0) / 1e6;
}

double label_fps(const std::vector<const PacketRecord*>& window_packets, double window_ms) {
    std::set<std::uint32_t> distinct;
    for (const PacketRecord* p : window_packets) distinct.insert(p->rtp_timestamp);
    return double(distinct.size()) / (window_ms / 1000.0);
}

bool label_loss(const std::vector<std::int64_t>& window_ext_seqs) {
    if (window_ext_seqs.size() <= 1) return false;
    std::vector<std::int64_t> s = window_ext_seqs;
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s.back() - s.front() + 1 != std::int64_t(s.size());
}

double label_jitter_ms(const std::vector<double>& window_j_seconds) {
    if (window_j_seconds.empty()) return 0.0;
    double sum = 0.0;
    for (double j : window_j_seconds) sum += j;
    return sum / double(window_j_seconds.size()) * 1000.0;
}

std::vector<WindowBatch> build_dataset(const std::vector<PacketRecord>& session,
                                       const WindowingConfig& cfg) {
    cfg.validate();
    std::vector<WindowBatch> out;
    if (session.empty()) return out;
    SessionIndex index(session, cfg);

    const double t0 = session.front().arrival_time;
    const double t_last = session.back().arrival_time;
    const double dt = cfg.window_s();
    for (std::size_t k = 0;; ++k) {
        const double t = t0 + double(k) * dt;
        if (t > t_last) break;
        const auto active = index.active_at(t, cfg);
        if (active.empty()) continue;
        const std::size_t g = index.global_pos(t);
        const std::size_t g_end = index.global_pos(t + dt);

        WindowBatch batch;
        batch.window_start = t;
        for (std::size_t fi : active) {
            const FlowData& f = index.flows[fi];
            // feature packets: the flow's last n packets before t
            const auto pos_g =
                std::size_t(std::lower_bound(f.idx.begin(), f.idx.end(), g) - f.idx.begin());
            std::vector<const PacketRecord*> feat;
            feat.reserve(cfg.per_flow_packets);
            for (std::size_t p = pos_g - cfg.per_flow_packets; p < pos_g; ++p)
                feat.push_back(&session[f.idx[p]]);

            // label packets: the flow's packets with t <= arrival < t + dt
            const auto pos_end = std::size_t(
                std::lower_bound(f.idx.begin(), f.idx.end(), g_end) - f.idx.begin());
            std::vector<const PacketRecord*> in_window;
            std::vector<std::int64_t> win_ext;
            std::vector<double> win_j;
            for (std::size_t p = pos_g; p < pos_end; ++p) {
                in_window.push_back(&session[f.idx[p]]);
                win_ext.push_back(f.ext[p]);
                if (f.clock_known) win_j.push_back(f.jitter[p]);
            }

            WindowSample s;
            s.flow = f.key;
            s.window_start = t;
            s.features = build_features(feat, cfg);
            s.label_bitrate_mbps = label_bitrate(in_window, cfg.window_ms);
            s.label_loss = label_loss(win_ext);
            s.fps_mask = cfg.is_video(f.key.payload_type);
            s.label_fps = s.fps_mask ? label_fps(in_window, cfg.window_ms) : 0.0;
            s.jitter_mask = f.clock_known && in_window.size() >= 2;
            s.label_jitter_ms = s.jitter_mask ? label_jitter_ms(win_j) : 0.0;
            batch.samples.push_back(std::move(s));
        }
        out.push_back(std::move(batch));
    }
    return out;
}

namespace {

json flow_to_json(const FlowKey& k) {
    return json{{"ip_src", k.ip_src},     {"ip_dst", k.ip_dst},
                {"port_src", k.port_src}, {"port_dst", k.port_dst},
                {"ssrc", k.ssrc},         {"payload_type", k.payload_type}};
}

FlowKey flow_from_json(const json& j) {
    FlowKey k;
    k.ip_src = j.at("ip_src").get<std::string>();
    k.ip_dst = j.at("ip_dst").get<std::string>();
    k.port_src = j.at("port_src").get<std::uint16_t>();
    k.port_dst = j.at("port_dst").get<std::uint16_t>();
    k.ssrc = j.at("ssrc").get<std::uint32_t>();
    k.payload_type = j.at("payload_type").get<std::uint8_t>();
    return k;
}

}  // namespace

void write_dataset(const std::vector<WindowBatch>& batches, std::size_t per_flow_packets,
                   const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw UnreadableFile(path + ": cannot open for writing");
    f << json{{"format", "p2p-dataset"}, {"version", 1},
              {"per_flow_packets", per_flow_packets}}
             .dump()
      << '\n';
    for (const auto& b : batches) {
        json samples = json::array();
        for (const auto& s : b.samples) {
            json feat = json::array();
            for (std::size_t i = 0; i < s.features.size(); ++i) feat.push_back(s.features[i]);
            samples.push_back(json{{"flow", flow_to_json(s.flow)},
                                   {"features", std::move(feat)},
                                   {"label_bitrate_mbps", s.label_bitrate_mbps},
                                   {"label_jitter_ms", s.label_jitter_ms},
                                   {"label_fps", s.label_fps},
                                   {"label_loss", s.label_loss},
                                   {"fps_mask", s.fps_mask},
                                   {"jitter_mask", s.jitter_mask}});
        }
        f << json{{"window_start", b.window_start}, {"samples", std::move(samples)}}.dump()
          << '\n';
    }
    if (!f.flush()) throw UnreadableFile(path + ": write error");
}

std::vector<WindowBatch> read_dataset(const std::string& path,
                                      std::size_t expect_per_flow_packets) {
    std::ifstream f(path);
    if (!f) throw UnreadableFile(path + ": cannot open");
    std::string line;
    std::size_t lineno = 0;
    auto bad = [&](const std::string& what) -> MalformedLine {
        return MalformedLine("line " + std::to_string(lineno) + ": " + what);
    };
    if (!std::getline(f, line)) throw MalformedLine("line 1: missing dataset header");
    ++lineno;
    try {
        const json h = json::parse(line);
        if (h.at("format").get<std::string>() != "p2p-dataset") throw bad("not a p2p dataset");
        if (h.at("version").get<int>() != 1) throw bad("unsupported dataset version");
        if (h.at("per_flow_packets").get<std::size_t>() != expect_per_flow_packets)
            throw bad("dataset built with per_flow_packets=" +
                      std::to_string(h.at("per_flow_packets").get<std::size_t>()) +
                      ", expected " + std::to_string(expect_per_flow_packets));
    } catch (const json::exception& e) {
        throw bad(std::string("bad header: ") + e.what());
    }

    std::vector<WindowBatch> out;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) throw bad("empty line");
        try {
            const json j = json::parse(line);
            WindowBatch b;
            b.window_start = j.at("window_start").get<double>();
            for (const json& sj : j.at("samples")) {
                WindowSample s;
                s.flow = flow_from_json(sj.at("flow"));
                s.window_start = b.window_start;
                const json& feat = sj.at("features");
                if (feat.size() != expect_per_flow_packets * 6)
                    throw bad("features must hold " +
                              std::to_string(expect_per_flow_packets * 6) + " values");
                s.features = Mat<double>(expect_per_flow_packets, 6);
                for (std::size_t i = 0; i < s.features.size(); ++i)
                    s.features[i] = feat.at(i).get<double>();
                s.label_bitrate_mbps = sj.at("label_bitrate_mbps").get<double>();
                s.label_jitter_ms = sj.at("label_jitter_ms").get<double>();
                s.label_fps = sj.at("label_fps").get<double>();
                s.label_loss = sj.at("label_loss").get<bool>();
                s.fps_mask = sj.at("fps_mask").get<bool>();
                s.jitter_mask = sj.at("jitter_mask").get<bool>();
                b.samples.push_back(std::move(s));
            }
            out.push_back(std::move(b));
        } catch (const MalformedLine&) {
            throw;
        } catch (const json::exception& e) {
            throw bad(e.what());
        }
    }
    return out;
}

}  // namespace p2p
