#include "p2p/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_set>

#include "json.hpp"
#include "p2p/ini.hpp"
#include "p2p/rng.hpp"

namespace p2p {

using json = nlohmann::json;

const char* media_name(Media m) {
    switch (m) {
        case Media::video: return "video";
        case Media::audio: return "audio";
        case Media::screen: return "screen";
    }
    return "?";
}

Media media_from_name(const std::string& name) {
    if (name == "video") return Media::video;
    if (name == "audio") return Media::audio;
    if (name == "screen") return Media::screen;
    throw InvalidScenario("unknown media '" + name + "' (expected video|audio|screen)");
}

void SynthScenario::finalize() {
    if (!(duration_s > 0.0)) throw InvalidScenario("duration_s must be > 0");
    if (flows.empty()) throw InvalidScenario("scenario has no flows");
    std::set<std::uint32_t> ssrcs;
    for (std::size_t i = 0; i < flows.size(); ++i) {
        FlowSpec& f = flows[i];
        const std::string at = "flow " + std::to_string(i) + ": ";
        if (f.payload_type < 0)
            f.payload_type = f.media == Media::audio ? 111 : (f.media == Media::screen ? 98 : 96);
        if (f.clock_rate == 0.0) f.clock_rate = f.media == Media::audio ? 48000.0 : 90000.0;
        if (f.ssrc == 0) f.ssrc = 0xAB000000u + std::uint32_t(i);
        if (f.port_src == 0) f.port_src = std::uint16_t(5000 + 2 * (i % 30000));
        if (f.ip_src.empty())
            f.ip_src = "10.1." + std::to_string((f.ssrc >> 8) & 255) + "." +
                       std::to_string(f.ssrc & 255);
        if (f.stop_s == 0.0) f.stop_s = duration_s;

        if (f.payload_type > 127) throw InvalidScenario(at + "payload_type out of range");
        if (f.payload_type >= 64 && f.payload_type <= 95)
            throw InvalidScenario(at + "payload_type collides with the RTCP range 64-95");
        if (!(f.clock_rate > 0.0)) throw InvalidScenario(at + "clock_rate must be > 0");
        if (f.media != Media::audio && !(f.fps > 0.0 && f.fps <= 240.0))
            throw InvalidScenario(at + "fps must be in (0, 240]");
        if (!(f.bitrate_kbps > 0.0)) throw InvalidScenario(at + "bitrate_kbps must be > 0");
        if (f.start_s < 0.0 || !(f.start_s < f.stop_s) || f.stop_s > duration_s)
            throw InvalidScenario(at + "need 0 <= start_s < stop_s <= duration_s");
        if (f.delay_noise_ms < 0.0) throw InvalidScenario(at + "delay_noise_ms must be >= 0");
        if (f.drop_rate < 0.0 || f.drop_rate >= 1.0)
            throw InvalidScenario(at + "drop_rate must be in [0, 1)");
        if (f.drop_burst < 1) throw InvalidScenario(at + "drop_burst must be >= 1");
        if (f.rate_mod_frac < 0.0 || f.rate_mod_frac > 0.95 || f.fps_mod_frac < 0.0 ||
            f.fps_mod_frac > 0.95)
            throw InvalidScenario(at + "modulation fractions must be in [0, 0.95]");
        if (!(f.rate_mod_period_s > 0.0) || !(f.fps_mod_period_s > 0.0))
            throw InvalidScenario(at + "modulation periods must be > 0");
        if (f.episodes_per_min < 0.0) throw InvalidScenario(at + "episodes_per_min must be >= 0");
        if (!(f.episode_len_s > 0.0)) throw InvalidScenario(at + "episode_len_s must be > 0");
        if (f.episode_drop_rate < 0.0 || f.episode_drop_rate >= 1.0)
            throw InvalidScenario(at + "episode_drop_rate must be in [0, 1)");
        if (f.episode_burst < 1) throw InvalidScenario(at + "episode_burst must be >= 1");
        if (!(f.dilation_lead_s > 0.0)) throw InvalidScenario(at + "dilation_lead_s must be > 0");
        if (f.dilation_max_ms < 0.0) throw InvalidScenario(at + "dilation_max_ms must be >= 0");
        if (!ssrcs.insert(f.ssrc).second)
            throw InvalidScenario(at + "duplicate ssrc " + std::to_string(f.ssrc));
    }
}

namespace {

// one emitted packet, before and after the network effects
struct GenPacket {
    double sched = 0.0;
    double arrival = 0.0;
    std::uint64_t seq64 = 0;
    std::uint64_t frame = 0;
    std::uint64_t ticks = 0;  // unwrapped RTP timestamp
    std::uint32_t size = 0;   // UDP payload bytes (RTP header included)
    bool marker = false;
    bool dropped = false;
};

// triangle wave with period `period`, range [-1, 1], -1 at t = 0
double tri(double t, double period) {
    double p = t / period;
    p -= std::floor(p);
    return 1.0 - 4.0 * std::fabs(p - 0.5);
}

double exp_draw(Rng& rng, double mean) { return -mean * std::log(1.0 - rng.uniform()); }

std::vector<double> draw_episodes(Rng& rng, const FlowSpec& f) {
    std::vector<double> starts;
    if (f.episodes_per_min <= 0.0) return starts;
    const double mean_gap = 60.0 / f.episodes_per_min;
    const double min_gap = f.dilation_lead_s + f.episode_len_s + 2.0;
    double t = f.start_s + f.dilation_lead_s + 1.0 + exp_draw(rng, mean_gap * 0.5);
    while (t < f.stop_s - f.episode_len_s) {
        starts.push_back(t);
        t += std::max(min_gap, exp_draw(rng, mean_gap));
    }
    return starts;
}

// extra queueing delay (seconds) at send time `sched`: a linear buildup over
// dilation_lead_s before each episode, draining over a quarter of the lead
double dilation_s(const std::vector<double>& episodes, const FlowSpec& f, double sched) {
    for (double e : episodes) {
        if (sched < e - f.dilation_lead_s) break;  // episodes are sorted
        if (sched < e)
            return f.dilation_max_ms * 1e-3 * (sched - (e - f.dilation_lead_s)) /
                   f.dilation_lead_s;
        const double drain = 0.25 * f.dilation_lead_s;
        if (sched < e + drain) return f.dilation_max_ms * 1e-3 * (1.0 - (sched - e) / drain);
    }
    return 0.0;
}

bool in_episode(const std::vector<double>& episodes, const FlowSpec& f, double sched) {
    for (double e : episodes)
        if (sched >= e && sched < e + f.episode_len_s) return true;
    return false;
}

std::vector<GenPacket> emit_flow(const FlowSpec& f, Rng& frng, std::uint64_t& wire_seq0) {
    std::vector<GenPacket> pkts;
    std::uint64_t ticks = frng.next_u64() & 0xFFFFFFFFu;  // random timestamp base
    wire_seq0 = frng.next_u64() & 0xFFFFu;                // random wire sequence base
    std::uint64_t seq = 0, frame = 0;
    if (f.media == Media::audio) {
        const double gap = 0.020;
        // size targets the wire rate: the RTP header is part of what the
        // receiver-side bitrate label measures
        const std::uint32_t wire = std::max<std::uint32_t>(
            13, std::uint32_t(std::llround(f.bitrate_kbps * 1000.0 / 8.0 * gap)));
        const std::uint64_t tick_step = std::uint64_t(std::llround(f.clock_rate * gap));
        for (std::uint64_t i = 0;; ++i) {
            const double t = f.start_s + double(i) * gap;
            if (t >= f.stop_s) break;
            GenPacket p;
            p.sched = t;
            p.seq64 = seq++;
            p.frame = i;
            p.ticks = ticks;
            p.size = wire;
            pkts.push_back(p);
            ticks += tick_step;
        }
        return pkts;
    }
    // video / screen: frames at the (possibly modulated) frame rate, split
    // into MTU-safe packets that share one timestamp.  With a fixed rate the
    // schedule is start + frame/fps so counts stay exact; a modulated rate
    // accumulates the varying frame gaps.
    double t_acc = f.start_s;
    while (true) {
        const double t =
            f.fps_mod_frac > 0.0 ? t_acc : f.start_s + double(frame) / f.fps;
        if (t >= f.stop_s) break;
        const double rel = t - f.start_s;
        double inst_fps = f.fps;
        if (f.fps_mod_frac > 0.0)
            inst_fps = std::max(1.0, f.fps * (1.0 + f.fps_mod_frac * tri(rel, f.fps_mod_period_s)));
        double inst_bits = f.bitrate_kbps * 1000.0;
        if (f.rate_mod_frac > 0.0)
            inst_bits *= 1.0 + f.rate_mod_frac * tri(rel, f.rate_mod_period_s);
        // wire bytes per frame (RTP headers included), split into packets of
        // at most 1200 payload bytes each
        const std::uint64_t frame_bytes =
            std::uint64_t(std::max<std::int64_t>(76, std::llround(inst_bits / 8.0 / inst_fps)));
        const std::uint64_t npkt = (frame_bytes + 1211) / 1212;
        const std::uint64_t base = frame_bytes / npkt, rem = frame_bytes % npkt;
        for (std::uint64_t p = 0; p < npkt; ++p) {
            GenPacket g;
            g.sched = t + double(p) * 0.0012;  // serialization pacing
            g.seq64 = seq++;
            g.frame = frame;
            g.ticks = ticks;
            g.size = std::uint32_t(base + (p < rem ? 1 : 0));
            g.marker = p + 1 == npkt;
            pkts.push_back(g);
        }
        ticks += std::uint64_t(std::llround(f.clock_rate / inst_fps));
        t_acc = t + 1.0 / inst_fps;
        ++frame;
    }
    return pkts;
}

}  // namespace

const FlowTruth* GroundTruth::find(const FlowKey& key) const {
    for (const auto& f : flows)
        if (f.key == key) return &f;
    return nullptr;
}

std::size_t GroundTruth::window_index(double window_start) const {
    if (num_windows == 0) return 0;
    const double dt = window_ms / 1000.0;
    const auto k = std::llround((window_start - t0) / dt);
    if (k < 0 || std::size_t(k) >= num_windows) return num_windows;
    if (t0 + double(k) * dt != window_start) return num_windows;
    return std::size_t(k);
}

std::pair<std::vector<PacketRecord>, GroundTruth> generate(const SynthScenario& sc,
                                                           const WindowingConfig& wcfg) {
    wcfg.validate();
    std::vector<PacketRecord> log;
    GroundTruth gt;
    gt.window_ms = wcfg.window_ms;

    struct FlowGen {
        const FlowSpec* spec;
        std::vector<GenPacket> pkts;  // delivered only, flow arrival order
        std::uint64_t seq0 = 0;
        std::vector<std::uint64_t> dropped;
    };
    std::vector<FlowGen> gens;

    for (const FlowSpec& f : sc.flows) {
        Rng frng = Rng(sc.seed).fork(f.ssrc);
        std::uint64_t wire_seq0 = 0;
        auto pkts = emit_flow(f, frng, wire_seq0);
        const auto episodes = draw_episodes(frng, f);
        // drops: Bernoulli burst starts, applied after sequence assignment
        int burst_left = 0;
        std::vector<std::uint64_t> dropped;
        for (auto& p : pkts) {
            if (burst_left > 0) {
                --burst_left;
                p.dropped = true;
            } else if (in_episode(episodes, f, p.sched)) {
                if (frng.bernoulli(f.episode_drop_rate)) {
                    p.dropped = true;
                    burst_left = f.episode_burst - 1;
                }
            } else if (f.drop_rate > 0.0 && frng.bernoulli(f.drop_rate)) {
                p.dropped = true;
                burst_left = f.drop_burst - 1;
            }
            if (p.dropped) dropped.push_back(p.seq64);
        }
        // arrivals: schedule + queue dilation + Gaussian noise, clamped at 0
        std::vector<GenPacket> delivered;
        delivered.reserve(pkts.size());
        for (auto& p : pkts) {
            if (p.dropped) continue;
            double a = p.sched + dilation_s(episodes, f, p.sched);
            if (f.delay_noise_ms > 0.0) a += frng.gauss() * f.delay_noise_ms * 1e-3;
            p.arrival = std::max(0.0, a);
            delivered.push_back(p);
        }
        std::stable_sort(delivered.begin(), delivered.end(),
                         [](const GenPacket& a, const GenPacket& b) { return a.arrival < b.arrival; });

        FlowGen fg;
        fg.spec = &f;
        fg.pkts = std::move(delivered);
        fg.seq0 = wire_seq0;
        fg.dropped = std::move(dropped);
        gens.push_back(std::move(fg));
    }

    // merged packet log, sorted by arrival with generation order kept on ties
    for (const auto& fg : gens) {
        const FlowSpec& f = *fg.spec;
        for (const auto& p : fg.pkts) {
            PacketRecord r;
            r.arrival_time = p.arrival;
            r.ip_src = f.ip_src;
            r.ip_dst = f.ip_dst;
            r.port_src = f.port_src;
            r.port_dst = f.port_dst;
            r.ssrc = f.ssrc;
            r.payload_type = std::uint8_t(f.payload_type);
            r.seq = std::uint16_t(fg.seq0 + p.seq64);
            r.rtp_timestamp = std::uint32_t(p.ticks);
            r.marker = p.marker;
            r.size_bytes = p.size;
            log.push_back(std::move(r));
        }
    }
    std::stable_sort(log.begin(), log.end(), [](const PacketRecord& a, const PacketRecord& b) {
        return a.arrival_time < b.arrival_time;
    });

    // session window grid, anchored exactly like the dataset builder
    const double dt = wcfg.window_s();
    if (!log.empty()) {
        gt.t0 = log.front().arrival_time;
        const double t_last = log.back().arrival_time;
        std::size_t k = 0;
        while (gt.t0 + double(k) * dt <= t_last) ++k;
        gt.num_windows = k;
    }

    // per-flow truth: jitter recursion over delivered packets, then window
    // aggregates from the generator's own records
    for (const auto& fg : gens) {
        const FlowSpec& f = *fg.spec;
        FlowTruth ft;
        ft.key = FlowKey{f.ip_src, f.ip_dst, f.port_src, f.port_dst, f.ssrc,
                         std::uint8_t(f.payload_type)};
        ft.media = f.media;
        ft.configured_fps = f.media == Media::audio ? 0.0 : f.fps;
        ft.dropped = fg.dropped;

        double prev_arrival = 0.0, j = 0.0;
        std::uint64_t prev_ticks = 0;
        bool first = true;
        for (const auto& p : fg.pkts) {
            if (!first) {
                // RFC 3550 delta form, on the true (unwrapped) tick counters
                const double d = (p.arrival - prev_arrival) -
                                 double(std::int64_t(p.ticks - prev_ticks)) / f.clock_rate;
                j += (std::fabs(d) - j) / 16.0;
            }
            first = false;
            prev_arrival = p.arrival;
            prev_ticks = p.ticks;
            ft.delivered.push_back({p.arrival, p.seq64, j});
        }

        ft.windows.assign(gt.num_windows, TruthWindow{});
        std::size_t ptr = 0;
        for (std::size_t k = 0; k < gt.num_windows; ++k) {
            const double lo = gt.t0 + double(k) * dt;
            const double hi = lo + dt;
            while (ptr < fg.pkts.size() && fg.pkts[ptr].arrival < lo) ++ptr;
            std::uint64_t bytes = 0;
            std::unordered_set<std::uint64_t> frames;
            std::uint64_t mn = 0, mx = 0;
            std::uint32_t count = 0;
            double jsum = 0.0;
            for (std::size_t q = ptr; q < fg.pkts.size() && fg.pkts[q].arrival < hi; ++q) {
                const auto& p = fg.pkts[q];
                bytes += p.size;
                frames.insert(p.frame);
                if (count == 0) mn = mx = p.seq64;
                mn = std::min(mn, p.seq64);
                mx = std::max(mx, p.seq64);
                jsum += ft.delivered[q].jitter_s;
                ++count;
            }
            TruthWindow& w = ft.windows[k];
            w.packets = count;
            double acc = double(bytes);
            w.bitrate_mbps = acc * 8.0 / (wcfg.window_ms / 1000.0) / 1e6;
            w.fps = double(frames.size()) / (wcfg.window_ms / 1000.0);
            w.loss = count >= 2 && mx - mn + 1 != count;
            w.jitter_mean_ms = count ? jsum / double(count) * 1000.0 : 0.0;
        }
        gt.flows.push_back(std::move(ft));
    }
    return {std::move(log), std::move(gt)};
}

SynthScenario default_benchmark_scenario(double duration_s, std::uint64_t seed) {
    SynthScenario sc;
    sc.duration_s = duration_s;
    sc.seed = seed;
    Rng crng = Rng(seed).fork(0xC0FFEEu);

    // segment concurrency plan: 20 s segments, target counts drawn from a
    // distribution shaped for mean ~3.4, ~10% singles, max 11
    const double seg = 25.0;
    const std::size_t nseg = std::max<std::size_t>(1, std::size_t(std::ceil(duration_s / seg)));
    const double pmf[11] = {0.15, 0.24, 0.26, 0.155, 0.095, 0.05, 0.02, 0.015, 0.01, 0.008, 0.007};
    // largest-remainder quota so every session realizes the same composition,
    // then a seeded shuffle for the ordering
    int alloc[11];
    double rem[11];
    std::size_t total = 0;
    for (int c = 0; c < 11; ++c) {
        const double want = pmf[c] * double(nseg);
        alloc[c] = int(want);
        rem[c] = want - double(alloc[c]);
        total += std::size_t(alloc[c]);
    }
    while (total < nseg) {
        int best = 0;
        for (int c = 1; c < 11; ++c)
            if (rem[c] > rem[best]) best = c;
        rem[best] = -1.0;
        ++alloc[best];
        ++total;
    }
    auto steal_for = [&](int c) {  // guarantee the extremes appear
        if (alloc[c] > 0) return;
        int donor = 0;
        for (int i = 1; i < 11; ++i)
            if (alloc[i] > alloc[donor]) donor = i;
        --alloc[donor];
        ++alloc[c];
    };
    if (nseg >= 20) {  // long sessions must exhibit the extremes
        steal_for(10);
        steal_for(0);
    }
    std::vector<int> conc;
    conc.reserve(nseg);
    for (int c = 0; c < 11; ++c)
        for (int i = 0; i < alloc[c]; ++i) conc.push_back(c + 1);
    crng.shuffle(conc);

    const Media slot_media[11] = {Media::video, Media::audio, Media::video, Media::screen,
                                  Media::video, Media::audio, Media::video, Media::screen,
                                  Media::video, Media::audio, Media::video};
    int flow_count = 0;
    for (int s = 0; s < 11; ++s) {
        FlowSpec base;
        base.media = slot_media[s];
        base.delay_noise_ms = 1.5;
        base.episode_len_s = 0.5;
        base.episode_burst = 4;
        base.dilation_lead_s = 0.6;
        base.dilation_max_ms = 120.0;
        if (base.media == Media::video) {
            base.fps = (s % 4 < 2) ? 24.0 : 30.0;
            base.bitrate_kbps = 340.0 + 45.0 * s;
            base.rate_mod_frac = 0.35;
            base.rate_mod_period_s = 11.0 + 1.7 * s;
            base.fps_mod_frac = 0.30;
            base.fps_mod_period_s = 13.0 + 2.1 * s;
            base.episodes_per_min = 2.2;
            base.episode_drop_rate = 0.30;
        } else if (base.media == Media::screen) {
            base.fps = 5.0;
            base.bitrate_kbps = 480.0;
            base.rate_mod_frac = 0.50;
            base.rate_mod_period_s = 19.0 + 1.3 * s;
            base.episodes_per_min = 1.8;
            base.episode_drop_rate = 0.30;
        } else {
            base.bitrate_kbps = 64.0;
            base.delay_noise_ms = 1.2;
            base.episodes_per_min = 1.6;
            base.episode_drop_rate = 0.25;
        }
        // the flow must be warmed up (one full feature buffer) by segment
        // start; estimate the worst-case packet rate to size the lead
        double pps_min;
        if (base.media == Media::audio) {
            pps_min = 50.0;
        } else {
            const double bits_min = base.bitrate_kbps * 1000.0 * (1.0 - base.rate_mod_frac);
            pps_min = std::max(base.fps * (1.0 - base.fps_mod_frac), bits_min / 8.0 / 1200.0);
        }
        const double warmup = 128.0 / pps_min + 0.8;

        int run = 0;
        std::size_t j = 0;
        while (j < nseg) {
            if (conc[j] <= s) {
                ++j;
                continue;
            }
            std::size_t j0 = j;
            while (j < nseg && conc[j] > s) ++j;
            FlowSpec f = base;
            f.start_s = std::max(0.0, double(j0) * seg - warmup);
            f.stop_s = std::min(duration_s, double(j) * seg);
            if (!(f.start_s < f.stop_s)) continue;
            f.ssrc = 0x1000u + std::uint32_t(s) * 0x100u + std::uint32_t(run);
            f.ip_src = "10.1." + std::to_string(s) + "." + std::to_string(1 + run);
            f.port_src = std::uint16_t(5000 + 2 * flow_count);
            sc.flows.push_back(std::move(f));
            ++run;
            ++flow_count;
        }
    }
    sc.finalize();
    return sc;
}

namespace {

double num_value(const IniEntry& e) {
    try {
        std::size_t used = 0;
        const double v = std::stod(e.value, &used);
        if (used != e.value.size()) throw std::invalid_argument("trailing junk");
        return v;
    } catch (const std::exception&) {
        throw InvalidScenario("scenario line " + std::to_string(e.line) + ": key '" + e.key +
                              "' needs a number, got '" + e.value + "'");
    }
}

std::uint64_t uint_value(const IniEntry& e) {
    const double v = num_value(e);
    if (v < 0.0 || v != std::floor(v) || v > 1e18)
        throw InvalidScenario("scenario line " + std::to_string(e.line) + ": key '" + e.key +
                              "' needs a non-negative integer");
    return std::uint64_t(v);
}

void apply_flow_key(FlowSpec& f, const IniEntry& e) {
    const std::string& k = e.key;
    if (k == "media")
        f.media = media_from_name(e.value);
    else if (k == "ip_src")
        f.ip_src = e.value;
    else if (k == "ip_dst")
        f.ip_dst = e.value;
    else if (k == "port_src")
        f.port_src = std::uint16_t(uint_value(e));
    else if (k == "port_dst")
        f.port_dst = std::uint16_t(uint_value(e));
    else if (k == "ssrc")
        f.ssrc = std::uint32_t(uint_value(e));
    else if (k == "payload_type")
        f.payload_type = int(uint_value(e));
    else if (k == "clock_rate")
        f.clock_rate = num_value(e);
    else if (k == "fps")
        f.fps = num_value(e);
    else if (k == "bitrate_kbps")
        f.bitrate_kbps = num_value(e);
    else if (k == "start_s")
        f.start_s = num_value(e);
    else if (k == "stop_s")
        f.stop_s = num_value(e);
    else if (k == "delay_noise_ms")
        f.delay_noise_ms = num_value(e);
    else if (k == "drop_rate")
        f.drop_rate = num_value(e);
    else if (k == "drop_burst")
        f.drop_burst = int(uint_value(e));
    else if (k == "rate_mod_frac")
        f.rate_mod_frac = num_value(e);
    else if (k == "rate_mod_period_s")
        f.rate_mod_period_s = num_value(e);
    else if (k == "fps_mod_frac")
        f.fps_mod_frac = num_value(e);
    else if (k == "fps_mod_period_s")
        f.fps_mod_period_s = num_value(e);
    else if (k == "episodes_per_min")
        f.episodes_per_min = num_value(e);
    else if (k == "episode_len_s")
        f.episode_len_s = num_value(e);
    else if (k == "episode_drop_rate")
        f.episode_drop_rate = num_value(e);
    else if (k == "episode_burst")
        f.episode_burst = int(uint_value(e));
    else if (k == "dilation_lead_s")
        f.dilation_lead_s = num_value(e);
    else if (k == "dilation_max_ms")
        f.dilation_max_ms = num_value(e);
    else
        throw InvalidScenario("scenario line " + std::to_string(e.line) + ": unknown flow key '" +
                              k + "'");
}

}  // namespace

SynthScenario parse_scenario_text(const std::string& text) {
    SynthScenario sc;
    FlowSpec cur;
    bool in_flow = false;
    for (const IniEntry& e : parse_ini_text(text)) {
        if (e.key.empty()) {  // section header
            if (e.section != "flow")
                throw InvalidScenario("scenario line " + std::to_string(e.line) +
                                      ": unknown section '[" + e.section + "]'");
            if (in_flow) sc.flows.push_back(cur);
            cur = FlowSpec{};
            in_flow = true;
        } else if (e.section.empty()) {
            if (e.key == "duration_s")
                sc.duration_s = num_value(e);
            else if (e.key == "seed")
                sc.seed = uint_value(e);
            else
                throw InvalidScenario("scenario line " + std::to_string(e.line) +
                                      ": unknown global key '" + e.key + "'");
        } else {
            apply_flow_key(cur, e);
        }
    }
    if (in_flow) sc.flows.push_back(cur);
    sc.finalize();
    return sc;
}

SynthScenario parse_scenario_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw UnreadableFile("cannot open scenario '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_scenario_text(ss.str());
}

void write_truth(const GroundTruth& gt, const std::string& path) {
    json flows = json::array();
    for (const auto& f : gt.flows) {
        json packets = json::array();
        for (const auto& p : f.delivered) packets.push_back({p.arrival, p.seq64, p.jitter_s});
        json windows = json::array();
        for (const auto& w : f.windows)
            windows.push_back(
                {w.bitrate_mbps, w.fps, w.jitter_mean_ms, w.loss ? 1 : 0, w.packets});
        flows.push_back({{"flow",
                          {{"ip_src", f.key.ip_src},
                           {"ip_dst", f.key.ip_dst},
                           {"port_src", f.key.port_src},
                           {"port_dst", f.key.port_dst},
                           {"ssrc", f.key.ssrc},
                           {"payload_type", f.key.payload_type}}},
                         {"media", media_name(f.media)},
                         {"configured_fps", f.configured_fps},
                         {"dropped", f.dropped},
                         {"packets", std::move(packets)},
                         {"windows", std::move(windows)}});
    }
    const json doc = {{"format", "p2p-truth"}, {"version", 1},
                      {"t0", gt.t0},           {"window_ms", gt.window_ms},
                      {"num_windows", gt.num_windows}, {"flows", std::move(flows)}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UnreadableFile("cannot write '" + path + "'");
    out << doc.dump() << '\n';
}

}  // namespace p2p
