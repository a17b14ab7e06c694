#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "doctest.h"
#include "p2p/rng.hpp"
#include "p2p/windowing.hpp"

using p2p::FlowKey;
using p2p::PacketRecord;
using p2p::WindowBatch;
using p2p::WindowingConfig;
using p2p::WindowSample;

namespace {

PacketRecord mk(double t, const std::string& src, std::uint16_t sport, std::uint32_t ssrc,
                std::uint8_t pt, std::uint16_t seq, std::uint32_t ts, bool marker = false,
                std::uint32_t size = 1000) {
    PacketRecord r;
    r.arrival_time = t;
    r.ip_src = src;
    r.ip_dst = "10.0.0.9";
    r.port_src = sport;
    r.port_dst = 5006;
    r.ssrc = ssrc;
    r.payload_type = pt;
    r.seq = seq;
    r.rtp_timestamp = ts;
    r.marker = marker;
    r.size_bytes = size;
    return r;
}

// CBR flow: `count` packets every `gap` seconds from `start`, ts advancing
// `ts_step` ticks per packet.
void add_cbr(std::vector<PacketRecord>& out, double start, double gap, int count,
             const std::string& src, std::uint16_t sport, std::uint32_t ssrc, std::uint8_t pt,
             std::uint32_t ts_step = 900, std::uint16_t seq0 = 0, std::uint32_t size = 1000) {
    for (int i = 0; i < count; ++i)
        out.push_back(mk(start + double(i) * gap, src, sport, ssrc, pt,
                         std::uint16_t(seq0 + i), std::uint32_t(ts_step) * std::uint32_t(i),
                         false, size));
}

void sort_session(std::vector<PacketRecord>& s) {
    std::stable_sort(s.begin(), s.end(), [](const PacketRecord& a, const PacketRecord& b) {
        return a.arrival_time < b.arrival_time;
    });
}

WindowingConfig small_cfg() {
    auto cfg = WindowingConfig::defaults();
    cfg.per_flow_packets = 16;
    cfg.history_packets = 256;
    return cfg;
}

bool same_sample(const WindowSample& a, const WindowSample& b) {
    return a.flow == b.flow && a.features == b.features &&
           a.label_bitrate_mbps == b.label_bitrate_mbps &&
           a.label_jitter_ms == b.label_jitter_ms && a.label_fps == b.label_fps &&
           a.label_loss == b.label_loss && a.fps_mask == b.fps_mask &&
           a.jitter_mask == b.jitter_mask && a.window_start == b.window_start;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("p2p_window_" + name)).string();
}

}  // namespace

TEST_CASE("unwrap_seq handles wraparound, gaps and reorders") {
    using v16 = std::vector<std::uint16_t>;
    using v64 = std::vector<std::int64_t>;
    CHECK(p2p::unwrap_seq(v16{65534, 65535, 0, 1}) == v64{65534, 65535, 65536, 65537});
    CHECK(p2p::unwrap_seq(v16{10, 13}) == v64{10, 13});
    CHECK(p2p::unwrap_seq(v16{5, 4}) == v64{5, 4});
    CHECK(p2p::unwrap_seq(v16{}) == v64{});
    // backwards wrap: 1 then 65535 is a reorder, delta -2
    CHECK(p2p::unwrap_seq(v16{1, 65535, 0, 2}) == v64{1, -1, 0, 2});
    // deltas always land in [-32768, 32767]
    p2p::Rng rng(5);
    v16 raw;
    for (int i = 0; i < 500; ++i) raw.push_back(std::uint16_t(rng.below(65536)));
    auto ext = p2p::unwrap_seq(raw);
    for (std::size_t i = 1; i < ext.size(); ++i) {
        const auto d = ext[i] - ext[i - 1];
        CHECK(d >= -32768);
        CHECK(d <= 32767);
        CHECK(((d % 65536) + 65536) % 65536 ==
              std::int64_t(std::uint16_t(raw[i] - raw[i - 1])));
    }
}

TEST_CASE("active_flows: count clause, staleness clause, ordering") {
    auto cfg = small_cfg();  // n=16, N=256
    std::vector<PacketRecord> s;
    // flow A: plenty of packets, fresh at t
    add_cbr(s, 0.0, 0.01, 80, "10.0.0.1", 5004, 0xA, 96);
    // flow B: only 15 packets (one short of n)
    add_cbr(s, 0.05, 0.01, 15, "10.0.0.2", 5004, 0xB, 96);
    // flow C: 40 packets but stops 1.5 s before t
    add_cbr(s, 0.0, 0.01, 40, "10.0.0.3", 5004, 0xC, 96);
    sort_session(s);
    const double t = 0.4 + 1.5;  // flow C's last packet is at 0.39
    // keep A alive: extend it to just before t
    add_cbr(s, 0.8, 0.01, 120, "10.0.0.1", 5004, 0xA, 96, 900, 80);
    sort_session(s);
    auto act = p2p::active_flows(s, t, cfg);
    REQUIRE(act.size() == 1);
    CHECK(act[0].ssrc == 0xA);

    // exactly n packets qualifies
    std::vector<PacketRecord> s2;
    add_cbr(s2, 0.0, 0.01, 16, "10.0.0.1", 5004, 0xA, 96);
    CHECK(p2p::active_flows(s2, 0.2, cfg).size() == 1);
    std::vector<PacketRecord> s3;
    add_cbr(s3, 0.0, 0.01, 15, "10.0.0.1", 5004, 0xA, 96);
    CHECK(p2p::active_flows(s3, 0.2, cfg).empty());
}

TEST_CASE("active_flows: history window bounds the count") {
    auto cfg = small_cfg();  // N=256
    std::vector<PacketRecord> s;
    // flow B: 16 packets early
    add_cbr(s, 0.0, 0.001, 16, "10.0.0.2", 5004, 0xB, 96);
    // flow A: 256 packets afterwards push B out of the last-256 history
    add_cbr(s, 0.1, 0.001, 256, "10.0.0.1", 5004, 0xA, 96);
    sort_session(s);
    auto act = p2p::active_flows(s, 0.5, cfg);
    REQUIRE(act.size() == 1);
    CHECK(act[0].ssrc == 0xA);
    // with a larger history B qualifies again (still within staleness)
    cfg.history_packets = 512;
    act = p2p::active_flows(s, 0.5, cfg);
    CHECK(act.size() == 2);
}

TEST_CASE("active_flows order: first-ever arrival, then lexicographic key") {
    auto cfg = small_cfg();
    std::vector<PacketRecord> s;
    add_cbr(s, 0.01, 0.01, 20, "10.0.0.7", 5004, 0x7, 96);  // starts second
    add_cbr(s, 0.00, 0.01, 20, "10.0.0.9", 5004, 0x9, 96);  // starts first
    // two flows tied at 0.005: lexicographic by (ip_src, ...)
    add_cbr(s, 0.005, 0.01, 20, "10.0.0.5", 6000, 0x5, 96);
    add_cbr(s, 0.005, 0.01, 20, "10.0.0.3", 7000, 0x3, 96);
    sort_session(s);
    auto act = p2p::active_flows(s, 0.5, cfg);
    REQUIRE(act.size() == 4);
    CHECK(act[0].ssrc == 0x9);
    CHECK(act[1].ssrc == 0x3);  // 10.0.0.3 < 10.0.0.5
    CHECK(act[2].ssrc == 0x5);
    CHECK(act[3].ssrc == 0x7);
}

TEST_CASE("build_features: spec columns on a uniform 128-packet flow") {
    auto cfg = WindowingConfig::defaults();  // n = 128
    std::vector<PacketRecord> s;
    add_cbr(s, 0.0, 0.01, 128, "10.0.0.1", 5004, 0xA, 96, 900);
    std::vector<const PacketRecord*> ptrs;
    for (const auto& r : s) ptrs.push_back(&r);
    auto m = p2p::build_features(ptrs, cfg);
    REQUIRE(m.rows() == 128);
    REQUIRE(m.cols() == 6);
    CHECK(m(0, 0) == 0.0);
    for (std::size_t i = 1; i < 128; ++i)
        CHECK(m(i, 0) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(m(127, 1) == doctest::Approx(1.27).epsilon(1e-12));
    CHECK(m(0, 1) == 0.0);
    for (std::size_t i = 0; i < 128; ++i) {
        CHECK(m(i, 2) == 1000.0);
        // 900 ticks per packet at 90 kHz is 10 ms
        CHECK(m(i, 3) == doctest::Approx(0.01 * double(i)).epsilon(1e-12));
        CHECK(m(i, 4) == 0.0);
        CHECK(m(i, 5) == 1.0);
    }
}

TEST_CASE("build_features: seq gap, marker, unknown clock, wrong count") {
    auto cfg = small_cfg();  // n = 16
    std::vector<PacketRecord> s;
    for (int i = 0; i < 16; ++i) {
        const int seq = i < 8 ? i : i + 1;  // one missing seq -> one diff of 2
        s.push_back(mk(double(i) * 0.02, "10.0.0.1", 5004, 0xA, 50, std::uint16_t(seq),
                       std::uint32_t(1000 * i), i == 15));
    }
    std::vector<const PacketRecord*> ptrs;
    for (const auto& r : s) ptrs.push_back(&r);
    auto m = p2p::build_features(ptrs, cfg);
    std::size_t twos = 0;
    for (std::size_t i = 0; i < 16; ++i) twos += m(i, 5) == 2.0;
    CHECK(twos == 1);
    CHECK(m(8, 5) == 2.0);
    CHECK(m(15, 4) == 1.0);
    // payload type 50 has no clock: raw ticks x 1e-5
    CHECK(m(1, 3) == doctest::Approx(1000 * 1e-5).epsilon(1e-12));

    ptrs.pop_back();
    CHECK_THROWS_AS((void)p2p::build_features(ptrs, cfg), p2p::WrongCount);
}

TEST_CASE("build_features: ts_delta uses the unsigned 32-bit difference") {
    auto cfg = small_cfg();
    std::vector<PacketRecord> s;
    // timestamps wrap past 2^32
    for (int i = 0; i < 16; ++i)
        s.push_back(mk(double(i) * 0.01, "10.0.0.1", 5004, 0xA, 96, std::uint16_t(i),
                       std::uint32_t(0xFFFFFC00u + 900u * std::uint32_t(i))));
    std::vector<const PacketRecord*> ptrs;
    for (const auto& r : s) ptrs.push_back(&r);
    auto m = p2p::build_features(ptrs, cfg);
    for (std::size_t i = 0; i < 16; ++i)
        CHECK(m(i, 3) == doctest::Approx(double(900 * i) / 90000.0).epsilon(1e-12));
}

TEST_CASE("rfc 3550 jitter oracle: arrivals 0, 10, 30 ms") {
    p2p::JitterEstimator est;
    // timestamps advance 900 ticks (10 ms at 90 kHz) per packet
    std::vector<double> j;
    j.push_back(est.update(0.000, 0, 90000.0));
    j.push_back(est.update(0.010, 900, 90000.0));
    j.push_back(est.update(0.030, 1800, 90000.0));
    CHECK(j[0] == 0.0);
    CHECK(j[1] == 0.0);
    CHECK(j[2] == doctest::Approx(0.000625).epsilon(1e-15));
    CHECK(p2p::label_jitter_ms(j) == doctest::Approx(0.625 / 3.0).epsilon(1e-12));
    // perfectly paced flow stays at (numerically) 0
    p2p::JitterEstimator est2;
    for (int i = 0; i < 50; ++i) est2.update(double(i) * 0.02, std::uint32_t(960 * i), 48000.0);
    CHECK(est2.value() >= 0.0);
    CHECK(est2.value() < 1e-12);
}

TEST_CASE("label_bitrate and label_fps worked examples") {
    std::vector<PacketRecord> s;
    for (int i = 0; i < 10; ++i)
        s.push_back(mk(double(i) * 0.01, "a", 1, 1, 96, std::uint16_t(i), std::uint32_t(i), false,
                       625));
    std::vector<const PacketRecord*> ptrs;
    for (const auto& r : s) ptrs.push_back(&r);
    CHECK(p2p::label_bitrate(ptrs, 500.0) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(p2p::label_bitrate({}, 500.0) == 0.0);
    CHECK(p2p::label_fps(ptrs, 500.0) == doctest::Approx(20.0));  // 10 distinct ts

    std::vector<PacketRecord> f;
    for (int i = 0; i < 40; ++i)
        f.push_back(mk(double(i) * 0.001, "a", 1, 1, 96, std::uint16_t(i), 7777));
    std::vector<const PacketRecord*> fp;
    for (const auto& r : f) fp.push_back(&r);
    CHECK(p2p::label_fps(fp, 500.0) == doctest::Approx(2.0));  // one distinct ts
    CHECK(p2p::label_fps({}, 500.0) == 0.0);

    // 15 distinct timestamps in 500 ms -> 30 fps
    std::vector<PacketRecord> g;
    for (int i = 0; i < 45; ++i)
        g.push_back(mk(double(i) * 0.01, "a", 1, 1, 96, std::uint16_t(i),
                       std::uint32_t(i / 3)));
    std::vector<const PacketRecord*> gp;
    for (const auto& r : g) gp.push_back(&r);
    CHECK(p2p::label_fps(gp, 500.0) == doctest::Approx(30.0));
}

TEST_CASE("label_loss: gaps yes, reorders no") {
    std::vector<std::int64_t> complete;
    for (int i = 100; i <= 149; ++i) complete.push_back(i);
    p2p::Rng rng(3);
    rng.shuffle(complete);
    CHECK_FALSE(p2p::label_loss(complete));

    std::vector<std::int64_t> gap;
    for (int i = 100; i <= 120; ++i)
        if (i != 111) gap.push_back(i);
    CHECK(p2p::label_loss(gap));

    CHECK_FALSE(p2p::label_loss({}));
    CHECK_FALSE(p2p::label_loss({42}));
    // duplicates (retransmissions) alone are not loss
    CHECK_FALSE(p2p::label_loss({7, 8, 8, 9}));
    CHECK(p2p::label_loss({7, 9, 9}));
}

TEST_CASE("build_dataset: steady two-flow session") {
    auto cfg = small_cfg();  // n=16, N=256, 500 ms windows
    std::vector<PacketRecord> s;
    // video flow: 64 pps (dyadic gap), 500-byte packets, 4 packets per frame
    const double gap = 1.0 / 64.0;
    for (int i = 0; i < 64 * 6; ++i)
        s.push_back(mk(double(i) * gap, "10.0.0.1", 5004, 0xA, 96, std::uint16_t(i),
                       std::uint32_t(1500 * (i / 4)), (i % 4) == 3, 500));
    // audio flow: 50 pps from t=1.0, payload type 111 (48 kHz clock)
    for (int i = 0; i < 200; ++i)
        s.push_back(mk(1.0 + double(i) * 0.02, "10.0.0.2", 6004, 0xB, 111, std::uint16_t(i),
                       std::uint32_t(960 * i), false, 160));
    sort_session(s);
    auto ds = p2p::build_dataset(s, cfg);
    REQUIRE(!ds.empty());

    // brute-force re-scan: every emitted sample satisfies both active clauses
    for (const auto& b : ds) {
        std::set<FlowKey> seen;
        for (const auto& smp : b.samples) {
            CHECK(seen.insert(smp.flow).second);  // distinct flows per window
            CHECK(smp.window_start == b.window_start);
            std::vector<const PacketRecord*> before;
            for (const auto& r : s)
                if (r.arrival_time < b.window_start) before.push_back(&r);
            const std::size_t lo = before.size() > cfg.history_packets
                                       ? before.size() - cfg.history_packets
                                       : 0;
            std::size_t cnt = 0;
            double last = -1e9;
            for (std::size_t i = lo; i < before.size(); ++i)
                if (p2p::key_of(*before[i]) == smp.flow) {
                    ++cnt;
                    last = before[i]->arrival_time;
                }
            CHECK(cnt >= cfg.per_flow_packets);
            CHECK(last >= b.window_start - cfg.staleness_s);

            // feature idempotence: rebuild from the flow's last n packets
            std::vector<const PacketRecord*> flow_before;
            for (const PacketRecord* p : before)
                if (p2p::key_of(*p) == smp.flow) flow_before.push_back(p);
            std::vector<const PacketRecord*> last_n(flow_before.end() -
                                                        long(cfg.per_flow_packets),
                                                    flow_before.end());
            CHECK(smp.features == p2p::build_features(last_n, cfg));
        }
    }

    // the video flow becomes active at t=0.5 and its windows are loss-free CBR
    const auto& first = ds.front();
    CHECK(first.window_start == doctest::Approx(0.5));
    REQUIRE(first.samples.size() == 1);
    const auto& v = first.samples[0];
    CHECK(v.flow.ssrc == 0xA);
    CHECK(v.fps_mask);
    CHECK(v.jitter_mask);
    CHECK_FALSE(v.label_loss);
    // 32 packets x 500 bytes in 500 ms
    CHECK(v.label_bitrate_mbps == doctest::Approx(32 * 500 * 8 / 0.5 / 1e6).epsilon(1e-12));
    // 8 frames in the window -> 16 fps
    CHECK(v.label_fps == doctest::Approx(16.0));
    // 4 packets share each frame timestamp 15.6 ms apart, so packetization
    // jitter is real; check against an independent replay of the flow
    {
        p2p::JitterEstimator est;
        std::vector<double> in_window;
        for (const auto& r : s) {
            if (p2p::key_of(r) != v.flow) continue;
            const double j = est.update(r.arrival_time, r.rtp_timestamp, 90000.0);
            if (r.arrival_time >= 0.5 && r.arrival_time < 1.0) in_window.push_back(j);
        }
        CHECK(v.label_jitter_ms ==
              doctest::Approx(p2p::label_jitter_ms(in_window)).epsilon(1e-12));
        CHECK(v.label_jitter_ms > 1.0);
    }

    // audio flow: fps masked; jitter masked exactly when the label window
    // holds fewer than two packets (the stalled tail windows)
    bool saw_audio = false;
    bool saw_stalled = false;
    for (const auto& b : ds)
        for (const auto& smp : b.samples)
            if (smp.flow.ssrc == 0xB) {
                saw_audio = true;
                CHECK_FALSE(smp.fps_mask);
                CHECK(smp.label_fps == 0.0);
                std::size_t in_win = 0;
                for (const auto& r : s)
                    if (p2p::key_of(r) == smp.flow && r.arrival_time >= b.window_start &&
                        r.arrival_time < b.window_start + cfg.window_s())
                        ++in_win;
                CHECK(smp.jitter_mask == (in_win >= 2));
                if (in_win == 0) {
                    saw_stalled = true;
                    CHECK(smp.label_bitrate_mbps == 0.0);
                    CHECK_FALSE(smp.label_loss);
                }
            }
    CHECK(saw_audio);
    CHECK(saw_stalled);
}

TEST_CASE("build_dataset: dropped packet labels exactly one window lossy") {
    auto cfg = small_cfg();
    std::vector<PacketRecord> s;
    const double gap = 1.0 / 64.0;
    int seq = 0;
    for (int i = 0; i < 64 * 4; ++i) {
        if (seq == 100) ++seq;  // drop seq 100 (arrives in [1.5, 2.0))
        s.push_back(mk(double(i) * gap, "10.0.0.1", 5004, 0xA, 96, std::uint16_t(seq++),
                       std::uint32_t(900 * i)));
    }
    auto ds = p2p::build_dataset(s, cfg);
    std::size_t lossy = 0;
    for (const auto& b : ds)
        for (const auto& smp : b.samples)
            if (smp.label_loss) {
                ++lossy;
                // seq 100 would have been packet index 100: t = 100/64
                CHECK(b.window_start == doctest::Approx(1.5));
            }
    CHECK(lossy == 1);
}

TEST_CASE("build_dataset: stalled flow drops out after the staleness horizon") {
    auto cfg = small_cfg();
    std::vector<PacketRecord> s;
    const double gap = 1.0 / 64.0;
    // flow A runs the whole session, flow B stops at t=2.0
    add_cbr(s, 0.0, gap, 64 * 6, "10.0.0.1", 5004, 0xA, 96);
    for (int i = 0; i < 128; ++i)
        s.push_back(mk(double(i) * gap, "10.0.0.2", 6004, 0xB, 96, std::uint16_t(i),
                       std::uint32_t(900 * i)));
    sort_session(s);
    auto ds = p2p::build_dataset(s, cfg);
    for (const auto& b : ds) {
        const bool has_b = std::any_of(b.samples.begin(), b.samples.end(),
                                       [](const WindowSample& x) { return x.flow.ssrc == 0xB; });
        // B's last packet is at 127/64 ~= 1.984; staleness 1 s
        if (b.window_start <= 2.5)
            CHECK(has_b);
        else
            CHECK_FALSE(has_b);
    }
    // empty-history first window was omitted
    for (const auto& b : ds) CHECK(!b.samples.empty());
}

TEST_CASE("build_dataset: too-short session yields an empty dataset") {
    auto cfg = small_cfg();
    std::vector<PacketRecord> s;
    add_cbr(s, 0.0, 0.01, 15, "10.0.0.1", 5004, 0xA, 96);
    CHECK(p2p::build_dataset(s, cfg).empty());
    CHECK(p2p::build_dataset({}, cfg).empty());
}

TEST_CASE("build_dataset jitter label matches an independent estimator") {
    auto cfg = small_cfg();
    std::vector<PacketRecord> s;
    const double gap = 0.02;
    p2p::Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        const double noise = rng.uniform(0.0, 0.004);
        s.push_back(mk(double(i) * gap + noise, "10.0.0.1", 5004, 0xA, 111,
                       std::uint16_t(i), std::uint32_t(960 * i)));
    }
    sort_session(s);
    auto ds = p2p::build_dataset(s, cfg);
    REQUIRE(!ds.empty());
    for (const auto& b : ds) {
        for (const auto& smp : b.samples) {
            REQUIRE(smp.jitter_mask);
            // replay the whole flow through a fresh estimator
            p2p::JitterEstimator est;
            std::vector<double> in_window;
            for (const auto& r : s) {
                const double j = est.update(r.arrival_time, r.rtp_timestamp, 48000.0);
                if (r.arrival_time >= b.window_start &&
                    r.arrival_time < b.window_start + cfg.window_s())
                    in_window.push_back(j);
            }
            CHECK(smp.label_jitter_ms ==
                  doctest::Approx(p2p::label_jitter_ms(in_window)).epsilon(1e-12));
        }
    }
}

TEST_CASE("dataset file round-trips exactly") {
    auto cfg = small_cfg();
    std::vector<PacketRecord> s;
    const double gap = 1.0 / 64.0;
    add_cbr(s, 0.0, gap, 64 * 3, "10.0.0.1", 5004, 0xA, 96);
    add_cbr(s, 0.25, gap, 64 * 2, "10.0.0.2", 6004, 0xB, 111, 960);
    sort_session(s);
    auto ds = p2p::build_dataset(s, cfg);
    REQUIRE(!ds.empty());
    const auto path = tmp_path("roundtrip.jsonl");
    p2p::write_dataset(ds, cfg.per_flow_packets, path);
    auto back = p2p::read_dataset(path, cfg.per_flow_packets);
    REQUIRE(back.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(back[i].window_start == ds[i].window_start);
        REQUIRE(back[i].samples.size() == ds[i].samples.size());
        for (std::size_t j = 0; j < ds[i].samples.size(); ++j)
            CHECK(same_sample(back[i].samples[j], ds[i].samples[j]));
    }
}

TEST_CASE("read_dataset rejects malformed files with line numbers") {
    const auto path = tmp_path("bad.jsonl");
    auto write_text = [&](const std::string& text) {
        std::ofstream f(path, std::ios::binary);
        f << text;
    };
    write_text("{\"format\":\"other\",\"version\":1,\"per_flow_packets\":16}\n");
    CHECK_THROWS_AS((void)p2p::read_dataset(path, 16), p2p::MalformedLine);

    write_text("{\"format\":\"p2p-dataset\",\"version\":9,\"per_flow_packets\":16}\n");
    CHECK_THROWS_AS((void)p2p::read_dataset(path, 16), p2p::MalformedLine);

    write_text("{\"format\":\"p2p-dataset\",\"version\":1,\"per_flow_packets\":128}\n");
    CHECK_THROWS_AS((void)p2p::read_dataset(path, 16), p2p::MalformedLine);

    write_text(
        "{\"format\":\"p2p-dataset\",\"version\":1,\"per_flow_packets\":16}\n"
        "{\"window_start\":0.5,\"samples\":[]}\n"
        "this is not json\n");
    CHECK_THROWS_WITH_AS((void)p2p::read_dataset(path, 16), doctest::Contains("line 3"),
                         p2p::MalformedLine);
    CHECK_THROWS_AS((void)p2p::read_dataset(tmp_path("missing.jsonl"), 16),
                    p2p::UnreadableFile);
}

TEST_CASE("labels are permutation-invariant over in-window packets") {
    std::vector<PacketRecord> s;
    p2p::Rng rng(21);
    for (int i = 0; i < 30; ++i)
        s.push_back(mk(double(i) * 0.01, "a", 1, 1, 96, std::uint16_t(i),
                       std::uint32_t(i / 3), false, 100 + 10 * std::uint32_t(i % 5)));
    std::vector<const PacketRecord*> ptrs;
    for (const auto& r : s) ptrs.push_back(&r);
    std::vector<std::int64_t> ext;
    for (const auto& r : s) ext.push_back(r.seq);
    const double br = p2p::label_bitrate(ptrs, 500.0);
    const double fps = p2p::label_fps(ptrs, 500.0);
    const bool loss = p2p::label_loss(ext);
    for (int trial = 0; trial < 5; ++trial) {
        rng.shuffle(ptrs);
        rng.shuffle(ext);
        CHECK(p2p::label_bitrate(ptrs, 500.0) == br);
        CHECK(p2p::label_fps(ptrs, 500.0) == fps);
        CHECK(p2p::label_loss(ext) == loss);
    }
}

TEST_CASE("windowing config validation") {
    auto cfg = WindowingConfig::defaults();
    CHECK_NOTHROW(cfg.validate());
    cfg.per_flow_packets = 4096;
    CHECK_THROWS_AS(cfg.validate(), p2p::UsageError);
    cfg = WindowingConfig::defaults();
    cfg.window_ms = 0.0;
    CHECK_THROWS_AS(cfg.validate(), p2p::UsageError);
    CHECK(WindowingConfig::defaults().clock_rate_for(96) == 90000.0);
    CHECK(WindowingConfig::defaults().clock_rate_for(50) == 0.0);
    CHECK(WindowingConfig::defaults().is_video(96));
    CHECK_FALSE(WindowingConfig::defaults().is_video(111));
}
