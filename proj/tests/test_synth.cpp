#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "p2p/ini.hpp"
#include "p2p/synth.hpp"
#include "p2p/windowing.hpp"

using namespace p2p;

namespace {

std::vector<const PacketRecord*> of_flow(const std::vector<PacketRecord>& log,
                                         std::uint32_t ssrc) {
    std::vector<const PacketRecord*> out;
    for (const auto& r : log)
        if (r.ssrc == ssrc) out.push_back(&r);
    return out;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("p2p_synth_" + name)).string();
}

}  // namespace

TEST_CASE("scenario validation and media defaults") {
    SynthScenario sc;
    sc.duration_s = 10.0;
    CHECK_THROWS_AS(sc.finalize(), InvalidScenario);  // no flows

    sc.flows.push_back(FlowSpec{});
    sc.flows.push_back(FlowSpec{});
    sc.flows[1].media = Media::audio;
    sc.finalize();
    CHECK(sc.flows[0].payload_type == 96);
    CHECK(sc.flows[0].clock_rate == 90000.0);
    CHECK(sc.flows[1].payload_type == 111);
    CHECK(sc.flows[1].clock_rate == 48000.0);
    CHECK(sc.flows[0].ssrc != sc.flows[1].ssrc);
    CHECK(sc.flows[0].stop_s == 10.0);
    CHECK(!sc.flows[0].ip_src.empty());

    SynthScenario bad = sc;
    bad.flows[1].ssrc = bad.flows[0].ssrc;
    CHECK_THROWS_AS(bad.finalize(), InvalidScenario);

    bad = sc;
    bad.flows[0].drop_rate = 1.0;
    CHECK_THROWS_AS(bad.finalize(), InvalidScenario);

    bad = sc;
    bad.flows[0].payload_type = 72;  // RTCP range
    CHECK_THROWS_AS(bad.finalize(), InvalidScenario);

    bad = sc;
    bad.flows[0].fps = 0.0;
    CHECK_THROWS_AS(bad.finalize(), InvalidScenario);

    CHECK_THROWS_AS((void)media_from_name("fax"), InvalidScenario);
    CHECK(media_from_name("screen") == Media::screen);
    CHECK(std::string(media_name(Media::audio)) == "audio");
}

TEST_CASE("24 fps video: frame structure, markers, packetization") {
    auto sc = parse_scenario_text(
        "duration_s = 10\n"
        "seed = 9\n"
        "[flow]\n"
        "media = video\n"
        "fps = 24\n"
        "bitrate_kbps = 2000\n");
    const auto wcfg = WindowingConfig::defaults();
    auto [log, gt] = generate(sc, wcfg);
    auto pk = of_flow(log, sc.flows[0].ssrc);
    REQUIRE(!pk.empty());

    // exactly fps * duration distinct timestamps
    std::set<std::uint32_t> ts;
    for (auto* r : pk) ts.insert(r->rtp_timestamp);
    CHECK(ts.size() == 240);

    // per frame: MTU-bounded packet count, wire bytes sum to the frame
    // size, marker exactly on the last packet
    std::map<std::uint32_t, std::vector<const PacketRecord*>> frames;
    for (auto* r : pk) frames[r->rtp_timestamp].push_back(r);
    const std::uint64_t frame_bytes = std::llround(2000.0 * 1000.0 / 8.0 / 24.0);  // 10417
    for (auto& [t, v] : frames) {
        CHECK(v.size() == (frame_bytes + 1211) / 1212);
        std::uint64_t wire = 0;
        int markers = 0;
        std::uint16_t max_seq = 0;
        for (auto* r : v) {
            REQUIRE(r->size_bytes > 12);  // room for the RTP header
            wire += r->size_bytes;
            CHECK(r->size_bytes <= 1212);  // 1200 payload + 12 header
            markers += r->marker;
            max_seq = std::max(max_seq, r->seq);
        }
        CHECK(wire == frame_bytes);
        CHECK(markers == 1);
        for (auto* r : v)
            if (r->marker) CHECK(r->seq == max_seq);
    }

    // timestamps advance by clock/fps per frame
    std::vector<std::uint32_t> ordered(ts.begin(), ts.end());
    // (set sorts numerically; fine here because the base didn't wrap)
    for (std::size_t i = 1; i < ordered.size(); ++i)
        CHECK(ordered[i] - ordered[i - 1] == 3750);

    // CBR at 2.0 Mbps: interior windows stay within a few packets of target
    const auto* ft = gt.find(key_of(*pk[0]));
    REQUIRE(ft != nullptr);
    REQUIRE(gt.num_windows >= 10);
    double mean = 0.0;
    std::size_t cnt = 0;
    for (std::size_t k = 0; k + 1 < gt.num_windows; ++k) {
        CHECK(std::fabs(ft->windows[k].bitrate_mbps - 2.0) <= 0.06);
        CHECK(std::fabs(ft->windows[k].fps - 24.0) <= 2.0);
        CHECK_FALSE(ft->windows[k].loss);
        mean += ft->windows[k].bitrate_mbps;
        ++cnt;
    }
    CHECK(std::fabs(mean / double(cnt) - 2.0) <= 0.02);
    CHECK(ft->dropped.empty());
}

TEST_CASE("audio cadence: one packet per 20 ms, exact schedule") {
    auto sc = parse_scenario_text(
        "duration_s = 10\n"
        "[flow]\n"
        "media = audio\n"
        "bitrate_kbps = 64\n");
    auto [log, gt] = generate(sc, WindowingConfig::defaults());
    auto pk = of_flow(log, sc.flows[0].ssrc);
    REQUIRE(pk.size() == 500);
    for (std::size_t i = 0; i < pk.size(); ++i) {
        CHECK(pk[i]->arrival_time == double(i) * 0.020);  // no noise configured
        CHECK(pk[i]->size_bytes == 160);                  // 64 kbps on the wire
        CHECK_FALSE(pk[i]->marker);
        if (i > 0) {
            CHECK(std::uint16_t(pk[i]->seq - pk[i - 1]->seq) == 1);
            CHECK(pk[i]->rtp_timestamp - pk[i - 1]->rtp_timestamp == 960);
        }
    }
}

TEST_CASE("same seed regenerates byte-identically; different seed differs") {
    const auto wcfg = WindowingConfig::defaults();
    auto sc = default_benchmark_scenario(60.0, 77);
    auto [log1, gt1] = generate(sc, wcfg);
    auto [log2, gt2] = generate(sc, wcfg);
    REQUIRE(log1.size() == log2.size());
    CHECK(log1 == log2);
    REQUIRE(gt1.flows.size() == gt2.flows.size());
    CHECK(gt1.num_windows == gt2.num_windows);
    for (std::size_t f = 0; f < gt1.flows.size(); ++f) {
        CHECK(gt1.flows[f].dropped == gt2.flows[f].dropped);
        REQUIRE(gt1.flows[f].delivered.size() == gt2.flows[f].delivered.size());
        for (std::size_t i = 0; i < gt1.flows[f].delivered.size(); ++i)
            CHECK(gt1.flows[f].delivered[i].jitter_s == gt2.flows[f].delivered[i].jitter_s);
    }
    // the packet-log writer is part of the determinism contract
    const auto pa = tmp_path("det_a.csv"), pb = tmp_path("det_b.csv");
    write_packet_log(log1, pa);
    write_packet_log(log2, pb);
    std::ifstream fa(pa, std::ios::binary), fb(pb, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);

    auto sc2 = default_benchmark_scenario(60.0, 78);
    auto [log3, gt3] = generate(sc2, wcfg);
    CHECK(log1 != log3);
}

TEST_CASE("drops: sequence gaps observable, ground truth complete") {
    auto sc = parse_scenario_text(
        "duration_s = 60\n"
        "seed = 4\n"
        "[flow]\n"
        "media = audio\n"
        "drop_rate = 0.05\n"
        "drop_burst = 3\n");
    auto [log, gt] = generate(sc, WindowingConfig::defaults());
    REQUIRE(gt.flows.size() == 1);
    const auto& ft = gt.flows[0];
    CHECK(!ft.dropped.empty());
    // delivered + dropped partition the emitted sequence space
    std::set<std::uint64_t> seen(ft.dropped.begin(), ft.dropped.end());
    CHECK(seen.size() == ft.dropped.size());
    for (const auto& p : ft.delivered) CHECK(seen.insert(p.seq64).second);
    CHECK(seen.size() == ft.delivered.size() + ft.dropped.size());
    CHECK(*seen.rbegin() == seen.size() - 1);  // contiguous 0..N-1
    // drops come in bursts of 3
    std::size_t runs = 0, i = 0;
    std::vector<std::uint64_t> d = ft.dropped;
    while (i < d.size()) {
        std::size_t j = i;
        while (j + 1 < d.size() && d[j + 1] == d[j] + 1) ++j;
        // merged adjacent bursts can exceed 3 but never undershoot,
        // except possibly the final burst truncated by stream end
        if (j + 1 < d.size() || d.back() + 3 <= ft.delivered.back().seq64)
            CHECK(j - i + 1 >= 3);
        ++runs;
        i = j + 1;
    }
    CHECK(runs >= 2);
    // some window shows loss, and no-drop scenarios never do
    bool any_loss = false;
    for (const auto& w : ft.windows) any_loss |= w.loss;
    CHECK(any_loss);

    auto clean = parse_scenario_text(
        "duration_s = 60\n"
        "seed = 4\n"
        "[flow]\n"
        "media = audio\n");
    auto [clog, cgt] = generate(clean, WindowingConfig::defaults());
    CHECK(cgt.flows[0].dropped.empty());
    for (const auto& w : cgt.flows[0].windows) CHECK_FALSE(w.loss);
}

TEST_CASE("dataset labels match ground truth on the benchmark scenario") {
    const auto wcfg = WindowingConfig::defaults();
    auto sc = default_benchmark_scenario(180.0, 3);
    auto [log, gt] = generate(sc, wcfg);
    auto ds = build_dataset(log, wcfg);
    REQUIRE(!ds.empty());
    std::size_t compared = 0, jitter_checked = 0, stalled = 0;
    for (const auto& b : ds) {
        for (const auto& s : b.samples) {
            const auto* ft = gt.find(s.flow);
            REQUIRE(ft != nullptr);
            const std::size_t k = gt.window_index(b.window_start);
            REQUIRE(k < gt.num_windows);
            const auto& w = ft->windows[k];
            CHECK(s.label_bitrate_mbps == w.bitrate_mbps);
            CHECK(s.label_loss == w.loss);
            if (s.fps_mask) CHECK(s.label_fps == w.fps);
            if (s.jitter_mask) {
                const double tol = 1e-9 * std::max(std::fabs(w.jitter_mean_ms), 1e-6);
                CHECK(std::fabs(s.label_jitter_ms - w.jitter_mean_ms) <= tol);
                ++jitter_checked;
            }
            if (w.packets == 0) {
                ++stalled;
                CHECK(s.label_bitrate_mbps == 0.0);
                CHECK_FALSE(s.label_loss);
                CHECK_FALSE(s.jitter_mask);
            }
            ++compared;
        }
    }
    CHECK(compared > 500);
    CHECK(jitter_checked > 400);
    CHECK(stalled > 0);  // lifecycle churn leaves some active-but-quiet windows
}

TEST_CASE("wire sequence wrap: loss labels stay exact across 65536 packets") {
    auto sc = parse_scenario_text(
        "duration_s = 1400\n"
        "seed = 6\n"
        "[flow]\n"
        "media = audio\n"
        "drop_rate = 0.002\n"
        "drop_burst = 2\n"
        "delay_noise_ms = 1\n");
    const auto wcfg = WindowingConfig::defaults();
    auto [log, gt] = generate(sc, wcfg);
    REQUIRE(log.size() > 66000);  // guaranteed 16-bit wrap
    auto ds = build_dataset(log, wcfg);
    REQUIRE(!ds.empty());
    const auto& ft = gt.flows[0];
    std::size_t lossy = 0;
    for (const auto& b : ds) {
        REQUIRE(b.samples.size() == 1);
        const std::size_t k = gt.window_index(b.window_start);
        REQUIRE(k < gt.num_windows);
        CHECK(b.samples[0].label_loss == ft.windows[k].loss);
        CHECK(b.samples[0].label_bitrate_mbps == ft.windows[k].bitrate_mbps);
        lossy += b.samples[0].label_loss;
    }
    CHECK(lossy > 10);
}

TEST_CASE("loss episodes carry a visible dilation signature") {
    auto sc = parse_scenario_text(
        "duration_s = 120\n"
        "seed = 12\n"
        "[flow]\n"
        "media = audio\n"
        "episodes_per_min = 6\n"
        "episode_drop_rate = 0.3\n"
        "episode_burst = 4\n"
        "dilation_lead_s = 0.6\n"
        "dilation_max_ms = 120\n");
    const auto wcfg = WindowingConfig::defaults();
    auto [log, gt] = generate(sc, wcfg);
    const auto& ft = gt.flows[0];
    CHECK(!ft.dropped.empty());
    std::size_t lossy = 0;
    const double dt = wcfg.window_s();
    for (std::size_t k = 0; k < gt.num_windows; ++k) {
        if (!ft.windows[k].loss) continue;
        ++lossy;
        // in the 0.7 s before the lossy window, some inter-arrival must be
        // dilated well past the nominal 20 ms cadence
        const double lo = gt.t0 + double(k) * dt;
        double max_iat = 0.0, prev = -1.0;
        for (const auto& p : ft.delivered) {
            if (p.arrival >= lo) break;
            if (p.arrival >= lo - 0.7) {
                if (prev >= 0.0) max_iat = std::max(max_iat, p.arrival - prev);
            }
            prev = p.arrival;
        }
        CHECK(max_iat >= 0.020 * 1.1);
    }
    CHECK(lossy >= 5);
}

TEST_CASE("benchmark scenario hits the corpus shape targets") {
    const auto wcfg = WindowingConfig::defaults();
    auto sc = default_benchmark_scenario(1200.0, 42);
    auto [log, gt] = generate(sc, wcfg);
    auto ds = build_dataset(log, wcfg);
    REQUIRE(!ds.empty());
    std::size_t samples = 0, singles = 0, maxL = 0;
    for (const auto& b : ds) {
        samples += b.samples.size();
        singles += b.samples.size() == 1;
        maxL = std::max(maxL, b.samples.size());
    }
    const double mean = double(samples) / double(ds.size());
    CHECK(mean >= 3.1);
    CHECK(mean <= 3.7);
    CHECK(maxL == 11);
    const double single_frac = double(singles) / double(ds.size());
    CHECK(single_frac >= 0.05);
    CHECK(single_frac <= 0.15);
}

TEST_CASE("scenario file parsing errors") {
    CHECK_THROWS_AS((void)parse_scenario_text("nonsense_key = 1\n"), InvalidScenario);
    CHECK_THROWS_AS((void)parse_scenario_text("[network]\n"), InvalidScenario);
    CHECK_THROWS_AS((void)parse_scenario_text("duration_s = ten\n[flow]\n"), InvalidScenario);
    CHECK_THROWS_AS((void)parse_scenario_text("[flow]\nmedia = fax\n"), InvalidScenario);
    CHECK_THROWS_AS((void)parse_scenario_text("[flow]\nbitrate_kbps = -5\n"), InvalidScenario);
    CHECK_THROWS_AS((void)parse_scenario_text("[flow]\nseq = 1\n"), InvalidScenario);
    CHECK_THROWS_AS((void)parse_scenario_text("duration_s = 10\n"), InvalidScenario);
    CHECK_THROWS_AS((void)parse_ini_text("key_without_value\n"), MalformedLine);
    CHECK_THROWS_AS((void)parse_scenario_file(tmp_path("missing.ini")), UnreadableFile);

    // comments, blank lines, two flows, explicit overrides
    auto sc = parse_scenario_text(
        "# session\n"
        "duration_s = 30   ; trailing comment\n"
        "seed = 5\n"
        "\n"
        "[flow]\n"
        "media = video\n"
        "ssrc = 42\n"
        "payload_type = 97\n"
        "start_s = 2\n"
        "stop_s = 20\n"
        "[flow]\n"
        "media = screen\n"
        "fps = 5\n");
    CHECK(sc.duration_s == 30.0);
    CHECK(sc.seed == 5);
    REQUIRE(sc.flows.size() == 2);
    CHECK(sc.flows[0].ssrc == 42);
    CHECK(sc.flows[0].payload_type == 97);
    CHECK(sc.flows[0].start_s == 2.0);
    CHECK(sc.flows[0].stop_s == 20.0);
    CHECK(sc.flows[1].media == Media::screen);
    CHECK(sc.flows[1].payload_type == 98);
}

TEST_CASE("truth file is valid json with consistent counts") {
    auto sc = parse_scenario_text(
        "duration_s = 20\n"
        "seed = 2\n"
        "[flow]\n"
        "media = video\n"
        "[flow]\n"
        "media = audio\n");
    auto [log, gt] = generate(sc, WindowingConfig::defaults());
    const auto path = tmp_path("truth.json");
    write_truth(gt, path);
    std::ifstream f(path);
    REQUIRE(f.good());
    nlohmann::json doc = nlohmann::json::parse(f);
    CHECK(doc.at("format") == "p2p-truth");
    CHECK(doc.at("version") == 1);
    CHECK(doc.at("num_windows").get<std::size_t>() == gt.num_windows);
    REQUIRE(doc.at("flows").size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto& jf = doc.at("flows")[i];
        CHECK(jf.at("windows").size() == gt.num_windows);
        CHECK(jf.at("packets").size() == gt.flows[i].delivered.size());
        CHECK(jf.at("flow").at("ssrc").get<std::uint32_t>() == gt.flows[i].key.ssrc);
    }
}
