#pragma once
// Synthetic RTC traffic with exact ground truth.  Flows emit frames (video /
// screen) or a fixed packet cadence (audio); arrivals get Gaussian delay
// noise; drops are applied after sequence assignment so receivers observe
// gaps.  The generator records its own per-window labels and a per-packet
// RFC 3550 jitter trace computed independently of the labeling code, so the
// windowing pipeline can be checked end to end against known answers.
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "p2p/errors.hpp"
#include "p2p/ingest.hpp"
#include "p2p/windowing.hpp"

namespace p2p {

enum class Media { video, audio, screen };

const char* media_name(Media m);
Media media_from_name(const std::string& name);  // InvalidScenario on unknown

struct FlowSpec {
    Media media = Media::video;
    std::string ip_src;  // defaulted from ssrc when empty
    std::string ip_dst = "10.200.0.1";
    std::uint16_t port_src = 0;  // defaulted from ssrc when 0
    std::uint16_t port_dst = 5006;
    std::uint32_t ssrc = 0;
    int payload_type = -1;     // -1: default for the media kind
    double clock_rate = 0.0;   // 0: default for the media kind
    double fps = 24.0;         // frames per second (video / screen)
    double bitrate_kbps = 400.0;
    double start_s = 0.0;
    double stop_s = 0.0;       // 0: run to scenario end
    double delay_noise_ms = 0.0;

    // steady-state packet drops: Bernoulli burst starts
    double drop_rate = 0.0;
    int drop_burst = 1;

    // slow triangle modulation of the target rate and the frame rate
    double rate_mod_frac = 0.0;
    double rate_mod_period_s = 12.0;
    double fps_mod_frac = 0.0;
    double fps_mod_period_s = 17.0;

    // loss episodes: a queue-buildup signature (inter-arrival dilation ramp)
    // followed by a burst-droppy interval
    double episodes_per_min = 0.0;
    double episode_len_s = 0.5;
    double episode_drop_rate = 0.25;
    int episode_burst = 4;
    double dilation_lead_s = 0.7;
    double dilation_max_ms = 80.0;
};

struct SynthScenario {
    double duration_s = 60.0;
    std::uint64_t seed = 1;
    std::vector<FlowSpec> flows;

    // fills media-dependent defaults, then checks invariants
    void finalize();  // InvalidScenario
};

// Ground truth, all computed from the generator's own records.
struct TruthPacket {
    double arrival = 0.0;
    std::uint64_t seq64 = 0;   // true (unwrapped) sequence counter
    double jitter_s = 0.0;     // RFC 3550 estimate after this packet
};

struct TruthWindow {
    double bitrate_mbps = 0.0;
    double fps = 0.0;          // distinct frames per second
    double jitter_mean_ms = 0.0;
    bool loss = false;         // a gap is visible inside this window
    std::uint32_t packets = 0;
};

struct FlowTruth {
    FlowKey key;
    Media media = Media::video;
    double configured_fps = 0.0;
    std::vector<std::uint64_t> dropped;   // true seq counters removed
    std::vector<TruthPacket> delivered;   // final arrival order
    std::vector<TruthWindow> windows;     // one per session window index
};

struct GroundTruth {
    double t0 = 0.0;
    double window_ms = 0.0;
    std::size_t num_windows = 0;
    std::vector<FlowTruth> flows;

    const FlowTruth* find(const FlowKey& key) const;
    // window index for a dataset window_start, or num_windows if out of range
    std::size_t window_index(double window_start) const;
};

// Scenario must have been finalize()d.  The windowing config supplies the
// window length the truth records are bucketed by.
std::pair<std::vector<PacketRecord>, GroundTruth> generate(const SynthScenario& sc,
                                                           const WindowingConfig& wcfg);

// Scenario whose realized active-flow statistics mirror the target corpus
// shape: mean concurrency about 3.4, maximum 11, about one window in ten
// with a single flow.  Deterministic in (duration, seed).
SynthScenario default_benchmark_scenario(double duration_s, std::uint64_t seed);

// INI scenario file: global keys `duration_s`, `seed`; one `[flow]` section
// per flow with the FlowSpec keys.  Unknown keys are rejected.
SynthScenario parse_scenario_file(const std::string& path);
SynthScenario parse_scenario_text(const std::string& text);

void write_truth(const GroundTruth& gt, const std::string& path);

}  // namespace p2p
