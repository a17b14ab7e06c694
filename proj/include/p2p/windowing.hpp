#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "p2p/errors.hpp"
#include "p2p/ingest.hpp"
#include "p2p/mat.hpp"

namespace p2p {

// Flow identity: the 6-tuple every packet is keyed by.
struct FlowKey {
    std::string ip_src;
    std::string ip_dst;
    std::uint16_t port_src = 0;
    std::uint16_t port_dst = 0;
    std::uint32_t ssrc = 0;
    std::uint8_t payload_type = 0;

    auto operator<=>(const FlowKey&) const = default;  // lexicographic, field order
    std::string str() const;
};

FlowKey key_of(const PacketRecord& r);

struct WindowingConfig {
    double window_ms = 500.0;          // label window span
    std::size_t history_packets = 2048;  // cross-flow packet history N
    std::size_t per_flow_packets = 128;  // feature rows per sample n
    double staleness_s = 1.0;          // activity horizon
    std::map<int, double> clock_rates; // payload_type -> RTP clock Hz
    std::set<int> video_payload_types;

    // Clock map covering the payload types the synthetic generator emits plus
    // the common static assignments; sessions with other types simply get the
    // jitter task masked unless the CLI config overrides the map.
    static WindowingConfig defaults();

    void validate() const;
    double window_s() const { return window_ms / 1000.0; }
    // 0.0 when the payload type has no configured clock.
    double clock_rate_for(int payload_type) const;
    bool is_video(int payload_type) const { return video_payload_types.count(payload_type) != 0; }
};

// One training example: one flow's feature window plus the QoS labels of the
// following window_ms span.
struct WindowSample {
    FlowKey flow;
    Mat<double> features;  // per_flow_packets x 6
    double label_bitrate_mbps = 0.0;
    double label_jitter_ms = 0.0;
    double label_fps = 0.0;
    bool label_loss = false;
    bool fps_mask = false;     // true iff video flow
    bool jitter_mask = false;  // true iff clock known and >= 2 packets in window
    double window_start = 0.0;
};

struct WindowBatch {
    double window_start = 0.0;
    std::vector<WindowSample> samples;  // distinct flows, active-flow order
};

// Extends 16-bit sequence numbers to 64 bits so consecutive deltas land in
// [-32768, 32767]; deltas are preserved modulo 65536.
std::vector<std::int64_t> unwrap_seq(const std::vector<std::uint16_t>& raw);

// RFC 3550 interarrival-jitter running estimate, kept per flow for the whole
// session. update() returns the estimate (in seconds) after the packet.
class JitterEstimator {
public:
    double update(double arrival, std::uint32_t rtp_timestamp, double clock_rate_hz);
    double value() const { return j_; }

private:
    double j_ = 0.0;
    bool has_prev_ = false;
    double prev_arrival_ = 0.0;
    std::uint32_t prev_ts_ = 0;
};

// Flows with >= per_flow_packets packets among the last history_packets
// packets before t and a packet no older than t - staleness_s, ordered by
// first-ever arrival (ties: lexicographic key). session must be arrival-
// sorted.
std::vector<FlowKey> active_flows(const std::vector<PacketRecord>& session, double t,
                                  const WindowingConfig& cfg);

// The six feature columns for exactly per_flow_packets packets of one flow:
// [abs_iat, rel_iat, size_bytes, ts_delta, marker, seq_diff]. Throws
// WrongCount on any other packet count.
Mat<double> build_features(const std::vector<const PacketRecord*>& flow_packets,
                           const WindowingConfig& cfg);

// Labels over the packets of one flow inside a window.
double label_bitrate(const std::vector<const PacketRecord*>& window_packets, double window_ms);
double label_fps(const std::vector<const PacketRecord*>& window_packets, double window_ms);
bool label_loss(const std::vector<std::int64_t>& window_ext_seqs);
// Mean of the per-packet running jitter values (seconds in, milliseconds out).
double label_jitter_ms(const std::vector<double>& window_j_seconds);

// Tumbling windows of window_ms starting at the session's first arrival;
// windows with no active flow are omitted.
std::vector<WindowBatch> build_dataset(const std::vector<PacketRecord>& session,
                                       const WindowingConfig& cfg);

// Line-delimited dataset interchange: a versioned JSON header line, then one
// JSON WindowBatch per line.
void write_dataset(const std::vector<WindowBatch>& batches, std::size_t per_flow_packets,
                   const std::string& path);
std::vector<WindowBatch> read_dataset(const std::string& path,
                                      std::size_t expect_per_flow_packets);

}  // namespace p2p
