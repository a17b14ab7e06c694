#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "p2p/errors.hpp"

namespace p2p {

// One accepted RTP packet. arrival_time is seconds since the first accepted
// packet of the session; size_bytes is the UDP payload length including the
// RTP header.
struct PacketRecord {
    double arrival_time = 0.0;
    std::string ip_src;
    std::string ip_dst;
    std::uint16_t port_src = 0;
    std::uint16_t port_dst = 0;
    std::uint32_t ssrc = 0;
    std::uint8_t payload_type = 0;  // 0..127
    std::uint16_t seq = 0;
    std::uint32_t rtp_timestamp = 0;
    bool marker = false;
    std::uint32_t size_bytes = 0;  // >= 12

    bool operator==(const PacketRecord&) const = default;
};

// Decoded fixed RTP header (RFC 3550 section 5.1).
struct RtpHeader {
    int version = 0;
    bool padding = false;
    bool extension = false;
    bool marker = false;
    int csrc_count = 0;   // 0..15
    int payload_type = 0; // 0..127
    std::uint16_t seq = 0;
    std::uint32_t timestamp = 0;
    std::uint32_t ssrc = 0;
    std::size_t header_bytes = 0;  // 12 + 4*csrc_count
};

// Throws TooShort (fewer than 12 + 4*CC bytes) or BadVersion (version != 2).
RtpHeader parse_rtp_header(const std::uint8_t* data, std::size_t len);

struct IngestStats {
    std::size_t frames_total = 0;   // link-layer frames in the capture
    std::size_t truncated = 0;      // caplen < wire length, skipped
    std::size_t non_ip = 0;         // unhandled link or network protocol
    std::size_t non_udp = 0;        // IP but not parseable UDP
    std::size_t not_rtp = 0;        // UDP payload too short or version != 2
    std::size_t rtcp_excluded = 0;  // version 2 with payload type 64..95
    std::size_t accepted = 0;
};

// Reads a classic pcap or pcapng file, keeps UDP payloads that parse as RTP
// (version 2, payload type outside the RTCP range 64..95), sorts by capture
// timestamp and rebases arrival_time to start at 0. udp_only only tightens
// the diagnostics: callers warn when the capture carried non-UDP traffic.
// Throws UnreadableFile or NoRtpFound.
std::vector<PacketRecord> ingest_pcap(const std::string& path, bool udp_only = false,
                                      IngestStats* stats = nullptr);

// Portable packet-log interchange format: a fixed header line, then one
// comma-separated record per line. write . read is the identity on record
// streams; read . write is the identity on well-formed files.
extern const char* const kPacketLogHeader;

// Throws UnreadableFile, MalformedLine (with the 1-based line number in the
// message) or NonMonotonicTime.
std::vector<PacketRecord> read_packet_log(const std::string& path);

void write_packet_log(const std::vector<PacketRecord>& records, const std::string& path);

// Formats seconds in fixed notation with the fewest fractional digits (>= 6)
// that parse back to exactly the same double.
std::string format_seconds(double t);

}  // namespace p2p
