#include "p2p/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string_view>

namespace p2p {

namespace {

using u8 = std::uint8_t;

std::uint16_t load16(const u8* p, bool big) {
    return big ? std::uint16_t(p[0] << 8 | p[1]) : std::uint16_t(p[1] << 8 | p[0]);
}

std::uint32_t load32(const u8* p, bool big) {
    if (big)
        return std::uint32_t(p[0]) << 24 | std::uint32_t(p[1]) << 16 | std::uint32_t(p[2]) << 8 |
               p[3];
    return std::uint32_t(p[3]) << 24 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[1]) << 8 | p[0];
}

std::string ipv4_str(const u8* a) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%u.%u.%u.%u", a[0], a[1], a[2], a[3]);
    return buf;
}

std::string ipv6_str(const u8* a) {
    std::uint16_t g[8];
    for (int i = 0; i < 8; ++i) g[i] = std::uint16_t(a[2 * i] << 8 | a[2 * i + 1]);
    // longest run of zero groups (length >= 2) collapses to ::
    int best = -1, best_len = 0;
    for (int i = 0; i < 8;) {
        if (g[i] != 0) {
            ++i;
            continue;
        }
        int j = i;
        while (j < 8 && g[j] == 0) ++j;
        if (j - i > best_len) {
            best = i;
            best_len = j - i;
        }
        i = j;
    }
    if (best_len < 2) best = -1;
    std::string s;
    char buf[8];
    for (int i = 0; i < 8;) {
        if (i == best) {
            s += "::";
            i += best_len;
            continue;
        }
        if (!s.empty() && s.back() != ':') s += ':';
        std::snprintf(buf, sizeof buf, "%x", g[i]);
        s += buf;
        ++i;
    }
    return s;
}

struct UdpDatagram {
    std::string ip_src, ip_dst;
    std::uint16_t port_src = 0, port_dst = 0;
    const u8* payload = nullptr;
    std::size_t payload_len = 0;  // claimed by the UDP header
};

enum class FrameClass { udp, non_ip, non_udp };

// Strips the link and network layers of one captured frame. Returns the UDP
// datagram when the frame is parseable UDP, otherwise the reason it is not.
FrameClass strip_to_udp(const u8* p, std::size_t len, std::uint16_t linktype, UdpDatagram& out) {
    std::uint16_t ethertype = 0;
    bool have_ethertype = false;
    switch (linktype) {
        case 1: {  // Ethernet
            if (len < 14) return FrameClass::non_ip;
            ethertype = load16(p + 12, true);
            p += 14;
            len -= 14;
            // 802.1Q / 802.1ad tags
            while ((ethertype == 0x8100 || ethertype == 0x88A8) && len >= 4) {
                ethertype = load16(p + 2, true);
                p += 4;
                len -= 4;
            }
            have_ethertype = true;
            break;
        }
        case 113: {  // Linux cooked capture
            if (len < 16) return FrameClass::non_ip;
            ethertype = load16(p + 14, true);
            p += 16;
            len -= 16;
            have_ethertype = true;
            break;
        }
        case 101:  // raw IP
            break;
        case 0: {  // BSD loopback: 4-byte address family, capturer byte order
            if (len < 4) return FrameClass::non_ip;
            std::uint32_t family = load32(p, false);
            if (family > 0xFFFF) family = load32(p, true);
            p += 4;
            len -= 4;
            if (family == 2)
                ethertype = 0x0800;
            else if (family == 24 || family == 28 || family == 30)
                ethertype = 0x86DD;
            else
                return FrameClass::non_ip;
            have_ethertype = true;
            break;
        }
        default:
            return FrameClass::non_ip;
    }

    int ip_version;
    if (have_ethertype) {
        if (ethertype == 0x0800)
            ip_version = 4;
        else if (ethertype == 0x86DD)
            ip_version = 6;
        else
            return FrameClass::non_ip;
    } else {
        if (len < 1) return FrameClass::non_ip;
        ip_version = p[0] >> 4;
    }

    std::uint8_t proto;
    if (ip_version == 4) {
        if (len < 20 || (p[0] >> 4) != 4) return FrameClass::non_ip;
        const std::size_t ihl = std::size_t(p[0] & 0x0F) * 4;
        if (ihl < 20 || ihl > len) return FrameClass::non_ip;
        const std::uint16_t frag = std::uint16_t(load16(p + 6, true) & 0x1FFF);
        proto = p[9];
        out.ip_src = ipv4_str(p + 12);
        out.ip_dst = ipv4_str(p + 16);
        if (frag != 0) return FrameClass::non_udp;  // not the first fragment
        p += ihl;
        len -= ihl;
    } else if (ip_version == 6) {
        if (len < 40 || (p[0] >> 4) != 6) return FrameClass::non_ip;
        proto = p[6];
        out.ip_src = ipv6_str(p + 8);
        out.ip_dst = ipv6_str(p + 24);
        p += 40;
        len -= 40;
        // walk the extension header chain
        for (;;) {
            if (proto == 0 || proto == 43 || proto == 60) {
                if (len < 8) return FrameClass::non_udp;
                const std::size_t ext = (std::size_t(p[1]) + 1) * 8;
                if (ext > len) return FrameClass::non_udp;
                proto = p[0];
                p += ext;
                len -= ext;
            } else if (proto == 44) {  // fragment header, fixed 8 bytes
                if (len < 8) return FrameClass::non_udp;
                if ((load16(p + 2, true) & 0xFFF8) != 0) return FrameClass::non_udp;
                proto = p[0];
                p += 8;
                len -= 8;
            } else {
                break;
            }
        }
    } else {
        return FrameClass::non_ip;
    }

    if (proto != 17) return FrameClass::non_udp;
    if (len < 8) return FrameClass::non_udp;
    const std::uint16_t ulen = load16(p + 4, true);
    if (ulen < 8 || std::size_t(ulen) > len) return FrameClass::non_udp;
    out.port_src = load16(p, true);
    out.port_dst = load16(p + 2, true);
    out.payload = p + 8;
    out.payload_len = std::size_t(ulen) - 8;
    return FrameClass::udp;
}

// Classifies one frame's UDP payload and appends an accepted RTP record.
void consider_frame(const u8* p, std::size_t len, std::uint16_t linktype, double ts,
                    IngestStats& st, std::vector<PacketRecord>& out) {
    UdpDatagram d;
    switch (strip_to_udp(p, len, linktype, d)) {
        case FrameClass::non_ip:
            ++st.non_ip;
            return;
        case FrameClass::non_udp:
            ++st.non_udp;
            return;
        case FrameClass::udp:
            break;
    }
    RtpHeader h;
    try {
        h = parse_rtp_header(d.payload, d.payload_len);
    } catch (const TooShort&) {
        ++st.not_rtp;
        return;
    } catch (const BadVersion&) {
        ++st.not_rtp;
        return;
    }
    if (h.payload_type >= 64 && h.payload_type <= 95) {
        ++st.rtcp_excluded;
        return;
    }
    PacketRecord r;
    r.arrival_time = ts;  // raw capture time; rebased after the sort
    r.ip_src = std::move(d.ip_src);
    r.ip_dst = std::move(d.ip_dst);
    r.port_src = d.port_src;
    r.port_dst = d.port_dst;
    r.ssrc = h.ssrc;
    r.payload_type = std::uint8_t(h.payload_type);
    r.seq = h.seq;
    r.rtp_timestamp = h.timestamp;
    r.marker = h.marker;
    r.size_bytes = std::uint32_t(d.payload_len);
    ++st.accepted;
    out.push_back(std::move(r));
}

void parse_classic_pcap(const std::vector<u8>& b, const std::string& path, IngestStats& st,
                        std::vector<PacketRecord>& out) {
    const std::uint32_t magic_le = load32(b.data(), false);
    bool big, nanos;
    if (magic_le == 0xA1B2C3D4) {
        big = false;
        nanos = false;
    } else if (magic_le == 0xA1B23C4D) {
        big = false;
        nanos = true;
    } else if (magic_le == 0xD4C3B2A1) {
        big = true;
        nanos = false;
    } else if (magic_le == 0x4D3CB2A1) {
        big = true;
        nanos = true;
    } else {
        throw UnreadableFile(path + ": not a pcap or pcapng file");
    }
    const std::uint16_t linktype = std::uint16_t(load32(b.data() + 20, big));
    switch (linktype) {
        case 0:
        case 1:
        case 101:
        case 113:
            break;
        default:
            throw UnreadableFile(path + ": unsupported link type " + std::to_string(linktype));
    }
    const double tick = nanos ? 1e-9 : 1e-6;
    std::size_t off = 24;
    while (off < b.size()) {
        if (b.size() - off < 16) {
            ++st.truncated;  // partial trailing record header
            break;
        }
        const std::uint32_t ts_sec = load32(b.data() + off, big);
        const std::uint32_t ts_frac = load32(b.data() + off + 4, big);
        const std::uint32_t caplen = load32(b.data() + off + 8, big);
        const std::uint32_t wirelen = load32(b.data() + off + 12, big);
        off += 16;
        if (b.size() - off < caplen) {
            ++st.truncated;  // capture stops mid-packet
            break;
        }
        ++st.frames_total;
        if (caplen < wirelen) {
            ++st.truncated;  // snapped by the capture's snaplen
        } else {
            consider_frame(b.data() + off, caplen, linktype,
                           double(ts_sec) + double(ts_frac) * tick, st, out);
        }
        off += caplen;
    }
}

void parse_pcapng(const std::vector<u8>& b, const std::string& path, IngestStats& st,
                  std::vector<PacketRecord>& out) {
    struct Interface {
        std::uint16_t linktype = 0;
        double tick = 1e-6;
        bool supported = false;
    };
    std::vector<Interface> ifaces;
    bool big = false;
    bool in_section = false;
    std::size_t off = 0;
    while (off < b.size()) {
        if (b.size() - off < 12) {
            ++st.truncated;
            break;
        }
        const std::uint32_t raw_type = load32(b.data() + off, false);
        if (raw_type == 0x0A0D0D0A) {  // section header: re-derive byte order
            const std::uint32_t bom = load32(b.data() + off + 8, false);
            if (bom == 0x1A2B3C4D)
                big = false;
            else if (bom == 0x4D3C2B1A)
                big = true;
            else
                throw UnreadableFile(path + ": bad pcapng byte-order magic");
            ifaces.clear();
            in_section = true;
        } else if (!in_section) {
            throw UnreadableFile(path + ": pcapng data before section header");
        }
        const std::uint32_t type = load32(b.data() + off, big);
        const std::uint32_t total = load32(b.data() + off + 4, big);
        if (total < 12 || total % 4 != 0) throw UnreadableFile(path + ": bad pcapng block length");
        if (b.size() - off < total) {
            ++st.truncated;
            break;
        }
        const u8* body = b.data() + off + 8;
        const std::size_t body_len = total - 12;
        if (type == 0x00000001) {  // interface description
            if (body_len < 8) throw UnreadableFile(path + ": short interface block");
            Interface iface;
            iface.linktype = load16(body, big);
            iface.supported = iface.linktype == 0 || iface.linktype == 1 ||
                              iface.linktype == 101 || iface.linktype == 113;
            // options: code 9 = if_tsresol
            std::size_t o = 8;
            while (o + 4 <= body_len) {
                const std::uint16_t code = load16(body + o, big);
                const std::uint16_t olen = load16(body + o + 2, big);
                if (code == 0) break;
                if (o + 4 + olen > body_len) break;
                if (code == 9 && olen >= 1) {
                    const u8 r = body[o + 4];
                    iface.tick = r & 0x80 ? std::pow(2.0, -double(r & 0x7F))
                                          : std::pow(10.0, -double(r));
                }
                o += 4 + (std::size_t(olen) + 3) / 4 * 4;
            }
            ifaces.push_back(iface);
        } else if (type == 0x00000006) {  // enhanced packet
            if (body_len < 20) throw UnreadableFile(path + ": short packet block");
            const std::uint32_t ifid = load32(body, big);
            const std::uint64_t ts =
                (std::uint64_t(load32(body + 4, big)) << 32) | load32(body + 8, big);
            const std::uint32_t caplen = load32(body + 12, big);
            const std::uint32_t wirelen = load32(body + 16, big);
            if (ifid >= ifaces.size()) throw UnreadableFile(path + ": packet for unknown interface");
            if (caplen > body_len - 20) throw UnreadableFile(path + ": packet data overruns block");
            ++st.frames_total;
            const Interface& iface = ifaces[ifid];
            if (caplen < wirelen)
                ++st.truncated;
            else if (!iface.supported)
                ++st.non_ip;
            else
                consider_frame(body + 20, caplen, iface.linktype, double(ts) * iface.tick, st,
                               out);
        }
        // all other block types (simple packets, statistics, ...) are skipped
        off += total;
    }
    if (!in_section) throw UnreadableFile(path + ": not a pcap or pcapng file");
}

}  // namespace

RtpHeader parse_rtp_header(const u8* data, std::size_t len) {
    if (len < 12) throw TooShort("RTP header needs 12 bytes, got " + std::to_string(len));
    RtpHeader h;
    h.version = data[0] >> 6;
    if (h.version != 2) throw BadVersion("RTP version " + std::to_string(h.version) + ", want 2");
    h.padding = (data[0] & 0x20) != 0;
    h.extension = (data[0] & 0x10) != 0;
    h.csrc_count = data[0] & 0x0F;
    h.marker = (data[1] & 0x80) != 0;
    h.payload_type = data[1] & 0x7F;
    h.seq = load16(data + 2, true);
    h.timestamp = load32(data + 4, true);
    h.ssrc = load32(data + 8, true);
    h.header_bytes = 12 + 4 * std::size_t(h.csrc_count);
    if (len < h.header_bytes)
        throw TooShort("RTP header with " + std::to_string(h.csrc_count) + " CSRCs needs " +
                       std::to_string(h.header_bytes) + " bytes, got " + std::to_string(len));
    return h;
}

std::vector<PacketRecord> ingest_pcap(const std::string& path, bool udp_only,
                                      IngestStats* stats) {
    (void)udp_only;  // reporting knob for the CLI; acceptance is UDP-gated always
    std::ifstream f(path, std::ios::binary);
    if (!f) throw UnreadableFile(path + ": cannot open");
    std::vector<u8> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) throw UnreadableFile(path + ": read error");
    if (bytes.size() < 24) throw UnreadableFile(path + ": too short for a capture file");

    IngestStats st;
    std::vector<PacketRecord> records;
    if (load32(bytes.data(), false) == 0x0A0D0D0A)
        parse_pcapng(bytes, path, st, records);
    else
        parse_classic_pcap(bytes, path, st, records);

    std::stable_sort(records.begin(), records.end(),
                     [](const PacketRecord& a, const PacketRecord& b) {
                         return a.arrival_time < b.arrival_time;
                     });
    if (records.empty()) throw NoRtpFound(path + ": no RTP packets found");
    const double t0 = records.front().arrival_time;
    for (auto& r : records) r.arrival_time -= t0;
    if (stats) *stats = st;
    return records;
}

const char* const kPacketLogHeader =
    "arrival_time,ip_src,ip_dst,port_src,port_dst,ssrc,payload_type,seq,rtp_timestamp,marker,"
    "size_bytes";

std::string format_seconds(double t) {
    char buf[64];
    for (int prec : {6, 9, 12, 17, 21, 25, 30}) {
        std::snprintf(buf, sizeof buf, "%.*f", prec, t);
        double back;
        auto [p, ec] = std::from_chars(buf, buf + std::strlen(buf), back);
        (void)p;
        if (ec == std::errc() && back == t) break;
    }
    return buf;
}

namespace {

// Strict base-10 unsigned parse of a full field.
bool parse_uint(std::string_view s, std::uint64_t& out, std::uint64_t max) {
    if (s.empty() || s.size() > 20) return false;
    for (char c : s)
        if (c < '0' || c > '9') return false;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size() && out <= max;
}

bool parse_time(std::string_view s, double& out) {
    if (s.empty() || s[0] == '-' || s[0] == '+') return false;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size() && std::isfinite(out) && out >= 0.0;
}

[[noreturn]] void bad_line(std::size_t lineno, const std::string& what) {
    throw MalformedLine("line " + std::to_string(lineno) + ": " + what);
}

}  // namespace

std::vector<PacketRecord> read_packet_log(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw UnreadableFile(path + ": cannot open");
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(f, line)) throw MalformedLine("line 1: missing header");
    ++lineno;
    if (line != kPacketLogHeader) bad_line(1, "bad header");

    std::vector<PacketRecord> records;
    double prev = -1.0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) bad_line(lineno, "empty line");
        if (std::count(line.begin(), line.end(), ',') != 10)
            bad_line(lineno, "expected 11 comma-separated fields");
        std::string_view v(line);
        std::string_view field[11];
        for (auto& fv : field) {
            const std::size_t comma = v.find(',');
            fv = v.substr(0, comma);
            if (comma != std::string_view::npos) v.remove_prefix(comma + 1);
        }

        PacketRecord r;
        std::uint64_t u;
        if (!parse_time(field[0], r.arrival_time)) bad_line(lineno, "bad arrival_time");
        if (field[1].empty()) bad_line(lineno, "empty ip_src");
        if (field[2].empty()) bad_line(lineno, "empty ip_dst");
        r.ip_src = std::string(field[1]);
        r.ip_dst = std::string(field[2]);
        if (!parse_uint(field[3], u, 65535)) bad_line(lineno, "bad port_src");
        r.port_src = std::uint16_t(u);
        if (!parse_uint(field[4], u, 65535)) bad_line(lineno, "bad port_dst");
        r.port_dst = std::uint16_t(u);
        if (!parse_uint(field[5], u, 0xFFFFFFFFULL)) bad_line(lineno, "bad ssrc");
        r.ssrc = std::uint32_t(u);
        if (!parse_uint(field[6], u, 127)) bad_line(lineno, "payload_type out of range");
        r.payload_type = std::uint8_t(u);
        if (!parse_uint(field[7], u, 65535)) bad_line(lineno, "bad seq");
        r.seq = std::uint16_t(u);
        if (!parse_uint(field[8], u, 0xFFFFFFFFULL)) bad_line(lineno, "bad rtp_timestamp");
        r.rtp_timestamp = std::uint32_t(u);
        if (field[9] != "0" && field[9] != "1") bad_line(lineno, "marker must be 0 or 1");
        r.marker = field[9] == "1";
        if (!parse_uint(field[10], u, 0xFFFFFFFFULL) || u < 12)
            bad_line(lineno, "size_bytes must be an integer >= 12");
        r.size_bytes = std::uint32_t(u);

        if (r.arrival_time < prev)
            throw NonMonotonicTime("line " + std::to_string(lineno) + ": arrival_time " +
                                   format_seconds(r.arrival_time) + " after " +
                                   format_seconds(prev));
        prev = r.arrival_time;
        records.push_back(std::move(r));
    }
    return records;
}

void write_packet_log(const std::vector<PacketRecord>& records, const std::string& path) {
    std::ofstream f(path, std::ios::binary);  // binary: LF endings everywhere
    if (!f) throw UnreadableFile(path + ": cannot open for writing");
    f << kPacketLogHeader << '\n';
    for (const auto& r : records) {
        f << format_seconds(r.arrival_time) << ',' << r.ip_src << ',' << r.ip_dst << ','
          << r.port_src << ',' << r.port_dst << ',' << r.ssrc << ',' << unsigned(r.payload_type)
          << ',' << r.seq << ',' << r.rtp_timestamp << ',' << (r.marker ? '1' : '0') << ','
          << r.size_bytes << '\n';
    }
    if (!f.flush()) throw UnreadableFile(path + ": write error");
}

}  // namespace p2p
