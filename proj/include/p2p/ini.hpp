#pragma once
// Minimal INI reader: `[section]` headers, `key = value` pairs, `#`/`;`
// comments, blank lines.  Section order and repetition are preserved so a
// file may describe several instances of the same section kind.
#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "p2p/errors.hpp"

namespace p2p {

struct IniEntry {
    std::string section;  // "" before the first header
    std::string key;      // empty for a bare section-header entry
    std::string value;
    std::size_t line = 0;
};

namespace detail {
inline std::string ini_trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}
}  // namespace detail

// Every section header becomes one entry with an empty key so consumers can
// see empty sections; every `key = value` becomes one entry.
inline std::vector<IniEntry> parse_ini_text(const std::string& text) {
    std::vector<IniEntry> out;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find_first_of("#;");
        if (hash != std::string::npos) raw.erase(hash);
        const std::string line = detail::ini_trim(raw);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3)
                throw MalformedLine("ini line " + std::to_string(lineno) +
                                    ": malformed section header '" + line + "'");
            section = detail::ini_trim(line.substr(1, line.size() - 2));
            out.push_back({section, "", "", lineno});
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw MalformedLine("ini line " + std::to_string(lineno) +
                                ": expected 'key = value', got '" + line + "'");
        const std::string key = detail::ini_trim(line.substr(0, eq));
        const std::string value = detail::ini_trim(line.substr(eq + 1));
        if (key.empty())
            throw MalformedLine("ini line " + std::to_string(lineno) + ": empty key");
        out.push_back({section, key, value, lineno});
    }
    return out;
}

inline std::vector<IniEntry> parse_ini_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw UnreadableFile("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_ini_text(ss.str());
}

}  // namespace p2p
