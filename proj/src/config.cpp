#include "stmask/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace stmask::conf {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

[[noreturn]] void missing(const std::string& section, const std::string& key) {
    throw ConfigError("missing config key: " + (section.empty() ? key : section + "." + key));
}

} // namespace

ConfigFile ConfigFile::parse(std::istream& in) {
    ConfigFile cf;
    std::ostringstream raw;
    raw << in.rdbuf();
    cf.raw_ = raw.str();

    std::istringstream ss(cf.raw_);
    std::string line, section;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string text = trim(line);
        if (text.empty() || text[0] == '#' || text[0] == ';') continue;
        if (text.front() == '[') {
            if (text.back() != ']' || text.size() < 3)
                throw ConfigError("malformed section header at line " + std::to_string(lineno));
            section = trim(text.substr(1, text.size() - 2));
            if (section.empty())
                throw ConfigError("empty section name at line " + std::to_string(lineno));
            cf.sections_[section];
            continue;
        }
        const std::size_t eq = text.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected key = value at line " + std::to_string(lineno));
        const std::string key = trim(text.substr(0, eq));
        const std::string value = trim(text.substr(eq + 1));
        if (key.empty()) throw ConfigError("empty key at line " + std::to_string(lineno));
        auto& sec = cf.sections_[section];
        if (sec.count(key))
            throw ConfigError("duplicate key '" + key + "' at line " + std::to_string(lineno));
        sec[key] = value;
    }
    return cf;
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    return parse(in);
}

bool ConfigFile::has(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
}

std::string ConfigFile::get_string(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    if (s == sections_.end()) missing(section, key);
    auto k = s->second.find(key);
    if (k == s->second.end()) missing(section, key);
    return k->second;
}

std::string ConfigFile::get_string(const std::string& section, const std::string& key,
                                   const std::string& fallback) const {
    return has(section, key) ? get_string(section, key) : fallback;
}

long long ConfigFile::get_int(const std::string& section, const std::string& key) const {
    const std::string v = get_string(section, key);
    std::size_t used = 0;
    long long out = 0;
    try {
        out = std::stoll(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty())
        throw ConfigError("expected integer for " + section + "." + key + ", got '" + v + "'");
    return out;
}

long long ConfigFile::get_int(const std::string& section, const std::string& key,
                              long long fallback) const {
    return has(section, key) ? get_int(section, key) : fallback;
}

double ConfigFile::get_double(const std::string& section, const std::string& key) const {
    const std::string v = get_string(section, key);
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty())
        throw ConfigError("expected number for " + section + "." + key + ", got '" + v + "'");
    return out;
}

double ConfigFile::get_double(const std::string& section, const std::string& key,
                              double fallback) const {
    return has(section, key) ? get_double(section, key) : fallback;
}

bool ConfigFile::get_bool(const std::string& section, const std::string& key) const {
    const std::string v = lower(get_string(section, key));
    if (v == "true" || v == "yes" || v == "1") return true;
    if (v == "false" || v == "no" || v == "0") return false;
    throw ConfigError("expected boolean for " + section + "." + key + ", got '" + v + "'");
}

bool ConfigFile::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    return has(section, key) ? get_bool(section, key) : fallback;
}

std::uint64_t ConfigFile::get_uint64(const std::string& section, const std::string& key) const {
    const std::string v = get_string(section, key);
    std::size_t used = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty() || v[0] == '-')
        throw ConfigError("expected unsigned integer for " + section + "." + key + ", got '" + v +
                          "'");
    return out;
}

std::uint64_t ConfigFile::get_uint64(const std::string& section, const std::string& key,
                                     std::uint64_t fallback) const {
    return has(section, key) ? get_uint64(section, key) : fallback;
}

std::vector<std::string> ConfigFile::get_list(const std::string& section,
                                              const std::string& key) const {
    const std::string v = get_string(section, key);
    std::vector<std::string> out;
    std::string item;
    std::istringstream ss(v);
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<std::uint64_t> ConfigFile::get_uint64_list(const std::string& section,
                                                       const std::string& key) const {
    std::vector<std::uint64_t> out;
    for (const std::string& item : get_list(section, key)) {
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size())
            throw ConfigError("expected unsigned integer list for " + section + "." + key);
        out.push_back(v);
    }
    return out;
}

void ConfigFile::require_known(const std::vector<std::string>& allowed) const {
    for (const auto& [section, keys] : sections_)
        for (const auto& [key, value] : keys) {
            const std::string full = section.empty() ? key : section + "." + key;
            if (std::find(allowed.begin(), allowed.end(), full) == allowed.end())
                throw ConfigError("unknown config key: " + full);
        }
}

} // namespace stmask::conf
