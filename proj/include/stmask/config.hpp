#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace stmask::conf {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Flat key = value configuration with [section] headers. Lines are blank,
/// comments (first non-space character # or ;), section headers, or
/// assignments; values keep internal spaces and commas. Duplicate keys within
/// a section are rejected. Keys before any header live in the "" section.
class ConfigFile {
public:
    static ConfigFile parse(std::istream& in);
    static ConfigFile parse_file(const std::string& path);

    bool has(const std::string& section, const std::string& key) const;

    // Missing key throws ConfigError; the default overloads return instead.
    std::string get_string(const std::string& section, const std::string& key) const;
    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const;
    long long get_int(const std::string& section, const std::string& key) const;
    long long get_int(const std::string& section, const std::string& key, long long fallback) const;
    double get_double(const std::string& section, const std::string& key) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    bool get_bool(const std::string& section, const std::string& key) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    std::uint64_t get_uint64(const std::string& section, const std::string& key) const;
    std::uint64_t get_uint64(const std::string& section, const std::string& key,
                             std::uint64_t fallback) const;
    /// Comma-separated values; empty string gives an empty list.
    std::vector<std::string> get_list(const std::string& section, const std::string& key) const;
    std::vector<std::uint64_t> get_uint64_list(const std::string& section,
                                               const std::string& key) const;

    /// Throws ConfigError naming the first key not in the allowed set.
    /// Entries are "section.key" ("" section uses a bare key name).
    void require_known(const std::vector<std::string>& allowed) const;

    /// Exact bytes the file was parsed from, for snapshotting.
    const std::string& raw_text() const { return raw_; }

private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
    std::string raw_;
};

} // namespace stmask::conf
