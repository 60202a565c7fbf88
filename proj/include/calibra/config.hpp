#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace calibra {

inline constexpr const char* kVersionString = "calibra 0.1.0";

// ===== key=value config =====

// Flat plain-text configuration: one `key = value` per line, `#` comments,
// duplicate keys rejected. Insertion order is preserved so the config echoes
// back byte-for-byte stable.
class Config {
public:
    static Config from_file(const std::string& path);
    static Config from_text(const std::string& text);

    bool has(const std::string& key) const;

    // Adds or replaces; replacements keep the original position so overrides
    // do not reshuffle the echo.
    void set(const std::string& key, const std::string& value);

    // All getters throw std::invalid_argument("missing config key: <key>")
    // when the key is absent, and name both key and value on a parse failure.
    const std::string& get_string(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    std::uint64_t get_uint64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;  // true/false/1/0
    std::vector<double> get_double_list(const std::string& key) const;  // comma-separated

    std::string get_string_or(const std::string& key, const std::string& fallback) const;
    std::int64_t get_int_or(const std::string& key, std::int64_t fallback) const;
    std::uint64_t get_uint64_or(const std::string& key, std::uint64_t fallback) const;
    double get_double_or(const std::string& key, double fallback) const;
    bool get_bool_or(const std::string& key, bool fallback) const;

    // Canonical `key=value` echo, one line per entry, insertion order.
    std::string to_text() const;

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

// ===== run manifests =====

// Provenance record for one command invocation. Written into the artifact
// directory before any heavy work begins; contains no timestamps so re-runs
// stay byte-identical.
struct RunManifest {
    std::string command;
    std::uint64_t seed = 0;
    Config config;  // fully resolved (flag overrides applied)
    std::vector<std::pair<std::string, std::string>> inputs;   // name -> path
    std::vector<std::pair<std::string, std::string>> outputs;  // name -> path

    std::string to_text() const;
};

// Writes `<dir>/manifest.txt`, creating `dir` first if needed.
void write_manifest(const std::string& dir, const RunManifest& m);

// Small file helpers shared by the command-line tool.
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace calibra
