#include "calibra/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace calibra {

// ===== parsing =====

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void missing(const std::string& key) {
    throw std::invalid_argument("missing config key: " + key);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& wanted) {
    throw std::invalid_argument("config key " + key + ": cannot parse \"" + value + "\" as " +
                                wanted);
}

}  // namespace

Config Config::from_text(const std::string& text) {
    Config cfg;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": expected key=value, got \"" + t + "\"");
        }
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": empty key");
        }
        if (cfg.has(key)) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": duplicate key " + key);
        }
        cfg.entries_.emplace_back(std::move(key), std::move(value));
    }
    return cfg;
}

Config Config::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    try {
        return from_text(buf.str());
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

bool Config::has(const std::string& key) const {
    for (const auto& [k, v] : entries_) {
        if (k == key) return true;
    }
    return false;
}

void Config::set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_) {
        if (k == key) {
            v = value;
            return;
        }
    }
    entries_.emplace_back(key, value);
}

// ===== getters =====

const std::string& Config::get_string(const std::string& key) const {
    for (const auto& [k, v] : entries_) {
        if (k == key) return v;
    }
    missing(key);
}

std::int64_t Config::get_int(const std::string& key) const {
    const std::string& v = get_string(key);
    errno = 0;
    char* end = nullptr;
    long long n = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) {
        bad_value(key, v, "an integer");
    }
    return static_cast<std::int64_t>(n);
}

std::uint64_t Config::get_uint64(const std::string& key) const {
    const std::string& v = get_string(key);
    errno = 0;
    char* end = nullptr;
    unsigned long long n = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || v[0] == '-' || end != v.c_str() + v.size() || errno == ERANGE) {
        bad_value(key, v, "an unsigned integer");
    }
    return static_cast<std::uint64_t>(n);
}

double Config::get_double(const std::string& key) const {
    const std::string& v = get_string(key);
    errno = 0;
    char* end = nullptr;
    double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) {
        bad_value(key, v, "a number");
    }
    return d;
}

bool Config::get_bool(const std::string& key) const {
    const std::string& v = get_string(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "a boolean (true/false/1/0)");
}

std::vector<double> Config::get_double_list(const std::string& key) const {
    const std::string& raw = get_string(key);
    std::vector<double> out;
    std::istringstream is(raw);
    std::string item;
    while (std::getline(is, item, ',')) {
        std::string t = trim(item);
        errno = 0;
        char* end = nullptr;
        double d = std::strtod(t.c_str(), &end);
        if (t.empty() || end != t.c_str() + t.size() || errno == ERANGE) {
            bad_value(key, raw, "a comma-separated number list");
        }
        out.push_back(d);
    }
    if (out.empty()) bad_value(key, raw, "a comma-separated number list");
    return out;
}

std::string Config::get_string_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get_string(key) : fallback;
}
std::int64_t Config::get_int_or(const std::string& key, std::int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
}
std::uint64_t Config::get_uint64_or(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? get_uint64(key) : fallback;
}
double Config::get_double_or(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}
bool Config::get_bool_or(const std::string& key, bool fallback) const {
    return has(key) ? get_bool(key) : fallback;
}

std::string Config::to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : entries_) os << k << '=' << v << '\n';
    return os.str();
}

// ===== manifests =====

std::string RunManifest::to_text() const {
    std::ostringstream os;
    os << "command=" << command << '\n';
    os << "version=" << kVersionString << '\n';
    os << "seed=" << seed << '\n';
    for (const auto& [name, path] : inputs) os << "input." << name << '=' << path << '\n';
    for (const auto& [name, path] : outputs) os << "output." << name << '=' << path << '\n';
    for (const auto& [k, v] : config.entries()) os << "config." << k << '=' << v << '\n';
    return os.str();
}

void write_manifest(const std::string& dir, const RunManifest& m) {
    std::filesystem::create_directories(dir);
    write_text_file(dir + "/manifest.txt", m.to_text());
}

// ===== file helpers =====

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw std::runtime_error("failed writing " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return buf.str();
}

}  // namespace calibra
