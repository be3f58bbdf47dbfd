#include "protosal/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "protosal/common.hpp"

namespace protosal {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::string fmt_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

Config Config::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_string(ss.str(), path);
}

Config Config::parse_string(const std::string& text, const std::string& origin) {
    Config c;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    auto fail = [&](const std::string& msg) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + msg);
    };
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']') fail("unterminated section header");
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty()) fail("empty section name");
            continue;
        }
        std::size_t eq = t.find('=');
        if (eq == std::string::npos) fail("expected `key = value`");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) fail("empty key");
        std::string full = section.empty() ? key : section + "." + key;
        if (c.has(full)) fail("duplicate key `" + full + "`");
        c.items_.emplace_back(std::move(full), std::move(value));
    }
    return c;
}

const std::string* Config::find(const std::string& key) const {
    for (const auto& [k, v] : items_)
        if (k == key) return &v;
    return nullptr;
}

bool Config::has(const std::string& key) const { return find(key) != nullptr; }

std::string Config::get_str(const std::string& key) const {
    if (const auto* v = find(key)) return *v;
    throw ConfigError("missing config key: " + key);
}

std::string Config::get_str(const std::string& key, const std::string& fallback) const {
    if (const auto* v = find(key)) return *v;
    return fallback;
}

std::int64_t Config::get_int(const std::string& key) const {
    std::string v = get_str(key);
    errno = 0;
    char* end = nullptr;
    long long r = std::strtoll(v.c_str(), &end, 10);
    if (errno || end == v.c_str() || *end != '\0')
        throw ConfigError("key " + key + ": `" + v + "` is not an integer");
    return r;
}

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
}

double Config::get_real(const std::string& key) const {
    std::string v = get_str(key);
    errno = 0;
    char* end = nullptr;
    double r = std::strtod(v.c_str(), &end);
    if (errno || end == v.c_str() || *end != '\0')
        throw ConfigError("key " + key + ": `" + v + "` is not a number");
    return r;
}

double Config::get_real(const std::string& key, double fallback) const {
    return has(key) ? get_real(key) : fallback;
}

bool Config::get_bool(const std::string& key) const {
    std::string v = get_str(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key " + key + ": `" + v + "` is not a boolean");
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    return has(key) ? get_bool(key) : fallback;
}

void Config::set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : items_)
        if (k == key) {
            v = value;
            return;
        }
    items_.emplace_back(key, value);
}

void Config::set_int(const std::string& key, std::int64_t value) {
    set(key, std::to_string(value));
}

void Config::set_real(const std::string& key, double value) { set(key, fmt_real(value)); }

void Config::set_bool(const std::string& key, bool value) {
    set(key, value ? "true" : "false");
}

std::string Config::serialize() const {
    // bare keys first, then sections in first-appearance order; a bare key
    // emitted after a section header would re-parse into that section
    std::vector<std::string> order;
    for (const auto& [k, v] : items_) {
        std::size_t dot = k.rfind('.');
        std::string sec = dot == std::string::npos ? "" : k.substr(0, dot);
        if (std::find(order.begin(), order.end(), sec) == order.end())
            order.push_back(sec);
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const std::string& a, const std::string& b) {
                         return a.empty() && !b.empty();
                     });
    std::ostringstream os;
    bool first = true;
    for (const auto& sec : order) {
        if (!first) os << '\n';
        first = false;
        if (!sec.empty()) os << '[' << sec << "]\n";
        for (const auto& [k, v] : items_) {
            std::size_t dot = k.rfind('.');
            std::string ks = dot == std::string::npos ? "" : k.substr(0, dot);
            if (ks != sec) continue;
            os << (dot == std::string::npos ? k : k.substr(dot + 1)) << " = " << v
               << '\n';
        }
    }
    return os.str();
}

bool Config::operator==(const Config& o) const {
    auto a = items_, b = o.items_;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return a == b;
}

void Config::write_file(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write config: " + path);
    f << serialize();
    if (!f) throw Error("config write failed: " + path);
}

}  // namespace protosal
