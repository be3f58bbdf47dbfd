#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace protosal {

// Line-oriented `key = value` configuration with [section] headers.
// Keys are addressed as "section.key". Parsing preserves entry order and
// serialize() round-trips losslessly. Errors carry file:line positions.
class Config {
public:
    Config() = default;

    static Config parse_file(const std::string& path);
    static Config parse_string(const std::string& text,
                               const std::string& origin = "<string>");

    bool has(const std::string& key) const;

    std::string get_str(const std::string& key) const;
    std::string get_str(const std::string& key, const std::string& fallback) const;
    std::int64_t get_int(const std::string& key) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    double get_real(const std::string& key) const;
    double get_real(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key) const;
    bool get_bool(const std::string& key, bool fallback) const;

    void set(const std::string& key, const std::string& value);
    void set_int(const std::string& key, std::int64_t value);
    void set_real(const std::string& key, double value);
    void set_bool(const std::string& key, bool value);

    std::string serialize() const;
    void write_file(const std::string& path) const;

    const std::vector<std::pair<std::string, std::string>>& items() const {
        return items_;
    }

    // order-insensitive: serialize() groups keys by section
    bool operator==(const Config& o) const;

private:
    const std::string* find(const std::string& key) const;
    std::vector<std::pair<std::string, std::string>> items_;
};

}  // namespace protosal
