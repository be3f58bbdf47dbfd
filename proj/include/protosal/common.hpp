#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace protosal {

// Base error for all library failures.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed configuration (bad key, bad value, bad file). CLI exit code 2.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// A pipeline stage was invoked before its inputs exist. CLI exit code 3.
struct MissingPrerequisiteError : Error {
    explicit MissingPrerequisiteError(const std::string& msg) : Error(msg) {}
};

// Numeric failure (NaN/Inf divergence). CLI exit code 4.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// backward() called on a graph whose cached activations are stale or absent.
struct StaleGraphError : Error {
    explicit StaleGraphError(const std::string& msg) : Error(msg) {}
};

// FNV-1a, used for config fingerprints in binary file headers.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

}  // namespace protosal
