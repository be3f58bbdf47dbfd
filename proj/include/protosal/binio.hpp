#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "protosal/common.hpp"

// Little-endian primitives shared by the checkpoint, heatmap container,
// prototype bank, and dataset cache formats.

namespace protosal::binio {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw Error("binary write failed");
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw Error("binary read truncated");
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    write_bytes(os, b, 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    read_bytes(is, b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    write_bytes(os, b, 8);
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    read_bytes(is, b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

inline void write_i64(std::ostream& os, std::int64_t v) {
    write_u64(os, static_cast<std::uint64_t>(v));
}

inline std::int64_t read_i64(std::istream& is) {
    return static_cast<std::int64_t>(read_u64(is));
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    write_u32(os, u);
}

inline float read_f32(std::istream& is) {
    std::uint32_t u = read_u32(is);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

inline void write_f32_array(std::ostream& os, const float* p, std::size_t n) {
    static_assert(sizeof(float) == 4);
    if constexpr (std::endian::native == std::endian::little) {
        write_bytes(os, p, n * 4);
    } else {
        for (std::size_t i = 0; i < n; ++i) write_f32(os, p[i]);
    }
}

inline void read_f32_array(std::istream& is, float* p, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        read_bytes(is, p, n * 4);
    } else {
        for (std::size_t i = 0; i < n; ++i) p[i] = read_f32(is);
    }
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is, std::uint32_t max_len = 1u << 20) {
    std::uint32_t n = read_u32(is);
    if (n > max_len) throw Error("string length " + std::to_string(n) + " implausible");
    std::string s(n, '\0');
    if (n) read_bytes(is, s.data(), n);
    return s;
}

inline void expect_magic(std::istream& is, const char* magic8, const char* what) {
    char got[8];
    read_bytes(is, got, 8);
    if (std::memcmp(got, magic8, 8) != 0)
        throw Error(std::string(what) + ": bad magic, not a recognized file");
}

}  // namespace protosal::binio
