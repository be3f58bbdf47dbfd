#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "protosal/common.hpp"

namespace protosal {

// Plain comma-separated tables: one header row, no quoting. Fields must not
// contain commas or newlines (enforced on write).
struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    static std::vector<std::string> split(const std::string& line) {
        std::vector<std::string> out;
        std::string cur;
        for (char ch : line) {
            if (ch == ',') {
                out.push_back(cur);
                cur.clear();
            } else if (ch != '\r') {
                cur += ch;
            }
        }
        out.push_back(cur);
        return out;
    }

    static Csv read_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw Error("cannot open csv: " + path);
        Csv c;
        std::string line;
        if (!std::getline(f, line)) throw Error("empty csv: " + path);
        c.header = split(line);
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            auto row = split(line);
            if (row.size() != c.header.size())
                throw Error(path + ": row with " + std::to_string(row.size()) +
                            " fields, header has " + std::to_string(c.header.size()));
            c.rows.push_back(std::move(row));
        }
        return c;
    }

    void write_file(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw Error("cannot write csv: " + path);
        auto emit = [&](const std::vector<std::string>& row) {
            for (std::size_t i = 0; i < row.size(); ++i) {
                if (row[i].find_first_of(",\n\"") != std::string::npos)
                    throw Error("csv field needs quoting, refusing: " + row[i]);
                f << (i ? "," : "") << row[i];
            }
            f << '\n';
        };
        emit(header);
        for (const auto& r : rows) emit(r);
        if (!f) throw Error("csv write failed: " + path);
    }

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        throw Error("csv has no column `" + name + "`");
    }
};

// Round-trippable numeric formatting shared by all emitted tables.
inline std::string csv_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace protosal
