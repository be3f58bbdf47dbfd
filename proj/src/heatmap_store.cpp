#include "protosal/heatmap_store.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "protosal/binio.hpp"
#include "protosal/common.hpp"

namespace protosal {

namespace {
constexpr char kMagic[9] = "PSHEAT01";

void validate(const HeatmapRecord& r) {
    if (r.values.size() != std::size_t(r.height) * r.width)
        throw Error("heatmap record " + std::to_string(r.image_id) + ": payload " +
                    std::to_string(r.values.size()) + " != " + std::to_string(r.height) +
                    "x" + std::to_string(r.width));
    for (float v : r.values)
        if (!std::isfinite(v)) throw Error("heatmap record contains non-finite values");
}
}  // namespace

void write_heatmaps(const std::string& path, const std::vector<HeatmapRecord>& records) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path);
    binio::write_bytes(f, kMagic, 8);
    binio::write_u32(f, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        validate(r);
        binio::write_u32(f, r.image_id);
        unsigned char kind = static_cast<unsigned char>(r.source_kind);
        binio::write_bytes(f, &kind, 1);
        binio::write_u32(f, r.source_id);
        binio::write_u32(f, static_cast<std::uint32_t>(r.target_class));
        binio::write_u32(f, r.height);
        binio::write_u32(f, r.width);
        unsigned char abs_flag = r.is_absolute ? 1 : 0;
        binio::write_bytes(f, &abs_flag, 1);
        binio::write_f32_array(f, r.values.data(), r.values.size());
    }
    if (!f) throw Error("write failed: " + path);
}

std::vector<HeatmapRecord> read_heatmaps(const std::string& path) {
    if (!std::filesystem::exists(path))
        throw MissingPrerequisiteError("heatmap file not found: " + path);
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open: " + path);
    binio::expect_magic(f, kMagic, "heatmap container");
    std::uint32_t count = binio::read_u32(f);
    std::vector<HeatmapRecord> out(count);
    for (auto& r : out) {
        r.image_id = binio::read_u32(f);
        unsigned char kind;
        binio::read_bytes(f, &kind, 1);
        if (kind > 1) throw Error("heatmap record: bad source kind");
        r.source_kind = static_cast<HeatmapRecord::Source>(kind);
        r.source_id = binio::read_u32(f);
        r.target_class = static_cast<std::int32_t>(binio::read_u32(f));
        r.height = binio::read_u32(f);
        r.width = binio::read_u32(f);
        if (std::uint64_t(r.height) * r.width > (1u << 26))
            throw Error("heatmap record implausibly large");
        unsigned char abs_flag;
        binio::read_bytes(f, &abs_flag, 1);
        r.is_absolute = abs_flag != 0;
        r.values.resize(std::size_t(r.height) * r.width);
        binio::read_f32_array(f, r.values.data(), r.values.size());
        validate(r);
    }
    return out;
}

void export_heatmaps_json(const std::string& path,
                          const std::vector<HeatmapRecord>& records) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : records) {
        nlohmann::json j;
        j["image_id"] = r.image_id;
        j["source_kind"] = r.source_kind == HeatmapRecord::Source::Method
                               ? "method"
                               : "prototype";
        j["source_id"] = r.source_id;
        j["target_class"] = r.target_class;
        j["height"] = r.height;
        j["width"] = r.width;
        j["is_absolute"] = r.is_absolute;
        j["values"] = r.values;
        arr.push_back(std::move(j));
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path);
    f << arr.dump(1) << '\n';
    if (!f) throw Error("write failed: " + path);
}

}  // namespace protosal
