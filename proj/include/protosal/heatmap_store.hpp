#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace protosal {

struct HeatmapRecord {
    enum class Source : std::uint8_t { Method = 0, Prototype = 1 };

    std::uint32_t image_id = 0;
    Source source_kind = Source::Method;
    std::uint32_t source_id = 0;  // method id or prototype id
    std::int32_t target_class = 0;
    std::uint32_t height = 0, width = 0;
    bool is_absolute = false;  // magnitude-only map (no sign semantics)
    std::vector<float> values; // row-major

    float at(std::uint32_t y, std::uint32_t x) const {
        return values[std::size_t(y) * width + x];
    }
};

void write_heatmaps(const std::string& path, const std::vector<HeatmapRecord>& records);
std::vector<HeatmapRecord> read_heatmaps(const std::string& path);

// Human-readable sidecar; the binary container remains the source of truth.
void export_heatmaps_json(const std::string& path,
                          const std::vector<HeatmapRecord>& records);

}  // namespace protosal
