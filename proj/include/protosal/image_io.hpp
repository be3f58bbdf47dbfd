#pragma once

#include <string>
#include <vector>

namespace protosal {

// 8-bit-image carrier decoded to floats in [0,1], interleaved RGB rows.
struct Image {
    int height = 0, width = 0;
    std::vector<float> rgb;  // (y*width + x)*3 + channel

    Image() = default;
    Image(int h, int w) : height(h), width(w), rgb(std::size_t(h) * w * 3, 0.f) {}

    float& at(int y, int x, int c) { return rgb[(std::size_t(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const {
        return rgb[(std::size_t(y) * width + x) * 3 + c];
    }
};

// PNG or PPM (P6), chosen by extension. 16-bit, paletted, gray, and alpha
// PNGs are converted to 8-bit RGB on read.
Image read_image(const std::string& path);
void write_image(const std::string& path, const Image& img);

Image resize_bilinear(const Image& src, int out_h, int out_w);

// Same align-corners interpolation for a single row-major plane (heatmaps,
// similarity grids).
std::vector<float> resize_plane_bilinear(const std::vector<float>& src, int h, int w,
                                         int out_h, int out_w);

// Fig-3-style rendering: positive map values tint green, negative red;
// magnitude-only maps tint blue. `map` is row-major h*w matching img.
Image overlay_signed(const Image& img, const std::vector<float>& map);
Image overlay_absolute(const Image& img, const std::vector<float>& map);

// Side-by-side grid with a 2px separator, row-major cell order.
Image tile_grid(const std::vector<Image>& cells, int columns);

}  // namespace protosal
