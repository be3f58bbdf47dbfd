#include "protosal/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>

#include "protosal/common.hpp"

namespace protosal {

namespace {

bool has_suffix(const std::string& s, const char* suf) {
    std::size_t n = std::strlen(suf);
    return s.size() >= n && s.compare(s.size() - n, n, suf) == 0;
}

unsigned char to_byte(float v) {
    float c = std::clamp(v, 0.f, 1.f);
    return static_cast<unsigned char>(std::lround(c * 255.f));
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Image read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw Error("cannot open image: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                             nullptr);
    if (!png) throw Error("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw Error("libpng init failed");
    }
    std::vector<png_bytep> row_ptrs;
    std::vector<unsigned char> pixels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("undecodable png: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    if (png_get_rowbytes(png, info) != w * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("unexpected png row layout: " + path);
    }
    pixels.resize(std::size_t(h) * w * 3);
    row_ptrs.resize(h);
    for (png_uint_32 y = 0; y < h; ++y)
        row_ptrs[y] = pixels.data() + std::size_t(y) * w * 3;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(static_cast<int>(h), static_cast<int>(w));
    for (std::size_t i = 0; i < pixels.size(); ++i)
        img.rgb[i] = float(pixels[i]) / 255.f;
    return img;
}

void write_png(const std::string& path, const Image& img) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw Error("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                              nullptr);
    if (!png) throw Error("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw Error("libpng init failed");
    }
    std::vector<unsigned char> row(std::size_t(img.width) * 3);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("png write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) row[std::size_t(x) * 3 + c] = to_byte(img.at(y, x, c));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open image: " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw Error("not a P6 ppm: " + path);
    auto next_int = [&]() {
        int v;
        f >> std::ws;
        while (f.peek() == '#') {
            std::string line;
            std::getline(f, line);
            f >> std::ws;
        }
        if (!(f >> v)) throw Error("truncated ppm header: " + path);
        return v;
    };
    int w = next_int(), h = next_int(), maxval = next_int();
    if (maxval != 255) throw Error("ppm maxval must be 255: " + path);
    f.get();
    std::vector<unsigned char> pixels(std::size_t(h) * w * 3);
    f.read(reinterpret_cast<char*>(pixels.data()),
           static_cast<std::streamsize>(pixels.size()));
    if (static_cast<std::size_t>(f.gcount()) != pixels.size())
        throw Error("truncated ppm payload: " + path);
    Image img(h, w);
    for (std::size_t i = 0; i < pixels.size(); ++i) img.rgb[i] = float(pixels[i]) / 255.f;
    return img;
}

void write_ppm(const std::string& path, const Image& img) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path);
    f << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    std::vector<unsigned char> pixels(img.rgb.size());
    for (std::size_t i = 0; i < img.rgb.size(); ++i) pixels[i] = to_byte(img.rgb[i]);
    f.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
    if (!f) throw Error("ppm write failed: " + path);
}

}  // namespace

Image read_image(const std::string& path) {
    if (!std::filesystem::exists(path)) throw Error("no such image: " + path);
    if (has_suffix(path, ".ppm")) return read_ppm(path);
    return read_png(path);
}

void write_image(const std::string& path, const Image& img) {
    if (img.height <= 0 || img.width <= 0) throw Error("empty image");
    if (has_suffix(path, ".ppm"))
        write_ppm(path, img);
    else
        write_png(path, img);
}

Image resize_bilinear(const Image& src, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw Error("bad resize target");
    Image dst(out_h, out_w);
    double sy = out_h > 1 ? double(src.height - 1) / (out_h - 1) : 0.0;
    double sx = out_w > 1 ? double(src.width - 1) / (out_w - 1) : 0.0;
    for (int y = 0; y < out_h; ++y) {
        double fy = y * sy;
        int y0 = static_cast<int>(fy);
        int y1 = std::min(y0 + 1, src.height - 1);
        float wy = static_cast<float>(fy - y0);
        for (int x = 0; x < out_w; ++x) {
            double fx = x * sx;
            int x0 = static_cast<int>(fx);
            int x1 = std::min(x0 + 1, src.width - 1);
            float wx = static_cast<float>(fx - x0);
            for (int c = 0; c < 3; ++c) {
                float v = (1 - wy) * ((1 - wx) * src.at(y0, x0, c) +
                                      wx * src.at(y0, x1, c)) +
                          wy * ((1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c));
                dst.at(y, x, c) = v;
            }
        }
    }
    return dst;
}

std::vector<float> resize_plane_bilinear(const std::vector<float>& src, int h, int w,
                                         int out_h, int out_w) {
    if (h <= 0 || w <= 0 || src.size() != std::size_t(h) * w)
        throw Error("bad source plane");
    if (out_h <= 0 || out_w <= 0) throw Error("bad resize target");
    std::vector<float> dst(std::size_t(out_h) * out_w);
    double sy = out_h > 1 ? double(h - 1) / (out_h - 1) : 0.0;
    double sx = out_w > 1 ? double(w - 1) / (out_w - 1) : 0.0;
    for (int y = 0; y < out_h; ++y) {
        double fy = y * sy;
        int y0 = static_cast<int>(fy);
        int y1 = std::min(y0 + 1, h - 1);
        double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            double fx = x * sx;
            int x0 = static_cast<int>(fx);
            int x1 = std::min(x0 + 1, w - 1);
            double wx = fx - x0;
            double v = (1 - wy) * ((1 - wx) * src[std::size_t(y0) * w + x0] +
                                   wx * src[std::size_t(y0) * w + x1]) +
                       wy * ((1 - wx) * src[std::size_t(y1) * w + x0] +
                             wx * src[std::size_t(y1) * w + x1]);
            dst[std::size_t(y) * out_w + x] = static_cast<float>(v);
        }
    }
    return dst;
}

namespace {

Image overlay(const Image& img, const std::vector<float>& map, bool absolute) {
    if (map.size() != std::size_t(img.height) * img.width)
        throw Error("overlay map size does not match image");
    float peak = 0.f;
    for (float v : map) peak = std::max(peak, std::abs(v));
    Image out = img;
    if (peak == 0.f) return out;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float v = map[std::size_t(y) * img.width + x];
            float a = 0.6f * std::abs(v) / peak;
            float tint[3] = {0.f, 0.f, 0.f};
            if (absolute)
                tint[2] = 1.f;          // blue magnitude
            else if (v >= 0.f)
                tint[1] = 1.f;          // green evidence for
            else
                tint[0] = 1.f;          // red evidence against
            for (int c = 0; c < 3; ++c)
                out.at(y, x, c) = (1 - a) * img.at(y, x, c) + a * tint[c];
        }
    return out;
}

}  // namespace

Image overlay_signed(const Image& img, const std::vector<float>& map) {
    return overlay(img, map, false);
}

Image overlay_absolute(const Image& img, const std::vector<float>& map) {
    return overlay(img, map, true);
}

Image tile_grid(const std::vector<Image>& cells, int columns) {
    if (cells.empty() || columns <= 0) throw Error("tile_grid: nothing to tile");
    int ch = cells[0].height, cw = cells[0].width;
    for (const auto& c : cells)
        if (c.height != ch || c.width != cw)
            throw Error("tile_grid: cells must share dimensions");
    const int pad = 2;
    int rows = (static_cast<int>(cells.size()) + columns - 1) / columns;
    Image out(rows * ch + (rows - 1) * pad, columns * cw + (columns - 1) * pad);
    std::fill(out.rgb.begin(), out.rgb.end(), 1.f);
    for (std::size_t i = 0; i < cells.size(); ++i) {
        int r = static_cast<int>(i) / columns;
        int col = static_cast<int>(i) % columns;
        int oy = r * (ch + pad), ox = col * (cw + pad);
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x)
                for (int c = 0; c < 3; ++c)
                    out.at(oy + y, ox + x, c) = cells[i].at(y, x, c);
    }
    return out;
}

}  // namespace protosal
