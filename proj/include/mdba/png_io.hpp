#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdba {

/// 8-bit RGB raster, row-major, origin top-left.
struct RgbImage {
    int64_t width = 0, height = 0;
    std::vector<uint8_t> pixels;  // 3 bytes per pixel

    RgbImage() = default;
    RgbImage(int64_t w, int64_t h, uint8_t r = 255, uint8_t g = 255, uint8_t b = 255)
        : width(w), height(h), pixels(size_t(w * h * 3)) {
        for (int64_t i = 0; i < w * h; ++i) set_index(i, r, g, b);
    }

    void set_index(int64_t i, uint8_t r, uint8_t g, uint8_t b) {
        pixels[size_t(3 * i)] = r;
        pixels[size_t(3 * i + 1)] = g;
        pixels[size_t(3 * i + 2)] = b;
    }
    void set(int64_t x, int64_t y, uint8_t r, uint8_t g, uint8_t b) {
        if (x < 0 || x >= width || y < 0 || y >= height) return;
        set_index(y * width + x, r, g, b);
    }
    void fill_rect(int64_t x0, int64_t y0, int64_t w, int64_t h, uint8_t r, uint8_t g, uint8_t b) {
        for (int64_t y = y0; y < y0 + h; ++y)
            for (int64_t x = x0; x < x0 + w; ++x) set(x, y, r, g, b);
    }
    const uint8_t* at(int64_t x, int64_t y) const { return &pixels[size_t(3 * (y * width + x))]; }
};

namespace detail {

inline void png_chunk(std::FILE* f, const char type[4], const std::vector<uint8_t>& data) {
    auto be32 = [](uint32_t v) {
        return std::array<uint8_t, 4>{uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8), uint8_t(v)};
    };
    auto len = be32(uint32_t(data.size()));
    std::fwrite(len.data(), 1, 4, f);
    std::fwrite(type, 1, 4, f);
    if (!data.empty()) std::fwrite(data.data(), 1, data.size(), f);
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
    if (!data.empty()) crc = crc32(crc, data.data(), uInt(data.size()));
    auto c = be32(uint32_t(crc));
    std::fwrite(c.data(), 1, 4, f);
}

}  // namespace detail

/// Minimal deterministic PNG writer (8-bit RGB, no ancillary chunks, no
/// timestamps), so repeated runs emit byte-identical files.
inline void write_png(const std::string& path, const RgbImage& img) {
    if (img.width < 1 || img.height < 1) throw std::invalid_argument("write_png: empty image");
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot create png: " + path);

    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::fwrite(sig, 1, 8, f);

    std::vector<uint8_t> ihdr(13);
    auto put32 = [&](size_t off, uint32_t v) {
        ihdr[off] = uint8_t(v >> 24);
        ihdr[off + 1] = uint8_t(v >> 16);
        ihdr[off + 2] = uint8_t(v >> 8);
        ihdr[off + 3] = uint8_t(v);
    };
    put32(0, uint32_t(img.width));
    put32(4, uint32_t(img.height));
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 2;   // color type: truecolor
    ihdr[10] = 0;  // compression
    ihdr[11] = 0;  // filter
    ihdr[12] = 0;  // interlace
    detail::png_chunk(f, "IHDR", ihdr);

    // raw scanlines, filter byte 0 per row
    std::vector<uint8_t> raw(size_t(img.height * (img.width * 3 + 1)));
    for (int64_t y = 0; y < img.height; ++y) {
        uint8_t* row = raw.data() + y * (img.width * 3 + 1);
        row[0] = 0;
        std::memcpy(row + 1, img.pixels.data() + y * img.width * 3, size_t(img.width * 3));
    }
    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<uint8_t> idat(bound);
    if (compress2(idat.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK) {
        std::fclose(f);
        throw std::runtime_error("png deflate failed: " + path);
    }
    idat.resize(bound);
    detail::png_chunk(f, "IDAT", idat);
    detail::png_chunk(f, "IEND", {});
    std::fclose(f);
}

/// Reads just the dimensions from a PNG header (for tests and sanity
/// checks; this project never needs full PNG decoding).
inline std::pair<int64_t, int64_t> read_png_size(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("cannot open png: " + path);
    uint8_t buf[24];
    size_t got = std::fread(buf, 1, 24, f);
    std::fclose(f);
    if (got != 24 || buf[1] != 'P' || buf[2] != 'N' || buf[3] != 'G')
        throw std::runtime_error("not a png: " + path);
    auto be32 = [&](int off) {
        return (uint32_t(buf[off]) << 24) | (uint32_t(buf[off + 1]) << 16) | (uint32_t(buf[off + 2]) << 8) |
               uint32_t(buf[off + 3]);
    };
    return {int64_t(be32(16)), int64_t(be32(20))};
}

}  // namespace mdba
