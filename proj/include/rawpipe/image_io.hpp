#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace rawpipe {

struct ImageU8 {
    int h = 0, w = 0, channels = 0;  // channels: 1 (gray) or 3 (rgb)
    std::vector<std::uint8_t> pixels;  // row-major, interleaved

    std::uint8_t at(int y, int x, int c = 0) const {
        return pixels[(std::size_t(y) * std::size_t(w) + std::size_t(x)) * std::size_t(channels) +
                      std::size_t(c)];
    }
};

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
}  // namespace detail

inline void png_write(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument("png_write: channels must be 1 or 3");
    if (img.pixels.size() != std::size_t(img.h) * std::size_t(img.w) * std::size_t(img.channels))
        throw std::invalid_argument("png_write: pixel buffer size mismatch");
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("png_write: cannot open " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_write: out of memory");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("png_write: out of memory");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("png_write: libpng failure for " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(img.w), png_uint_32(img.h), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(std::size_t(img.h));
    for (int y = 0; y < img.h; ++y)
        rows[std::size_t(y)] = const_cast<png_bytep>(
            img.pixels.data() + std::size_t(y) * std::size_t(img.w) * std::size_t(img.channels));
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline ImageU8 png_read(const std::string& path) {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("png_read: cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_read: out of memory");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("png_read: out of memory");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("png_read: libpng failure for " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int channels = int(png_get_channels(png, info));
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("png_read: unsupported channel count in " + path);
    }

    ImageU8 img;
    img.h = int(h);
    img.w = int(w);
    img.channels = channels;
    img.pixels.resize(std::size_t(h) * std::size_t(w) * std::size_t(channels));
    std::vector<png_bytep> rows(static_cast<std::size_t>(h), nullptr);
    for (png_uint_32 y = 0; y < h; ++y)
        rows[y] = img.pixels.data() + std::size_t(y) * std::size_t(w) * std::size_t(channels);
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace rawpipe
