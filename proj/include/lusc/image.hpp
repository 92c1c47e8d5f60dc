#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "lusc/error.hpp"

namespace lusc {

// 8-bit RGB raster, row-major, channels interleaved.
struct RawImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> rgb;  // height * width * 3
};

namespace detail {

struct FileHandle {
    explicit FileHandle(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {}
    ~FileHandle() { if (f) std::fclose(f); }
    FILE* f;
};

struct JpegErrorMgr {
    jpeg_error_mgr pub;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

inline RawImage decode_png(const std::string& path, FILE* f) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png: allocation failure reading " + path);
    }
    RawImage img;
    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("undecodable image file: " + path);
    }
    png_init_io(png, f);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    img.height = h;
    img.width = w;
    img.rgb.resize(std::size_t(h) * w * 3);
    row_ptrs.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) row_ptrs[y] = img.rgb.data() + std::size_t(y) * w * 3;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline RawImage decode_jpeg(const std::string& path, FILE* f) {
    jpeg_decompress_struct cinfo;
    JpegErrorMgr jerr;
    cinfo.err = jpeg_std_error(&jerr.pub);
    jerr.pub.error_exit = jpeg_error_exit;
    if (setjmp(jerr.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw IoError("undecodable image file: " + path + " (" + jerr.message + ")");
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, f);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    RawImage img;
    img.height = cinfo.output_height;
    img.width = cinfo.output_width;
    img.rgb.resize(img.height * img.width * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = img.rgb.data() + std::size_t(cinfo.output_scanline) * img.width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

}  // namespace detail

// Decodes a PNG or JPEG file (sniffed by signature) to 8-bit RGB.
inline RawImage decode_image(const std::string& path) {
    detail::FileHandle fh(path, "rb");
    if (!fh.f) throw IoError("cannot open image file: " + path);
    unsigned char sig[8] = {0};
    std::size_t got = std::fread(sig, 1, 8, fh.f);
    std::rewind(fh.f);
    if (got >= 8 && png_sig_cmp(sig, 0, 8) == 0) return detail::decode_png(path, fh.f);
    if (got >= 2 && sig[0] == 0xFF && sig[1] == 0xD8) return detail::decode_jpeg(path, fh.f);
    throw IoError("undecodable image file: " + path + " (not PNG or JPEG)");
}

inline void encode_png(const std::string& path, const RawImage& img) {
    detail::FileHandle fh(path, "wb");
    if (!fh.f) throw IoError("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png: allocation failure writing " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png: write failure: " + path);
    }
    png_init_io(png, fh.f);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
                 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < img.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(img.rgb.data() + y * img.width * 3));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Bilinear resample with pixel-center alignment; resizing to the source size
// reproduces the input exactly.
template <class S>
void resize_bilinear(const S* src, std::size_t sh, std::size_t sw, std::size_t c,
                     S* dst, std::size_t dh, std::size_t dw) {
    if (sh == dh && sw == dw) {
        std::copy(src, src + sh * sw * c, dst);
        return;
    }
    double sy_scale = static_cast<double>(sh) / static_cast<double>(dh);
    double sx_scale = static_cast<double>(sw) / static_cast<double>(dw);
    for (std::size_t y = 0; y < dh; ++y) {
        double fy = (static_cast<double>(y) + 0.5) * sy_scale - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(sh - 1));
        std::size_t y0 = static_cast<std::size_t>(fy);
        std::size_t y1 = std::min(y0 + 1, sh - 1);
        double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < dw; ++x) {
            double fx = (static_cast<double>(x) + 0.5) * sx_scale - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(sw - 1));
            std::size_t x0 = static_cast<std::size_t>(fx);
            std::size_t x1 = std::min(x0 + 1, sw - 1);
            double wx = fx - static_cast<double>(x0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                double v00 = src[(y0 * sw + x0) * c + ch];
                double v01 = src[(y0 * sw + x1) * c + ch];
                double v10 = src[(y1 * sw + x0) * c + ch];
                double v11 = src[(y1 * sw + x1) * c + ch];
                double top = v00 + (v01 - v00) * wx;
                double bot = v10 + (v11 - v10) * wx;
                dst[(y * dw + x) * c + ch] = static_cast<S>(top + (bot - top) * wy);
            }
        }
    }
}

}  // namespace lusc
