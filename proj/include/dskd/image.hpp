#pragma once

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "dskd/common.hpp"
#include "dskd/tensor.hpp"

namespace dskd {

// ImageNet channel statistics; the teacher expects inputs standardized
// this way.
inline constexpr float kImagenetMean[3] = {0.485f, 0.456f, 0.406f};
inline constexpr float kImagenetStd[3] = {0.229f, 0.224f, 0.225f};

// 8-bit RGB image, row-major.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<unsigned char> rgb;  // 3 * width * height

    unsigned char* row(int y) { return rgb.data() + static_cast<size_t>(y) * width * 3; }
    const unsigned char* row(int y) const {
        return rgb.data() + static_cast<size_t>(y) * width * 3;
    }
};

namespace detail {

struct FileHandle {
    FILE* f = nullptr;
    explicit FileHandle(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {}
    ~FileHandle() {
        if (f) std::fclose(f);
    }
    FileHandle(const FileHandle&) = delete;
    FileHandle& operator=(const FileHandle&) = delete;
};

inline Image decode_png(FILE* f, const std::string& path) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png: allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png: allocation failed");
    }
    std::vector<png_bytep> rows;
    Image img;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode PNG file " + path);
    }
    png_init_io(png, f);
    png_read_info(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
    rows.resize(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = img.row(y);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

struct JpegErrorMgr {
    jpeg_error_mgr pub;
    std::jmp_buf jump;
};

inline void jpeg_error_trampoline(j_common_ptr cinfo) {
    auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    std::longjmp(mgr->jump, 1);
}

inline Image decode_jpeg(FILE* f, const std::string& path) {
    jpeg_decompress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.pub);
    err.pub.error_exit = jpeg_error_trampoline;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw IoError("failed to decode JPEG file " + path);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, f);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);

    Image img;
    img.width = static_cast<int>(cinfo.output_width);
    img.height = static_cast<int>(cinfo.output_height);
    img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        unsigned char* rowp = img.row(static_cast<int>(cinfo.output_scanline));
        jpeg_read_scanlines(&cinfo, &rowp, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

inline uint32_t read_le32(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

// Uncompressed 24/32-bit BMP.
inline Image decode_bmp(FILE* f, const std::string& path) {
    unsigned char header[54];
    if (std::fread(header, 1, 54, f) != 54 || header[0] != 'B' || header[1] != 'M')
        throw IoError("failed to decode BMP file " + path);
    const uint32_t data_offset = read_le32(header + 10);
    const int width = static_cast<int>(read_le32(header + 18));
    const int height_raw = static_cast<int>(read_le32(header + 22));
    const int bpp = header[28] | (header[29] << 8);
    const uint32_t compression = read_le32(header + 30);
    if ((bpp != 24 && bpp != 32) || compression != 0)
        throw IoError("unsupported BMP variant in " + path + " (need uncompressed 24/32-bit)");
    const bool bottom_up = height_raw > 0;
    const int height = bottom_up ? height_raw : -height_raw;
    if (width <= 0 || height <= 0) throw IoError("bad BMP dimensions in " + path);

    const size_t row_bytes = ((static_cast<size_t>(width) * bpp / 8) + 3) & ~size_t{3};
    std::vector<unsigned char> rowbuf(row_bytes);
    Image img;
    img.width = width;
    img.height = height;
    img.rgb.resize(static_cast<size_t>(width) * height * 3);
    if (std::fseek(f, static_cast<long>(data_offset), SEEK_SET) != 0)
        throw IoError("truncated BMP file " + path);
    for (int y = 0; y < height; ++y) {
        if (std::fread(rowbuf.data(), 1, row_bytes, f) != row_bytes)
            throw IoError("truncated BMP file " + path);
        unsigned char* dst = img.row(bottom_up ? height - 1 - y : y);
        const int stride = bpp / 8;
        for (int x = 0; x < width; ++x) {
            dst[3 * x + 0] = rowbuf[x * stride + 2];  // BGR -> RGB
            dst[3 * x + 1] = rowbuf[x * stride + 1];
            dst[3 * x + 2] = rowbuf[x * stride + 0];
        }
    }
    return img;
}

}  // namespace detail

inline Image load_image(const std::string& path) {
    detail::FileHandle fh(path, "rb");
    if (!fh.f) throw IoError("cannot open image file " + path);
    unsigned char magic[4] = {0, 0, 0, 0};
    const size_t got = std::fread(magic, 1, 4, fh.f);
    std::rewind(fh.f);
    if (got >= 4 && magic[0] == 0x89 && magic[1] == 'P' && magic[2] == 'N' && magic[3] == 'G')
        return detail::decode_png(fh.f, path);
    if (got >= 2 && magic[0] == 0xFF && magic[1] == 0xD8) return detail::decode_jpeg(fh.f, path);
    if (got >= 2 && magic[0] == 'B' && magic[1] == 'M') return detail::decode_bmp(fh.f, path);
    throw IoError("unrecognized image format (expected PNG/JPEG/BMP): " + path);
}

inline void save_png(const std::string& path, const Image& img) {
    detail::FileHandle fh(path, "wb");
    if (!fh.f) throw IoError("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png: allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png: allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to write PNG file " + path);
    }
    png_init_io(png, fh.f);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
        png_write_row(png, const_cast<png_bytep>(img.row(y)));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------------------
// Conversions
// ---------------------------------------------------------------------------

// Image -> [1,3,h,w] tensor scaled to [0,1].
inline Tensor image_to_tensor(const Image& img) {
    Tensor t(1, 3, img.height, img.width);
    const size_t plane = static_cast<size_t>(img.height) * img.width;
    for (int y = 0; y < img.height; ++y) {
        const unsigned char* row = img.row(y);
        for (int x = 0; x < img.width; ++x) {
            const size_t p = static_cast<size_t>(y) * img.width + x;
            t.data[0 * plane + p] = row[3 * x + 0] / 255.0f;
            t.data[1 * plane + p] = row[3 * x + 1] / 255.0f;
            t.data[2 * plane + p] = row[3 * x + 2] / 255.0f;
        }
    }
    return t;
}

inline unsigned char to_byte(float v) {
    const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return static_cast<unsigned char>(c * 255.0f + 0.5f);
}

// [*,c,h,w] tensor in [0,1] -> image (c==1 broadcast to gray, c==3 RGB).
inline Image tensor_to_image(const Tensor& t) {
    if (t.n != 1 || (t.c != 1 && t.c != 3))
        throw ShapeError("tensor_to_image: expected [1,1|3,h,w], got " + t.shape_str());
    Image img;
    img.width = t.w;
    img.height = t.h;
    img.rgb.resize(static_cast<size_t>(t.w) * t.h * 3);
    const size_t plane = static_cast<size_t>(t.h) * t.w;
    for (int y = 0; y < t.h; ++y) {
        unsigned char* row = img.row(y);
        for (int x = 0; x < t.w; ++x) {
            const size_t p = static_cast<size_t>(y) * t.w + x;
            for (int ch = 0; ch < 3; ++ch)
                row[3 * x + ch] = to_byte(t.data[(t.c == 3 ? ch : 0) * plane + p]);
        }
    }
    return img;
}

// Nearest-neighbor resize for masks (preserves binarity).
inline Tensor nearest_resize(const Tensor& x, int out_h, int out_w) {
    if (out_h == x.h && out_w == x.w) return x;
    Tensor y(x.n, x.c, out_h, out_w);
    const int planes = x.n * x.c;
    for (int pc = 0; pc < planes; ++pc) {
        const float* xp = x.ptr() + static_cast<size_t>(pc) * x.h * x.w;
        float* yp = y.ptr() + static_cast<size_t>(pc) * out_h * out_w;
        for (int i = 0; i < out_h; ++i) {
            int si = static_cast<int>((static_cast<int64_t>(i) * x.h) / out_h);
            if (si > x.h - 1) si = x.h - 1;
            for (int j = 0; j < out_w; ++j) {
                int sj = static_cast<int>((static_cast<int64_t>(j) * x.w) / out_w);
                if (sj > x.w - 1) sj = x.w - 1;
                yp[static_cast<size_t>(i) * out_w + j] = xp[static_cast<size_t>(si) * x.w + sj];
            }
        }
    }
    return y;
}

}  // namespace dskd
