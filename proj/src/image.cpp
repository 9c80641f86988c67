#include "defectgen/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

#include "defectgen/kernels.hpp"

namespace defectgen {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

PngData read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("png read error: " + path);
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
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("unsupported channel count in " + path);
    }

    PngData out;
    out.width = w;
    out.height = h;
    out.channels = channels;
    out.pixels.resize(static_cast<size_t>(w) * h * channels);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y)
        rows[y] = out.pixels.data() + static_cast<size_t>(y) * w * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void write_png(const std::string& path, const PngData& img) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot write " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("png write error: " + path);
    }
    png_init_io(png, fp.get());
    const int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    std::vector<png_bytep> rows(img.height);
    for (int64_t y = 0; y < img.height; ++y)
        rows[y] = const_cast<png_bytep>(img.pixels.data() +
                                        static_cast<size_t>(y) * img.width * img.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

uint8_t model_to_byte(float v) {
    const float scaled = (v + 1.0f) * 0.5f * 255.0f;
    const float r = std::round(scaled);
    return static_cast<uint8_t>(std::min(std::max(r, 0.0f), 255.0f));
}

float byte_to_model(uint8_t b) { return static_cast<float>(b) / 255.0f * 2.0f - 1.0f; }

Tensor image_from_png(const PngData& img) {
    if (img.channels != 3) throw std::runtime_error("expected RGB image");
    Tensor t({3, img.height, img.width});
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t x = 0; x < img.width; ++x)
            for (int64_t c = 0; c < 3; ++c)
                t.v[(c * img.height + y) * img.width + x] =
                    byte_to_model(img.pixels[(y * img.width + x) * 3 + c]);
    return t;
}

PngData image_to_png(const Tensor& img) {
    PngData out;
    out.channels = 3;
    out.height = img.shape[1];
    out.width = img.shape[2];
    out.pixels.resize(static_cast<size_t>(out.height) * out.width * 3);
    for (int64_t y = 0; y < out.height; ++y)
        for (int64_t x = 0; x < out.width; ++x)
            for (int64_t c = 0; c < 3; ++c)
                out.pixels[(y * out.width + x) * 3 + c] =
                    model_to_byte(img.v[(c * out.height + y) * out.width + x]);
    return out;
}

Tensor mask_from_png(const PngData& img, bool strict_binary) {
    if (img.channels != 1) throw std::runtime_error("expected grayscale mask");
    Tensor t({img.height, img.width});
    for (int64_t i = 0; i < t.size(); ++i) {
        const uint8_t b = img.pixels[i];
        if (strict_binary && b != 0 && b != 255)
            throw std::runtime_error("corrupt mask: value " + std::to_string(int(b)) +
                                     " is not in {0,255}");
        t[i] = b >= 128 ? 1.0f : 0.0f;
    }
    return t;
}

PngData mask_to_png(const Tensor& mask) {
    PngData out;
    out.channels = 1;
    out.height = mask.shape[0];
    out.width = mask.shape[1];
    out.pixels.resize(static_cast<size_t>(out.height) * out.width);
    for (int64_t i = 0; i < mask.size(); ++i) out.pixels[i] = mask[i] >= 0.5f ? 255 : 0;
    return out;
}

void quantize_to_byte_grid(Tensor& img) {
    for (auto& v : img.v) v = byte_to_model(model_to_byte(v));
}

Tensor resize_image(const Tensor& img, int64_t H2, int64_t W2) {
    const int64_t C = img.shape[0], H = img.shape[1], W = img.shape[2];
    Tensor out({C, H2, W2});
    kernels::resize_bilinear(img.data(), out.data(), C, H, W, H2, W2);
    return out;
}

Tensor resize_mask(const Tensor& mask, int64_t H2, int64_t W2) {
    const int64_t H = mask.shape[0], W = mask.shape[1];
    Tensor out({H2, W2});
    kernels::resize_bilinear(mask.data(), out.data(), 1, H, W, H2, W2);
    for (auto& v : out.v) v = std::min(std::max(v, 0.0f), 1.0f);
    return out;
}

Tensor crop_image(const Tensor& img, int64_t y0, int64_t x0, int64_t h, int64_t w) {
    const int64_t C = img.shape[0], H = img.shape[1], W = img.shape[2];
    if (y0 < 0 || x0 < 0 || y0 + h > H || x0 + w > W)
        throw std::invalid_argument("crop out of bounds");
    Tensor out({C, h, w});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < h; ++y)
            std::copy(img.data() + (c * H + y0 + y) * W + x0,
                      img.data() + (c * H + y0 + y) * W + x0 + w,
                      out.data() + (c * h + y) * w);
    return out;
}

Tensor crop_mask(const Tensor& mask, int64_t y0, int64_t x0, int64_t h, int64_t w) {
    Tensor as_img = mask.reshaped({1, mask.shape[0], mask.shape[1]});
    Tensor c = crop_image(as_img, y0, x0, h, w);
    return c.reshaped({h, w});
}

Tensor downscale_mask_area(const Tensor& mask, int64_t factor) {
    const int64_t H = mask.shape[0], W = mask.shape[1];
    Tensor out({H / factor, W / factor});
    kernels::avgpool(mask.data(), out.data(), 1, H, W, factor);
    return out;
}

int64_t mask_nonzero_count(const Tensor& mask) {
    int64_t n = 0;
    for (int64_t i = 0; i < mask.size(); ++i)
        if (mask[i] > 0.0f) ++n;
    return n;
}

bool mask_bounding_box(const Tensor& mask, int64_t& y0, int64_t& x0, int64_t& y1, int64_t& x1) {
    const int64_t H = mask.shape[0], W = mask.shape[1];
    y0 = H;
    x0 = W;
    y1 = -1;
    x1 = -1;
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            if (mask[y * W + x] > 0.0f) {
                y0 = std::min(y0, y);
                x0 = std::min(x0, x);
                y1 = std::max(y1, y);
                x1 = std::max(x1, x);
            }
    return y1 >= 0;
}

}  // namespace defectgen
