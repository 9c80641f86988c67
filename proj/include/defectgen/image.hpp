#ifndef DEFECTGEN_IMAGE_HPP
#define DEFECTGEN_IMAGE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "defectgen/tensor.hpp"

namespace defectgen {

// Images live as (C,H,W) float tensors in model range [-1,1]; masks as (H,W)
// floats in [0,1]. On disk both are 8-bit PNG: RGB for images, gray for masks
// with defect pixels at 255.

struct PngData {
    int64_t width = 0;
    int64_t height = 0;
    int channels = 0;  // 1 or 3
    std::vector<uint8_t> pixels;  // row-major, interleaved
};

PngData read_png(const std::string& path);
void write_png(const std::string& path, const PngData& img);

// model range [-1,1] <-> byte range [0,255]
uint8_t model_to_byte(float v);
float byte_to_model(uint8_t b);

Tensor image_from_png(const PngData& img);                   // (3,H,W)
PngData image_to_png(const Tensor& img);

Tensor mask_from_png(const PngData& img, bool strict_binary);  // (H,W)
PngData mask_to_png(const Tensor& mask);                       // binarizes at 0.5

// Snaps every channel value onto the representable 8-bit grid so that
// save -> load round-trips exactly.
void quantize_to_byte_grid(Tensor& img);

// (C,H,W) -> (C,H2,W2) bilinear; masks pass C=1 via reshape
Tensor resize_image(const Tensor& img, int64_t H2, int64_t W2);
Tensor resize_mask(const Tensor& mask, int64_t H2, int64_t W2);

// crop [y0, y0+h) x [x0, x0+w)
Tensor crop_image(const Tensor& img, int64_t y0, int64_t x0, int64_t h, int64_t w);
Tensor crop_mask(const Tensor& mask, int64_t y0, int64_t x0, int64_t h, int64_t w);

// area-average mask downscale by integer factor (latent-resolution masks)
Tensor downscale_mask_area(const Tensor& mask, int64_t factor);

int64_t mask_nonzero_count(const Tensor& mask);
bool mask_bounding_box(const Tensor& mask, int64_t& y0, int64_t& x0, int64_t& y1, int64_t& x1);

}  // namespace defectgen

#endif
