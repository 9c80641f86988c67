#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "defectgen/image.hpp"
#include "defectgen/rng.hpp"

using namespace defectgen;
namespace fs = std::filesystem;

namespace {
fs::path tmpdir() {
    auto p = fs::temp_directory_path() / "defectgen_image_test";
    fs::create_directories(p);
    return p;
}
}  // namespace

TEST_CASE("byte/model range conversion round-trips on the byte grid") {
    CHECK(model_to_byte(-1.0f) == 0);
    CHECK(model_to_byte(1.0f) == 255);
    CHECK(model_to_byte(-2.0f) == 0);
    CHECK(model_to_byte(2.0f) == 255);
    for (int b = 0; b < 256; ++b)
        CHECK(model_to_byte(byte_to_model(static_cast<uint8_t>(b))) == b);
}

TEST_CASE("png image round-trip is exact after grid quantization") {
    auto rng = make_rng(3);
    Tensor img({3, 9, 13});
    fill_uniform(img, rng, -1.0, 1.0);
    quantize_to_byte_grid(img);
    const auto path = (tmpdir() / "img.png").string();
    write_png(path, image_to_png(img));
    Tensor back = image_from_png(read_png(path));
    CHECK(back.shape == img.shape);
    CHECK(max_abs_diff(img, back) == 0.0f);
}

TEST_CASE("png mask round-trip and strict binary enforcement") {
    Tensor m({6, 6});
    m[7] = 1.0f;
    m[8] = 1.0f;
    const auto path = (tmpdir() / "mask.png").string();
    write_png(path, mask_to_png(m));
    Tensor back = mask_from_png(read_png(path), true);
    CHECK(max_abs_diff(m, back) == 0.0f);

    // gray value 128 is not a legal mask byte
    PngData bad;
    bad.width = 2;
    bad.height = 1;
    bad.channels = 1;
    bad.pixels = {0, 128};
    const auto badpath = (tmpdir() / "bad.png").string();
    write_png(badpath, bad);
    CHECK_THROWS(mask_from_png(read_png(badpath), true));
}

TEST_CASE("crop and bounding box") {
    Tensor img({1, 5, 5});
    for (int64_t i = 0; i < 25; ++i) img[i] = float(i);
    Tensor c = crop_image(img, 1, 2, 3, 2);
    CHECK(c.shape == std::vector<int64_t>{1, 3, 2});
    CHECK(c[0] == 7.0f);
    CHECK(c[5] == 18.0f);
    CHECK_THROWS(crop_image(img, 3, 3, 3, 3));

    Tensor m({4, 4});
    m.v[1 * 4 + 2] = 1.0f;
    m.v[3 * 4 + 1] = 1.0f;
    int64_t y0, x0, y1, x1;
    REQUIRE(mask_bounding_box(m, y0, x0, y1, x1));
    CHECK(y0 == 1);
    CHECK(x0 == 1);
    CHECK(y1 == 3);
    CHECK(x1 == 2);
    Tensor empty({4, 4});
    CHECK_FALSE(mask_bounding_box(empty, y0, x0, y1, x1));
}

TEST_CASE("mask resize stays in range and area downscale averages") {
    Tensor m({4, 4});
    for (int64_t i = 0; i < 8; ++i) m[i] = 1.0f;  // top half on
    Tensor r = resize_mask(m, 7, 7);
    for (int64_t i = 0; i < r.size(); ++i) {
        CHECK(r[i] >= 0.0f);
        CHECK(r[i] <= 1.0f);
    }
    Tensor d = downscale_mask_area(m, 2);
    CHECK(d.shape == std::vector<int64_t>{2, 2});
    CHECK(d[0] == 1.0f);
    CHECK(d[2] == 0.0f);
    CHECK(mask_nonzero_count(d) == 2);
}
