#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "defectgen/corpus.hpp"
#include "defectgen/image.hpp"

using namespace defectgen;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / "defectgen_corpus_test" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

CorpusConfig small_config() {
    CorpusConfig c = CorpusConfig::defaults();
    c.normals_count = 10;
    c.defects_per_category = 4;
    return c;
}

bool dirs_byte_identical(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> fa, fb;
    for (auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
    for (auto& e : fs::recursive_directory_iterator(b))
        if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
    std::sort(fa.begin(), fa.end());
    std::sort(fb.begin(), fb.end());
    if (fa != fb) return false;
    for (const auto& rel : fa) {
        std::ifstream ia(a / rel, std::ios::binary), ib(b / rel, std::ios::binary);
        std::string ca((std::istreambuf_iterator<char>(ia)), std::istreambuf_iterator<char>());
        std::string cb((std::istreambuf_iterator<char>(ib)), std::istreambuf_iterator<char>());
        if (ca != cb) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("same config and seed give byte-identical datasets on disk") {
    auto cfg = small_config();
    auto d1 = fresh_dir("det1");
    auto d2 = fresh_dir("det2");
    save_dataset(generate_corpus(cfg), d1.string());
    save_dataset(generate_corpus(cfg), d2.string());
    CHECK(dirs_byte_identical(d1, d2));
}

TEST_CASE("defect images differ from their source normal only inside the mask") {
    auto ds = generate_corpus(small_config());
    int checked = 0;
    for (const auto& r : ds.records) {
        if (r.role != "defect") continue;
        const Tensor& img = ds.images.at(r.id);
        const Tensor& src = ds.images.at(ds.defect_sources.at(r.id));
        const Tensor& m = ds.masks.at(r.id);
        const int64_t S = m.shape[0];
        bool changed_inside = false;
        for (int64_t y = 0; y < S; ++y)
            for (int64_t x = 0; x < S; ++x)
                for (int64_t c = 0; c < 3; ++c) {
                    const float a = img.v[(c * S + y) * S + x];
                    const float b = src.v[(c * S + y) * S + x];
                    if (m.v[y * S + x] == 0.0f) {
                        REQUIRE(a == b);
                    } else if (a != b) {
                        changed_inside = true;
                    }
                }
        CHECK(changed_inside);
        ++checked;
    }
    CHECK(checked == 8);
}

TEST_CASE("record counts: 2 categories x 12 defects + 60 normals = 84 records") {
    auto ds = generate_corpus(CorpusConfig::defaults());
    CHECK(ds.records.size() == 84);
    CHECK(ds.by_role("normal").size() == 60);
    CHECK(ds.by_role("defect").size() == 24);
    CHECK(ds.defects_of("hole").size() == 12);
    CHECK(ds.defects_of("scratch").size() == 12);
}

TEST_CASE("mask areas stay within the configured fraction bounds") {
    CorpusConfig cfg = CorpusConfig::defaults();
    cfg.defect_categories.push_back(default_category("stain", "stain"));
    cfg.defect_categories.push_back(default_category("crack", "crack"));
    cfg.normals_count = 8;
    cfg.defects_per_category = 6;
    auto ds = generate_corpus(cfg);
    const double total = double(cfg.image_size) * cfg.image_size;
    for (const auto& cat : cfg.defect_categories)
        for (const auto* r : ds.defects_of(cat.name)) {
            const double frac = mask_nonzero_count(ds.masks.at(r->id)) / total;
            CHECK(frac >= cat.min_area_frac);
            CHECK(frac <= cat.max_area_frac);
        }
}

TEST_CASE("invalid configs are rejected") {
    CorpusConfig c = CorpusConfig::defaults();
    c.image_size = 8;
    CHECK_THROWS(generate_corpus(c));
    c = CorpusConfig::defaults();
    c.normals_count = 0;
    CHECK_THROWS(generate_corpus(c));
    c = CorpusConfig::defaults();
    c.defect_categories[1].name = c.defect_categories[0].name;
    CHECK_THROWS(generate_corpus(c));
    c = CorpusConfig::defaults();
    c.defect_categories[0].kind = "dent";
    CHECK_THROWS(generate_corpus(c));
    c = CorpusConfig::defaults();
    c.object_kinds = {"sphere"};
    CHECK_THROWS(generate_corpus(c));
}

TEST_CASE("split_reference: ceil rule and determinism") {
    CorpusConfig cfg = CorpusConfig::defaults();
    cfg.normals_count = 10;
    cfg.defects_per_category = 12;
    auto ds = generate_corpus(cfg);

    auto [ref, held] = split_reference(ds, 1.0 / 3.0);
    CHECK(ref.defects_of("hole").size() == 4);
    CHECK(held.defects_of("hole").size() == 8);
    CHECK(ref.by_role("normal").size() == 10);
    CHECK(held.by_role("normal").size() == 10);
    for (const auto& r : ref.records) CHECK(r.split == "reference");
    for (const auto& r : held.records) CHECK(r.split == "heldout");

    // pairing covers every heldout defect, round-robin over sorted normals
    CHECK(held.pairing.size() == 16);
    CHECK(held.pairing_policy == "round-robin");
    for (const auto& [d, n] : held.pairing) {
        CHECK(held.find(d) != nullptr);
        CHECK(held.find(n) != nullptr);
    }

    // rerun gives identical membership
    auto [ref2, held2] = split_reference(ds, 1.0 / 3.0);
    REQUIRE(ref2.records.size() == ref.records.size());
    for (size_t i = 0; i < ref.records.size(); ++i) CHECK(ref.records[i].id == ref2.records[i].id);

    // 0.5 on 2 pairs -> 1/1
    CorpusConfig two = CorpusConfig::defaults();
    two.normals_count = 4;
    two.defects_per_category = 2;
    auto ds2 = generate_corpus(two);
    auto [r2, h2] = split_reference(ds2, 0.5);
    CHECK(r2.defects_of("hole").size() == 1);
    CHECK(h2.defects_of("hole").size() == 1);

    // a category with < 2 pairs cannot be split
    CorpusConfig one = CorpusConfig::defaults();
    one.defects_per_category = 1;
    CHECK_THROWS(split_reference(generate_corpus(one), 0.5));
    CHECK_THROWS(split_reference(ds, 0.0));
    CHECK_THROWS(split_reference(ds, 1.0));
}

TEST_CASE("save -> load round-trips records and pixels") {
    auto cfg = small_config();
    auto ds = generate_corpus(cfg);
    auto dir = fresh_dir("roundtrip");
    save_dataset(ds, dir.string());

    // manifest record count matches files on disk
    int64_t image_files = 0, mask_files = 0;
    for (auto& e : fs::directory_iterator(dir / "images")) (void)e, ++image_files;
    for (auto& e : fs::directory_iterator(dir / "masks")) (void)e, ++mask_files;
    CHECK(image_files == int64_t(ds.records.size()));
    CHECK(mask_files == int64_t(ds.by_role("defect").size()));

    Dataset back = load_dataset(dir.string());
    REQUIRE(back.records.size() == ds.records.size());
    for (size_t i = 0; i < ds.records.size(); ++i) {
        CHECK(back.records[i].id == ds.records[i].id);
        CHECK(back.records[i].role == ds.records[i].role);
        CHECK(back.records[i].category == ds.records[i].category);
        CHECK(back.records[i].split == ds.records[i].split);
        CHECK(max_abs_diff(back.images.at(ds.records[i].id), ds.images.at(ds.records[i].id)) ==
              0.0f);
    }
    CHECK(back.defect_sources == ds.defect_sources);

    // a missing mask file must fail the load
    const auto* defect = ds.by_role("defect").front();
    fs::remove(dir / defect->mask_path);
    CHECK_THROWS(load_dataset(dir.string()));
}

TEST_CASE("object_of resolves normals and defects") {
    auto ds = generate_corpus(small_config());
    for (const auto& r : ds.records) CHECK(object_of(ds, r) == "disc");
}
