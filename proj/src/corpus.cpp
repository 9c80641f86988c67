#include "defectgen/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "defectgen/image.hpp"
#include "defectgen/kernels.hpp"
#include "defectgen/rng.hpp"

namespace defectgen {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

// ------------------------------------------------------------- config ----

CorpusConfig CorpusConfig::defaults() {
    CorpusConfig c;
    c.defect_categories = {default_category("hole", "hole"),
                           default_category("scratch", "scratch")};
    return c;
}

DefectCategorySpec default_category(const std::string& name, const std::string& kind) {
    DefectCategorySpec s;
    s.name = name;
    s.kind = kind;
    if (kind == "hole") {
        s.min_area_frac = 0.015;
        s.max_area_frac = 0.09;
        s.strength = 0.9;
    } else if (kind == "scratch") {
        s.min_area_frac = 0.008;
        s.max_area_frac = 0.06;
        s.strength = 0.8;
    } else if (kind == "stain") {
        s.min_area_frac = 0.02;
        s.max_area_frac = 0.12;
        s.strength = 0.6;
    } else if (kind == "crack") {
        s.min_area_frac = 0.008;
        s.max_area_frac = 0.07;
        s.strength = 0.85;
    } else {
        throw std::invalid_argument("unknown defect kind: " + kind);
    }
    return s;
}

void CorpusConfig::validate() const {
    if (image_size < 16) throw std::invalid_argument("corpus: image_size must be >= 16");
    if (object_kinds.empty()) throw std::invalid_argument("corpus: need at least one object kind");
    if (defects_per_category < 1 || normals_count < 1)
        throw std::invalid_argument("corpus: counts must be >= 1");
    std::set<std::string> names;
    for (const auto& c : defect_categories) {
        if (!names.insert(c.name).second)
            throw std::invalid_argument("corpus: duplicate category name " + c.name);
        if (c.kind != "hole" && c.kind != "scratch" && c.kind != "stain" && c.kind != "crack")
            throw std::invalid_argument("corpus: unknown defect kind " + c.kind);
        if (!(c.min_area_frac > 0 && c.min_area_frac <= c.max_area_frac && c.max_area_frac < 1))
            throw std::invalid_argument("corpus: bad area bounds for " + c.name);
    }
    for (const auto& k : object_kinds)
        if (k != "disc" && k != "weave" && k != "speckle")
            throw std::invalid_argument("corpus: unknown object kind " + k);
}

// ------------------------------------------------------------ painting ----

namespace {

float clamp1(float v) { return std::min(std::max(v, -1.0f), 1.0f); }

double urand(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Tensor render_disc(int64_t S, std::mt19937_64& rng) {
    Tensor img({3, S, S});
    const double bg = -0.78 + urand(rng, -0.05, 0.05);
    const double cx = S * 0.5 + urand(rng, -1.2, 1.2);
    const double cy = S * 0.5 + urand(rng, -1.2, 1.2);
    const double R = 0.40 * S * (1.0 + urand(rng, -0.05, 0.05));
    double base[3] = {0.45 + urand(rng, -0.12, 0.12), 0.22 + urand(rng, -0.1, 0.1),
                      -0.15 + urand(rng, -0.08, 0.08)};
    const double fx = urand(rng, 2.0, 4.0), fy = urand(rng, 2.0, 4.0);
    const double ph = urand(rng, 0.0, 2 * M_PI);
    std::uniform_real_distribution<double> speckle(-0.07, 0.07);
    for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x) {
            const double d = std::hypot(x - cx, y - cy);
            const double cover = std::min(std::max(R - d + 0.5, 0.0), 1.0);
            const double shade = 1.0 - 0.35 * (d / R) * (d / R);
            const double wave = 0.06 * std::sin(2 * M_PI * (fx * x + fy * y) / S + ph);
            const double noise = speckle(rng);
            for (int64_t c = 0; c < 3; ++c) {
                const double obj = base[c] * shade + wave + noise;
                img.v[(c * S + y) * S + x] = clamp1(float(bg + cover * (obj - bg)));
            }
        }
    return img;
}

Tensor render_weave(int64_t S, std::mt19937_64& rng) {
    Tensor img({3, S, S});
    double base[3] = {0.05 + urand(rng, -0.1, 0.1), 0.0 + urand(rng, -0.1, 0.1),
                      -0.05 + urand(rng, -0.1, 0.1)};
    const double f1 = urand(rng, 3.0, 5.0), f2 = urand(rng, 3.0, 5.0);
    const double p1 = urand(rng, 0.0, 2 * M_PI), p2 = urand(rng, 0.0, 2 * M_PI);
    std::uniform_real_distribution<double> noise(-0.05, 0.05);
    for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x) {
            const double v = 0.25 * std::sin(2 * M_PI * f1 * x / S + p1) +
                             0.25 * std::sin(2 * M_PI * f2 * y / S + p2) + noise(rng);
            for (int64_t c = 0; c < 3; ++c)
                img.v[(c * S + y) * S + x] = clamp1(float(base[c] + v));
        }
    return img;
}

Tensor render_speckle(int64_t S, std::mt19937_64& rng) {
    // low-frequency value-noise grid upsampled bilinearly, plus fine grain
    const int64_t G = 5;
    Tensor grid({1, G, G});
    fill_uniform(grid, rng, -0.35, 0.35);
    Tensor coarse({1, S, S});
    kernels::resize_bilinear(grid.data(), coarse.data(), 1, G, G, S, S);
    double base[3] = {0.1 + urand(rng, -0.1, 0.1), 0.1 + urand(rng, -0.1, 0.1),
                      0.1 + urand(rng, -0.1, 0.1)};
    std::uniform_real_distribution<double> grain(-0.08, 0.08);
    Tensor img({3, S, S});
    for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x) {
            const double v = coarse.v[y * S + x] + grain(rng);
            for (int64_t c = 0; c < 3; ++c)
                img.v[(c * S + y) * S + x] = clamp1(float(base[c] + v));
        }
    return img;
}

Tensor render_object(const std::string& kind, int64_t S, std::mt19937_64& rng) {
    if (kind == "disc") return render_disc(S, rng);
    if (kind == "weave") return render_weave(S, rng);
    if (kind == "speckle") return render_speckle(S, rng);
    throw std::invalid_argument("unknown object kind: " + kind);
}

struct Seg {
    double x0, y0, x1, y1;
};

double dist_to_seg(double px, double py, const Seg& s) {
    const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
    t = std::min(std::max(t, 0.0), 1.0);
    return std::hypot(px - (s.x0 + t * dx), py - (s.y0 + t * dy));
}

Tensor polyline_mask(const std::vector<Seg>& segs, double half_thick, int64_t S) {
    Tensor m({S, S});
    for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x) {
            double d = 1e9;
            for (const auto& s : segs) d = std::min(d, dist_to_seg(x, y, s));
            m.v[y * S + x] = d <= half_thick ? 1.0f : 0.0f;
        }
    return m;
}

double polyline_min_dist(double px, double py, const std::vector<Seg>& segs) {
    double d = 1e9;
    for (const auto& s : segs) d = std::min(d, dist_to_seg(px, py, s));
    return d;
}

// grows/shrinks `half_thick` until the mask area lands inside the bounds
Tensor fit_polyline_mask(const std::vector<Seg>& segs, double& half_thick, int64_t S,
                         const DefectCategorySpec& spec) {
    const double total = double(S) * S;
    Tensor m = polyline_mask(segs, half_thick, S);
    for (int it = 0; it < 60; ++it) {
        const double frac = mask_nonzero_count(m) / total;
        if (frac < spec.min_area_frac)
            half_thick *= 1.2;
        else if (frac > spec.max_area_frac)
            half_thick *= 0.85;
        else
            return m;
        m = polyline_mask(segs, half_thick, S);
    }
    return m;
}

struct DefectPaint {
    Tensor image;  // composited defect image
    Tensor mask;   // binary mask
};

DefectPaint paint_hole(const Tensor& src, const DefectCategorySpec& spec, std::mt19937_64& rng) {
    const int64_t S = src.shape[1];
    const double cx = S * (0.5 + urand(rng, -0.18, 0.18));
    const double cy = S * (0.5 + urand(rng, -0.18, 0.18));
    const double af = urand(rng, spec.min_area_frac, spec.max_area_frac);
    double r = std::sqrt(af * S * S / M_PI);

    Tensor mask({S, S});
    auto build = [&](double radius) {
        for (int64_t y = 0; y < S; ++y)
            for (int64_t x = 0; x < S; ++x)
                mask.v[y * S + x] = std::hypot(x - cx, y - cy) <= radius ? 1.0f : 0.0f;
    };
    build(r);
    for (int it = 0; it < 60; ++it) {
        const double frac = mask_nonzero_count(mask) / double(S * S);
        if (frac < spec.min_area_frac)
            r += 0.3;
        else if (frac > spec.max_area_frac)
            r -= 0.3;
        else
            break;
        build(r);
    }

    Tensor img = src;
    std::uniform_real_distribution<double> rim(-0.08, 0.08);
    const double dark[3] = {-0.92, -0.9, -0.88};
    for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x) {
            if (mask.v[y * S + x] == 0.0f) continue;
            const double d = std::hypot(x - cx, y - cy);
            const double w = spec.strength * (1.0 - 0.4 * (d / r) * (d / r)) + rim(rng);
            const double wc = std::min(std::max(w, 0.0), 1.0);
            for (int64_t c = 0; c < 3; ++c) {
                float& px = img.v[(c * S + y) * S + x];
                px = clamp1(float(px + wc * (dark[c] - px)));
            }
        }
    return {std::move(img), std::move(mask)};
}

DefectPaint paint_scratch(const Tensor& src, const DefectCategorySpec& spec,
                          std::mt19937_64& rng) {
    const int64_t S = src.shape[1];
    std::vector<Seg> segs;
    double x = S * urand(rng, 0.2, 0.8), y = S * urand(rng, 0.2, 0.8);
    double ang = urand(rng, 0.0, 2 * M_PI);
    const int n = 2 + int(urand(rng, 0.0, 1.999));
    for (int i = 0; i < n; ++i) {
        const double len = S * urand(rng, 0.2, 0.35);
        double nx = std::min(std::max(x + len * std::cos(ang), 1.0), S - 2.0);
        double ny = std::min(std::max(y + len * std::sin(ang), 1.0), S - 2.0);
        segs.push_back({x, y, nx, ny});
        x = nx;
        y = ny;
        ang += urand(rng, -0.5, 0.5);
    }
    double half = 0.8;
    Tensor mask = fit_polyline_mask(segs, half, S, spec);

    Tensor img = src;
    const bool bright = urand(rng, 0.0, 1.0) < 0.5;
    const double tone = bright ? 0.55 : -0.6;
    for (int64_t yy = 0; yy < S; ++yy)
        for (int64_t xx = 0; xx < S; ++xx) {
            if (mask.v[yy * S + xx] == 0.0f) continue;
            const double d = polyline_min_dist(xx, yy, segs);
            const double aa = std::min(std::max(half - d + 0.5, 0.0), 1.0);
            const double w = spec.strength * aa;
            for (int64_t c = 0; c < 3; ++c) {
                float& px = img.v[(c * S + yy) * S + xx];
                px = clamp1(float(px + w * (tone - px)));
            }
        }
    return {std::move(img), std::move(mask)};
}

DefectPaint paint_stain(const Tensor& src, const DefectCategorySpec& spec, std::mt19937_64& rng) {
    const int64_t S = src.shape[1];
    const double cx = S * (0.5 + urand(rng, -0.18, 0.18));
    const double cy = S * (0.5 + urand(rng, -0.18, 0.18));
    const double af = urand(rng, spec.min_area_frac, spec.max_area_frac);
    const double ratio = urand(rng, 0.5, 1.0);
    double a = std::sqrt(af * S * S / (M_PI * ratio));
    double b = a * ratio;
    const double rot = urand(rng, 0.0, M_PI);
    const double cr = std::cos(rot), sr = std::sin(rot);

    Tensor mask({S, S});
    auto build = [&](double aa, double bb) {
        for (int64_t y = 0; y < S; ++y)
            for (int64_t x = 0; x < S; ++x) {
                const double u = (x - cx) * cr + (y - cy) * sr;
                const double v = -(x - cx) * sr + (y - cy) * cr;
                const double q = (u / aa) * (u / aa) + (v / bb) * (v / bb);
                mask.v[y * S + x] = q <= 1.0 ? 1.0f : 0.0f;
            }
    };
    build(a, b);
    for (int it = 0; it < 60; ++it) {
        const double frac = mask_nonzero_count(mask) / double(S * S);
        if (frac < spec.min_area_frac) {
            a *= 1.08;
            b *= 1.08;
        } else if (frac > spec.max_area_frac) {
            a *= 0.93;
            b *= 0.93;
        } else {
            break;
        }
        build(a, b);
    }

    Tensor img = src;
    for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x) {
            if (mask.v[y * S + x] == 0.0f) continue;
            const double u = (x - cx) * cr + (y - cy) * sr;
            const double v = -(x - cx) * sr + (y - cy) * cr;
            const double q = std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
            const double w = spec.strength * (1.0 - 0.5 * q * q);
            const float r0 = img.v[(0 * S + y) * S + x];
            const float g0 = img.v[(1 * S + y) * S + x];
            const float b0 = img.v[(2 * S + y) * S + x];
            // rotate channels for a hue shift
            const float sh[3] = {g0, b0, r0};
            const float orig[3] = {r0, g0, b0};
            for (int64_t c = 0; c < 3; ++c)
                img.v[(c * S + y) * S + x] =
                    clamp1(float(orig[c] + w * (sh[c] + 0.15 - orig[c])));
        }
    return {std::move(img), std::move(mask)};
}

DefectPaint paint_crack(const Tensor& src, const DefectCategorySpec& spec, std::mt19937_64& rng) {
    const int64_t S = src.shape[1];
    std::vector<Seg> segs;
    double x = S * urand(rng, 0.3, 0.7), y = S * urand(rng, 0.15, 0.35);
    double ang = M_PI / 2 + urand(rng, -0.4, 0.4);  // biased downward
    const int steps = 8 + int(urand(rng, 0.0, 4.999));
    double bx = 0, by = 0, bang = 0;
    const int branch_at = steps / 2;
    for (int i = 0; i < steps; ++i) {
        const double len = urand(rng, 1.6, 2.6);
        double nx = std::min(std::max(x + len * std::cos(ang), 1.0), S - 2.0);
        double ny = std::min(std::max(y + len * std::sin(ang), 1.0), S - 2.0);
        segs.push_back({x, y, nx, ny});
        if (i == branch_at) {
            bx = nx;
            by = ny;
            bang = ang + (urand(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0) * urand(rng, 0.6, 1.1);
        }
        x = nx;
        y = ny;
        ang += urand(rng, -0.55, 0.55);
    }
    for (int i = 0; i < steps / 2; ++i) {
        const double len = urand(rng, 1.4, 2.2);
        double nx = std::min(std::max(bx + len * std::cos(bang), 1.0), S - 2.0);
        double ny = std::min(std::max(by + len * std::sin(bang), 1.0), S - 2.0);
        segs.push_back({bx, by, nx, ny});
        bx = nx;
        by = ny;
        bang += urand(rng, -0.5, 0.5);
    }
    double half = 0.7;
    Tensor mask = fit_polyline_mask(segs, half, S, spec);

    Tensor img = src;
    for (int64_t yy = 0; yy < S; ++yy)
        for (int64_t xx = 0; xx < S; ++xx) {
            if (mask.v[yy * S + xx] == 0.0f) continue;
            const double d = polyline_min_dist(xx, yy, segs);
            const double aa = std::min(std::max(half - d + 0.5, 0.0), 1.0);
            const double w = spec.strength * aa;
            for (int64_t c = 0; c < 3; ++c) {
                float& px = img.v[(c * S + yy) * S + xx];
                px = clamp1(float(px + w * (-0.85 - px)));
            }
        }
    return {std::move(img), std::move(mask)};
}

DefectPaint paint_defect(const Tensor& src, const DefectCategorySpec& spec,
                         std::mt19937_64& rng) {
    DefectPaint p;
    if (spec.kind == "hole")
        p = paint_hole(src, spec, rng);
    else if (spec.kind == "scratch")
        p = paint_scratch(src, spec, rng);
    else if (spec.kind == "stain")
        p = paint_stain(src, spec, rng);
    else if (spec.kind == "crack")
        p = paint_crack(src, spec, rng);
    else
        throw std::invalid_argument("unknown defect kind: " + spec.kind);
    // compositing guarantee: outside the mask the source pixels pass through
    const int64_t S = src.shape[1];
    for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x)
            if (p.mask.v[y * S + x] == 0.0f)
                for (int64_t c = 0; c < 3; ++c)
                    p.image.v[(c * S + y) * S + x] = src.v[(c * S + y) * S + x];
    return p;
}

std::string index_id(const std::string& prefix, int64_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%03d", int(i));
    return prefix + "_" + buf;
}

}  // namespace

// -------------------------------------------------------------- dataset ---

const DatasetRecord* Dataset::find(const std::string& id) const {
    for (const auto& r : records)
        if (r.id == id) return &r;
    return nullptr;
}

std::vector<const DatasetRecord*> Dataset::by_role(const std::string& role) const {
    std::vector<const DatasetRecord*> out;
    for (const auto& r : records)
        if (r.role == role) out.push_back(&r);
    return out;
}

std::vector<const DatasetRecord*> Dataset::defects_of(const std::string& category) const {
    std::vector<const DatasetRecord*> out;
    for (const auto& r : records)
        if (r.role == "defect" && r.category == category) out.push_back(&r);
    return out;
}

std::vector<std::string> Dataset::categories() const {
    std::vector<std::string> out;
    for (const auto& r : records)
        if (r.role == "defect" && std::find(out.begin(), out.end(), r.category) == out.end())
            out.push_back(r.category);
    std::sort(out.begin(), out.end());
    return out;
}

std::string object_of(const Dataset& ds, const DatasetRecord& rec) {
    if (rec.role == "normal") {
        const auto pos = rec.id.find("_normal");
        if (pos == std::string::npos) throw std::runtime_error("malformed normal id " + rec.id);
        return rec.id.substr(0, pos);
    }
    auto it = ds.defect_sources.find(rec.id);
    if (it == ds.defect_sources.end())
        throw std::runtime_error("no source normal recorded for " + rec.id);
    const DatasetRecord* src = ds.find(it->second);
    if (!src) throw std::runtime_error("source normal missing: " + it->second);
    return object_of(ds, *src);
}

Dataset generate_corpus(const CorpusConfig& config) {
    config.validate();
    const int64_t S = config.image_size;
    Dataset ds;

    std::vector<std::string> normal_ids;
    for (int64_t i = 0; i < config.normals_count; ++i) {
        const std::string kind = config.object_kinds[i % config.object_kinds.size()];
        auto rng = make_rng(config.seed, {uint64_t(Stream::corpus), 0, uint64_t(i)});
        Tensor img = render_object(kind, S, rng);
        quantize_to_byte_grid(img);
        const std::string id = index_id(kind + "_normal", i);
        ds.images[id] = std::move(img);
        ds.records.push_back({id, "normal", "", "images/" + id + ".png", "", "reference"});
        normal_ids.push_back(id);
    }

    for (size_t ci = 0; ci < config.defect_categories.size(); ++ci) {
        const auto& cat = config.defect_categories[ci];
        for (int64_t j = 0; j < config.defects_per_category; ++j) {
            auto rng = make_rng(config.seed, {uint64_t(Stream::corpus), 1 + ci, uint64_t(j)});
            const std::string src_id =
                normal_ids[(int64_t(ci) * config.defects_per_category + j) % normal_ids.size()];
            DefectPaint p = paint_defect(ds.images[src_id], cat, rng);
            quantize_to_byte_grid(p.image);
            const std::string id = index_id(cat.name, j);
            ds.images[id] = std::move(p.image);
            ds.masks[id] = std::move(p.mask);
            ds.records.push_back({id, "defect", cat.name, "images/" + id + ".png",
                                  "masks/" + id + ".png", "reference"});
            ds.defect_sources[id] = src_id;
        }
    }
    return ds;
}

std::pair<Dataset, Dataset> split_reference(const Dataset& ds, double fraction) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw std::invalid_argument("split_reference: fraction must be in (0,1)");

    Dataset ref, held;
    ref.pairing_policy = held.pairing_policy = ds.pairing_policy;

    auto copy_record = [&](Dataset& dst, const DatasetRecord& r, const std::string& split) {
        DatasetRecord c = r;
        c.split = split;
        dst.records.push_back(c);
        dst.images[r.id] = ds.images.at(r.id);
        if (!r.mask_path.empty()) dst.masks[r.id] = ds.masks.at(r.id);
        auto it = ds.defect_sources.find(r.id);
        if (it != ds.defect_sources.end()) dst.defect_sources[r.id] = it->second;
    };

    std::vector<std::string> normal_ids;
    for (const auto& r : ds.records)
        if (r.role == "normal") {
            copy_record(ref, r, "reference");
            copy_record(held, r, "heldout");
            normal_ids.push_back(r.id);
        }
    std::sort(normal_ids.begin(), normal_ids.end());

    std::vector<std::string> held_defects;
    for (const auto& cat : ds.categories()) {
        auto defects = ds.defects_of(cat);
        if (defects.size() < 2)
            throw std::invalid_argument("split_reference: category " + cat +
                                        " has fewer than 2 defect pairs");
        std::vector<const DatasetRecord*> sorted(defects.begin(), defects.end());
        std::sort(sorted.begin(), sorted.end(),
                  [](const DatasetRecord* a, const DatasetRecord* b) { return a->id < b->id; });
        const int64_t n = int64_t(sorted.size());
        const int64_t k = int64_t(std::ceil(fraction * double(n)));
        for (int64_t i = 0; i < n; ++i) {
            if (i < k) {
                copy_record(ref, *sorted[i], "reference");
            } else {
                copy_record(held, *sorted[i], "heldout");
                held_defects.push_back(sorted[i]->id);
            }
        }
    }
    std::sort(held_defects.begin(), held_defects.end());
    for (size_t i = 0; i < held_defects.size(); ++i)
        held.pairing.emplace_back(held_defects[i], normal_ids[i % normal_ids.size()]);
    return {std::move(ref), std::move(held)};
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");

    ordered_json manifest;
    manifest["records"] = ordered_json::array();
    for (const auto& r : ds.records) {
        ordered_json jr;
        jr["id"] = r.id;
        jr["role"] = r.role;
        jr["category"] = r.category.empty() ? ordered_json(nullptr) : ordered_json(r.category);
        jr["image_path"] = r.image_path;
        jr["mask_path"] = r.mask_path.empty() ? ordered_json(nullptr) : ordered_json(r.mask_path);
        jr["split"] = r.split;
        manifest["records"].push_back(jr);
        write_png((fs::path(dir) / r.image_path).string(), image_to_png(ds.images.at(r.id)));
        if (!r.mask_path.empty())
            write_png((fs::path(dir) / r.mask_path).string(), mask_to_png(ds.masks.at(r.id)));
    }
    manifest["pairing_policy"] = ds.pairing_policy;
    manifest["pairing"] = ordered_json::array();
    for (const auto& [d, n] : ds.pairing) manifest["pairing"].push_back({d, n});
    manifest["defect_sources"] = ordered_json::object();
    for (const auto& [d, n] : ds.defect_sources) manifest["defect_sources"][d] = n;

    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + dir);
    out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw std::runtime_error("no manifest.json in " + dir);
    ordered_json manifest;
    in >> manifest;

    Dataset ds;
    for (const auto& jr : manifest.at("records")) {
        DatasetRecord r;
        r.id = jr.at("id").get<std::string>();
        r.role = jr.at("role").get<std::string>();
        if (!jr.at("category").is_null()) r.category = jr.at("category").get<std::string>();
        r.image_path = jr.at("image_path").get<std::string>();
        if (!jr.at("mask_path").is_null()) r.mask_path = jr.at("mask_path").get<std::string>();
        r.split = jr.at("split").get<std::string>();

        if (r.role == "defect" && r.mask_path.empty())
            throw std::runtime_error("defect record " + r.id + " has no mask");
        if (r.role == "normal" && !r.mask_path.empty())
            throw std::runtime_error("normal record " + r.id + " has a mask");

        const auto img_file = fs::path(dir) / r.image_path;
        if (!fs::exists(img_file))
            throw std::runtime_error("manifest/image mismatch: missing " + r.image_path);
        ds.images[r.id] = image_from_png(read_png(img_file.string()));
        if (!r.mask_path.empty()) {
            const auto mask_file = fs::path(dir) / r.mask_path;
            if (!fs::exists(mask_file))
                throw std::runtime_error("manifest/mask mismatch: missing " + r.mask_path);
            Tensor m = mask_from_png(read_png(mask_file.string()), true);
            if (mask_nonzero_count(m) < 1)
                throw std::runtime_error("defect mask " + r.id + " is empty");
            ds.masks[r.id] = std::move(m);
        }
        ds.records.push_back(std::move(r));
    }
    if (manifest.contains("pairing_policy"))
        ds.pairing_policy = manifest["pairing_policy"].get<std::string>();
    if (manifest.contains("pairing"))
        for (const auto& p : manifest["pairing"])
            ds.pairing.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
    if (manifest.contains("defect_sources"))
        for (auto it = manifest["defect_sources"].begin(); it != manifest["defect_sources"].end();
             ++it)
            ds.defect_sources[it.key()] = it.value().get<std::string>();
    return ds;
}

}  // namespace defectgen
