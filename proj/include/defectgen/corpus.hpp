#ifndef DEFECTGEN_CORPUS_HPP
#define DEFECTGEN_CORPUS_HPP

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "defectgen/tensor.hpp"

namespace defectgen {

// Procedural stand-in for an industrial inspection dataset: textured objects
// with composited defects and exact ground-truth masks.

struct DefectCategorySpec {
    std::string name;
    std::string kind;  // hole | scratch | stain | crack
    double min_area_frac = 0.01;
    double max_area_frac = 0.10;
    double strength = 0.8;  // appearance intensity in [0,1]
};

struct CorpusConfig {
    int64_t image_size = 32;
    std::vector<std::string> object_kinds = {"disc"};
    std::vector<DefectCategorySpec> defect_categories;
    int64_t defects_per_category = 12;
    int64_t normals_count = 60;
    uint64_t seed = 1234;

    static CorpusConfig defaults();
    void validate() const;  // throws std::invalid_argument
};

DefectCategorySpec default_category(const std::string& name, const std::string& kind);

struct DatasetRecord {
    std::string id;
    std::string role;        // "normal" | "defect"
    std::string category;    // empty means none
    std::string image_path;  // relative to the dataset root
    std::string mask_path;   // empty means none
    std::string split;       // "reference" | "heldout"
};

struct Dataset {
    std::vector<DatasetRecord> records;
    std::map<std::string, Tensor> images;  // id -> (3,H,W) in [-1,1], byte-grid values
    std::map<std::string, Tensor> masks;   // id -> (H,W) in {0,1}
    std::string pairing_policy = "round-robin";
    // heldout defect mask id -> conditioning normal id (present on heldout splits)
    std::vector<std::pair<std::string, std::string>> pairing;
    // defect id -> the normal id it was composited from
    std::map<std::string, std::string> defect_sources;

    const DatasetRecord* find(const std::string& id) const;
    std::vector<const DatasetRecord*> by_role(const std::string& role) const;
    std::vector<const DatasetRecord*> defects_of(const std::string& category) const;
    std::vector<std::string> categories() const;
};

// Object kind of a record, e.g. "disc" ("disc_normal_003" or via defect source).
std::string object_of(const Dataset& ds, const DatasetRecord& rec);

Dataset generate_corpus(const CorpusConfig& config);

// Deterministic per-category split by sorted id. The reference set receives
// ceil(fraction*n) defect pairs per category; all normals appear in both
// outputs, relabeled with the split they sit in. The heldout set carries the
// round-robin mask-to-normal pairing used at generation time.
std::pair<Dataset, Dataset> split_reference(const Dataset& ds, double fraction);

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace defectgen

#endif
