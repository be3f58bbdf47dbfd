#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protosal/rng.hpp"
#include "protosal/tensor.hpp"

namespace protosal {

constexpr int kPatchSize = 96;

// One 96x96 RGB tile, channel-major float pixels in [0,1]. Synthetic patches
// carry the planted-signal mask; loaded patches do not.
struct Patch {
    Tensor pixels;  // {3, 96, 96}
    int label = 0;  // 0 benign, 1 malignant
    std::vector<std::uint8_t> mask;  // row-major 96*96, empty when absent

    bool has_mask() const { return !mask.empty(); }
};

struct DatasetSplit {
    std::vector<Patch> patches;
    std::size_t size() const { return patches.size(); }
    bool empty() const { return patches.empty(); }
};

struct Dataset {
    DatasetSplit train, val, test;
};

struct SyntheticConfig {
    int n_train = 2000, n_val = 500, n_test = 500;
    double balance = 0.5;  // malignant fraction
    // background
    int noise_octaves = 4;
    double fine_noise = 0.02;
    // planted signal: a spatial cluster of dark elliptical blobs
    int blob_min = 6, blob_max = 12;
    double radius_min = 3.0, radius_max = 7.0;
    double darkness_min = 0.45, darkness_max = 0.7;
    double cluster_spread = 12.0;
    double mask_min_fraction = 0.01, mask_max_fraction = 0.15;
    std::uint64_t seed = 1;
};

struct AugmentConfig {
    double hflip_prob = 0.5;
    double vflip_prob = 0.5;
    double brightness_delta = 0.1;
};

Dataset generate_synthetic(const SyntheticConfig& cfg);

Patch augment(const Patch& p, const AugmentConfig& cfg, Rng& rng);

// Directory of image files plus a labels CSV (filename,label). Images of any
// size are rescaled to 96x96. All record errors are collected before aborting.
DatasetSplit load_image_dir(const std::string& dir, const std::string& labels_csv);

void save_dataset_cache(const std::string& path, const Dataset& ds,
                        const SyntheticConfig& cfg);
Dataset load_dataset_cache(const std::string& path);

std::uint64_t synthetic_config_hash(const SyntheticConfig& cfg);

}  // namespace protosal
