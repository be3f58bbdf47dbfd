#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protosal/heatmap_store.hpp"
#include "protosal/rng.hpp"

namespace protosal {

enum class NormMode { MinMax01, Distribution };

// Non-negative H*W map with a declared normalization: minmax01 rescales to
// [0,1] (constant maps collapse to 0.5), distribution sums to one.
struct DenseMap {
    int height = 0, width = 0;
    NormMode normalization = NormMode::MinMax01;
    std::vector<double> values;  // row-major

    double at(int y, int x) const {
        return values[static_cast<std::size_t>(y) * width + x];
    }
};

// Binarized ground truth: the top fraction of salient pixels.
struct BinaryFixationMap {
    int height = 0, width = 0;
    std::vector<std::uint8_t> values;
    int positive_count = 0;
};

enum class SaucMode { CenterPrior, CrossImage };

struct MetricConfig {
    double binarize_fraction = 0.2;
    int auc_thresholds = 256;        // evenly spaced levels for the sampled AUCs
    int borji_negative_samples = 100;
    int auc_repeats = 100;
    SaucMode sauc_mode = SaucMode::CenterPrior;
    // Fixation maps of other images, required by the crossimage sampler.
    const std::vector<BinaryFixationMap>* crossimage_fixations = nullptr;
    double epsilon = 2.2e-16;          // regularizer for KL and the info gain
    const DenseMap* ig_baseline = nullptr;  // null: uniform baseline
    bool mae_signed = false;           // keep the sign of the mean error
    bool positive_part_only = false;   // signed maps: clamp instead of abs
    std::uint64_t seed = 1;
};

enum class MetricId : int {
    AucJudd = 0,
    AucBorji = 1,
    AucShuffled = 2,
    Nss = 3,
    InfoGain = 4,
    Sim = 5,
    Cc = 6,
    Mse = 7,
    Mae = 8,
    Kl = 9,
};

constexpr int kMetricCount = 10;

enum class Orientation { Similarity, Dissimilarity };

const char* metric_name(MetricId id);
MetricId metric_by_name(const std::string& name);  // throws ConfigError
Orientation metric_orientation(MetricId id);

struct MetricResult {
    MetricId id = MetricId::AucJudd;
    double value = 0.0;
    Orientation orientation = Orientation::Similarity;
    bool missing = false;
    std::string note;  // rejection reason when missing
};

// Signed maps are folded by absolute value (or clamped at zero when
// positive_part_only). Distribution mode rejects all-zero maps.
DenseMap normalize_map(const HeatmapRecord& raw, NormMode mode,
                       bool positive_part_only = false);
DenseMap normalize_values(std::vector<double> values, int height, int width,
                          NormMode mode);

// Top ceil(fraction * pixels) pixels; ties at the cut broken row-major.
BinaryFixationMap binarize_gt(const DenseMap& gt, double fraction);

// Center-weighted Gaussian prior (sigma = size/4), distribution-normalized.
DenseMap center_prior(int height, int width);

double auc_judd(const DenseMap& P, const BinaryFixationMap& Q);
double auc_borji(const DenseMap& P, const BinaryFixationMap& Q, const MetricConfig& cfg,
                 Rng rng);
double auc_shuffled(const DenseMap& P, const BinaryFixationMap& Q,
                    const MetricConfig& cfg, Rng rng);
double nss(const DenseMap& P, const BinaryFixationMap& Q);
double infogain(const DenseMap& P, const BinaryFixationMap& Q, const DenseMap* baseline,
                double epsilon);
double sim(const DenseMap& P, const DenseMap& Q);
double cc(const DenseMap& P, const DenseMap& Q);
double mse(const DenseMap& P, const DenseMap& Q);
double mae(const DenseMap& P, const DenseMap& Q, bool signed_mode = false);
double kl(const DenseMap& P, const DenseMap& Q, double epsilon);

// All ten metrics for one (saliency, attribution) pair; the attribution is
// the ground-truth side. Degenerate-data rejections (zero variance, zero
// mass) are recorded as missing results, config errors propagate.
std::vector<MetricResult> evaluate_pair(const HeatmapRecord& saliency,
                                        const HeatmapRecord& attribution,
                                        const MetricConfig& cfg);

}  // namespace protosal
