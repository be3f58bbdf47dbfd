#include "protosal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>

#include "protosal/common.hpp"

namespace protosal {

namespace {

const char* const kMetricNames[kMetricCount] = {
    "jAUC", "bAUC", "sAUC", "NSS", "IG", "SIM", "CC", "MSE", "MAE", "KL",
};

void check_map(const DenseMap& m, const char* who) {
    if (m.height < 1 || m.width < 1)
        throw ConfigError(std::string(who) + ": empty map");
    if (m.values.size() != std::size_t(m.height) * std::size_t(m.width))
        throw ConfigError(std::string(who) + ": values size does not match shape");
}

void check_fixations(const BinaryFixationMap& q, const char* who) {
    if (q.height < 1 || q.width < 1)
        throw ConfigError(std::string(who) + ": empty fixation map");
    if (q.values.size() != std::size_t(q.height) * std::size_t(q.width))
        throw ConfigError(std::string(who) + ": fixation size does not match shape");
    if (q.positive_count < 1)
        throw ConfigError(std::string(who) + ": fixation map has no positives");
}

void check_same_shape(const DenseMap& p, int h, int w, const char* who) {
    if (p.height != h || p.width != w)
        throw ConfigError(std::string(who) + ": shape mismatch");
}

void require_mode(const DenseMap& m, NormMode mode, const char* who) {
    if (m.normalization != mode)
        throw ConfigError(std::string(who) + (mode == NormMode::Distribution
                                                  ? ": map must be distribution-normalized"
                                                  : ": map must be minmax01-normalized"));
}

// Trapezoid over points already sorted by ascending x.
double trapezoid(const std::vector<double>& xs, const std::vector<double>& ys) {
    double area = 0.0;
    for (std::size_t i = 1; i < xs.size(); ++i)
        area += (xs[i] - xs[i - 1]) * 0.5 * (ys[i] + ys[i - 1]);
    return area;
}

// Count of elements >= t in an ascending-sorted vector.
std::size_t count_at_least(const std::vector<double>& sorted, double t) {
    return std::size_t(sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), t));
}

// Shared curve builder for the sampled AUCs: thresholds are cfg.auc_thresholds
// evenly spaced levels in [0,1], positives are the fixated saliency values and
// each repeat draws its negatives' pixel indices from `sample_negative`.
template <class SampleNegative>
double sampled_auc(const DenseMap& P, const BinaryFixationMap& Q, const MetricConfig& cfg,
                   Rng& rng, const char* who, SampleNegative sample_negative) {
    check_map(P, who);
    check_fixations(Q, who);
    check_same_shape(P, Q.height, Q.width, who);
    require_mode(P, NormMode::MinMax01, who);
    if (cfg.auc_thresholds < 2)
        throw ConfigError(std::string(who) + ": need at least two threshold levels");
    if (cfg.borji_negative_samples < 1)
        throw ConfigError(std::string(who) + ": need at least one negative sample");
    if (cfg.auc_repeats < 1)
        throw ConfigError(std::string(who) + ": need at least one repeat");

    std::size_t total = P.values.size();
    std::vector<double> fix_vals;
    fix_vals.reserve(std::size_t(Q.positive_count));
    for (std::size_t i = 0; i < total; ++i)
        if (Q.values[i]) fix_vals.push_back(P.values[i]);
    if (fix_vals.empty())
        throw ConfigError(std::string(who) + ": positive_count disagrees with values");
    std::sort(fix_vals.begin(), fix_vals.end());

    int levels = cfg.auc_thresholds;
    std::vector<double> tpr(std::size_t(levels) + 1);
    tpr[0] = 0.0;  // anchor (0, 0)
    for (int k = 0; k < levels; ++k) {
        double t = double(levels - 1 - k) / double(levels - 1);
        tpr[std::size_t(k) + 1] =
            double(count_at_least(fix_vals, t)) / double(fix_vals.size());
    }

    double area_sum = 0.0;
    std::vector<double> neg(std::size_t(cfg.borji_negative_samples));
    std::vector<double> fpr(std::size_t(levels) + 1);
    fpr[0] = 0.0;
    for (int rep = 0; rep < cfg.auc_repeats; ++rep) {
        for (double& v : neg) v = P.values[sample_negative(rng)];
        std::sort(neg.begin(), neg.end());
        for (int k = 0; k < levels; ++k) {
            double t = double(levels - 1 - k) / double(levels - 1);
            fpr[std::size_t(k) + 1] = double(count_at_least(neg, t)) / double(neg.size());
        }
        area_sum += trapezoid(fpr, tpr);
    }
    return area_sum / double(cfg.auc_repeats);
}

}  // namespace

const char* metric_name(MetricId id) {
    int i = int(id);
    if (i < 0 || i >= kMetricCount) throw ConfigError("unknown metric id");
    return kMetricNames[i];
}

MetricId metric_by_name(const std::string& name) {
    for (int i = 0; i < kMetricCount; ++i)
        if (name == kMetricNames[i]) return MetricId(i);
    throw ConfigError("unknown metric name: " + name);
}

Orientation metric_orientation(MetricId id) {
    switch (id) {
        case MetricId::Mse:
        case MetricId::Mae:
        case MetricId::Kl:
            return Orientation::Dissimilarity;
        default:
            metric_name(id);  // validates
            return Orientation::Similarity;
    }
}

DenseMap normalize_values(std::vector<double> values, int height, int width,
                          NormMode mode) {
    if (height < 1 || width < 1)
        throw ConfigError("normalize: empty map");
    if (values.size() != std::size_t(height) * std::size_t(width))
        throw ConfigError("normalize: values size does not match shape");
    for (double& v : values) {
        if (!std::isfinite(v)) throw NumericError("normalize: non-finite value");
        v = std::abs(v);
    }
    DenseMap out;
    out.height = height;
    out.width = width;
    out.normalization = mode;
    if (mode == NormMode::MinMax01) {
        double lo = values[0], hi = values[0];
        for (double v : values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (hi == lo) {
            // a constant map carries no ordering; park it at mid-scale
            std::fill(values.begin(), values.end(), 0.5);
        } else {
            for (double& v : values) v = (v - lo) / (hi - lo);
        }
    } else {
        double sum = 0.0;
        for (double v : values) sum += v;
        if (sum <= 0.0)
            throw NumericError("normalize: zero-mass map has no distribution form");
        for (double& v : values) v /= sum;
    }
    out.values = std::move(values);
    return out;
}

DenseMap normalize_map(const HeatmapRecord& raw, NormMode mode, bool positive_part_only) {
    if (raw.height < 1 || raw.width < 1)
        throw ConfigError("normalize: empty heatmap record");
    if (raw.values.size() != std::size_t(raw.height) * std::size_t(raw.width))
        throw ConfigError("normalize: heatmap record size does not match shape");
    std::vector<double> vals(raw.values.size());
    for (std::size_t i = 0; i < vals.size(); ++i) {
        double v = double(raw.values[i]);
        vals[i] = positive_part_only ? std::max(v, 0.0) : v;
    }
    return normalize_values(std::move(vals), int(raw.height), int(raw.width), mode);
}

BinaryFixationMap binarize_gt(const DenseMap& gt, double fraction) {
    check_map(gt, "binarize");
    if (!(fraction > 0.0) || fraction > 1.0)
        throw ConfigError("binarize: fraction must be in (0, 1]");
    std::size_t total = gt.values.size();
    auto keep = std::size_t(std::ceil(fraction * double(total)));
    keep = std::min(keep, total);
    std::vector<std::size_t> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return gt.values[a] > gt.values[b];
    });
    BinaryFixationMap out;
    out.height = gt.height;
    out.width = gt.width;
    out.values.assign(total, 0);
    for (std::size_t i = 0; i < keep; ++i) out.values[order[i]] = 1;
    out.positive_count = int(keep);
    return out;
}

DenseMap center_prior(int height, int width) {
    if (height < 1 || width < 1) throw ConfigError("center_prior: empty map");
    double cy = 0.5 * (height - 1), cx = 0.5 * (width - 1);
    double sy = std::max(double(height) / 4.0, 1e-9);
    double sx = std::max(double(width) / 4.0, 1e-9);
    std::vector<double> vals(std::size_t(height) * std::size_t(width));
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double dy = (y - cy) / sy, dx = (x - cx) / sx;
            vals[std::size_t(y) * width + x] = std::exp(-0.5 * (dy * dy + dx * dx));
        }
    return normalize_values(std::move(vals), height, width, NormMode::Distribution);
}

double auc_judd(const DenseMap& P, const BinaryFixationMap& Q) {
    check_map(P, "auc_judd");
    check_fixations(Q, "auc_judd");
    check_same_shape(P, Q.height, Q.width, "auc_judd");
    require_mode(P, NormMode::MinMax01, "auc_judd");

    std::size_t total = P.values.size();
    std::vector<double> fix_vals, non_vals;
    for (std::size_t i = 0; i < total; ++i)
        (Q.values[i] ? fix_vals : non_vals).push_back(P.values[i]);
    if (fix_vals.empty())
        throw ConfigError("auc_judd: positive_count disagrees with values");
    if (non_vals.empty())
        throw NumericError("auc_judd: every pixel is fixated");

    // thresholds at the saliency values of fixated pixels, plus the endpoints
    std::vector<double> thresholds = fix_vals;
    thresholds.push_back(0.0);
    thresholds.push_back(1.0);
    std::sort(thresholds.begin(), thresholds.end(), std::greater<double>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    std::sort(fix_vals.begin(), fix_vals.end());
    std::sort(non_vals.begin(), non_vals.end());

    std::vector<double> fpr{0.0}, tpr{0.0};
    for (double t : thresholds) {
        tpr.push_back(double(count_at_least(fix_vals, t)) / double(fix_vals.size()));
        fpr.push_back(double(count_at_least(non_vals, t)) / double(non_vals.size()));
    }
    return trapezoid(fpr, tpr);
}

double auc_borji(const DenseMap& P, const BinaryFixationMap& Q, const MetricConfig& cfg,
                 Rng rng) {
    check_fixations(Q, "auc_borji");
    std::size_t total = std::size_t(Q.height) * std::size_t(Q.width);
    if (std::size_t(Q.positive_count) >= total)
        throw NumericError("auc_borji: no non-fixated pixels to sample");
    // uniform over non-fixated pixels
    auto sampler = [&](Rng& r) {
        std::size_t idx;
        do {
            idx = r.uniform_int(std::uint64_t(total));
        } while (Q.values[idx]);
        return idx;
    };
    return sampled_auc(P, Q, cfg, rng, "auc_borji", sampler);
}

double auc_shuffled(const DenseMap& P, const BinaryFixationMap& Q,
                    const MetricConfig& cfg, Rng rng) {
    check_fixations(Q, "auc_shuffled");
    if (cfg.sauc_mode == SaucMode::CrossImage) {
        // conventional variant: negatives come from other images' fixations
        if (!cfg.crossimage_fixations || cfg.crossimage_fixations->empty())
            throw ConfigError("auc_shuffled: crossimage mode needs other images' fixations");
        std::vector<std::size_t> pool;
        for (const BinaryFixationMap& other : *cfg.crossimage_fixations) {
            check_fixations(other, "auc_shuffled");
            if (other.height != Q.height || other.width != Q.width)
                throw ConfigError("auc_shuffled: crossimage fixation shape mismatch");
            for (std::size_t i = 0; i < other.values.size(); ++i)
                if (other.values[i]) pool.push_back(i);
        }
        auto sampler = [&](Rng& r) {
            return pool[r.uniform_int(std::uint64_t(pool.size()))];
        };
        return sampled_auc(P, Q, cfg, rng, "auc_shuffled", sampler);
    }
    // center-weighted Gaussian over non-fixated pixels, drawn by rejection
    std::size_t total = std::size_t(Q.height) * std::size_t(Q.width);
    if (std::size_t(Q.positive_count) >= total)
        throw NumericError("auc_shuffled: no non-fixated pixels to sample");
    double cy = 0.5 * (Q.height - 1), cx = 0.5 * (Q.width - 1);
    double sy = std::max(double(Q.height) / 4.0, 1e-9);
    double sx = std::max(double(Q.width) / 4.0, 1e-9);
    auto sampler = [&](Rng& r) {
        for (;;) {
            auto y = std::llround(cy + sy * r.normal());
            auto x = std::llround(cx + sx * r.normal());
            if (y < 0 || y >= Q.height || x < 0 || x >= Q.width) continue;
            std::size_t idx = std::size_t(y) * std::size_t(Q.width) + std::size_t(x);
            if (!Q.values[idx]) return idx;
        }
    };
    return sampled_auc(P, Q, cfg, rng, "auc_shuffled", sampler);
}

double nss(const DenseMap& P, const BinaryFixationMap& Q) {
    check_map(P, "nss");
    check_fixations(Q, "nss");
    check_same_shape(P, Q.height, Q.width, "nss");

    std::size_t total = P.values.size();
    double mean = 0.0;
    for (double v : P.values) mean += v;
    mean /= double(total);
    double var = 0.0;
    for (double v : P.values) var += (v - mean) * (v - mean);
    var /= double(total);
    if (var <= 0.0)
        throw NumericError("nss: constant saliency map has zero variance");
    double sd = std::sqrt(var);

    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < total; ++i)
        if (Q.values[i]) {
            acc += (P.values[i] - mean) / sd;
            ++n;
        }
    if (n == 0) throw ConfigError("nss: positive_count disagrees with values");
    return acc / double(n);
}

double infogain(const DenseMap& P, const BinaryFixationMap& Q, const DenseMap* baseline,
                double epsilon) {
    check_map(P, "infogain");
    check_fixations(Q, "infogain");
    check_same_shape(P, Q.height, Q.width, "infogain");
    require_mode(P, NormMode::Distribution, "infogain");
    if (!(epsilon > 0.0)) throw ConfigError("infogain: epsilon must be positive");
    if (baseline) {
        check_map(*baseline, "infogain baseline");
        check_same_shape(*baseline, Q.height, Q.width, "infogain baseline");
        require_mode(*baseline, NormMode::Distribution, "infogain baseline");
    }
    double uniform = 1.0 / double(P.values.size());
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < P.values.size(); ++i)
        if (Q.values[i]) {
            double b = baseline ? baseline->values[i] : uniform;
            acc += std::log2(epsilon + P.values[i]) - std::log2(epsilon + b);
            ++n;
        }
    if (n == 0) throw ConfigError("infogain: positive_count disagrees with values");
    return acc / double(n);
}

double sim(const DenseMap& P, const DenseMap& Q) {
    check_map(P, "sim");
    check_map(Q, "sim");
    check_same_shape(P, Q.height, Q.width, "sim");
    require_mode(P, NormMode::Distribution, "sim");
    require_mode(Q, NormMode::Distribution, "sim");
    double acc = 0.0;
    for (std::size_t i = 0; i < P.values.size(); ++i)
        acc += std::min(P.values[i], Q.values[i]);
    return acc;
}

double cc(const DenseMap& P, const DenseMap& Q) {
    check_map(P, "cc");
    check_map(Q, "cc");
    check_same_shape(P, Q.height, Q.width, "cc");
    std::size_t total = P.values.size();
    double mp = 0.0, mq = 0.0;
    for (std::size_t i = 0; i < total; ++i) {
        mp += P.values[i];
        mq += Q.values[i];
    }
    mp /= double(total);
    mq /= double(total);
    double spp = 0.0, sqq = 0.0, spq = 0.0;
    for (std::size_t i = 0; i < total; ++i) {
        double dp = P.values[i] - mp, dq = Q.values[i] - mq;
        spp += dp * dp;
        sqq += dq * dq;
        spq += dp * dq;
    }
    if (spp <= 0.0 || sqq <= 0.0)
        throw NumericError("cc: constant map has zero variance");
    return spq / std::sqrt(spp * sqq);
}

double mse(const DenseMap& P, const DenseMap& Q) {
    check_map(P, "mse");
    check_map(Q, "mse");
    check_same_shape(P, Q.height, Q.width, "mse");
    if (P.normalization != Q.normalization)
        throw ConfigError("mse: maps use different normalizations");
    double acc = 0.0;
    for (std::size_t i = 0; i < P.values.size(); ++i) {
        double d = P.values[i] - Q.values[i];
        acc += d * d;
    }
    return acc / double(P.values.size());
}

double mae(const DenseMap& P, const DenseMap& Q, bool signed_mode) {
    check_map(P, "mae");
    check_map(Q, "mae");
    check_same_shape(P, Q.height, Q.width, "mae");
    if (P.normalization != Q.normalization)
        throw ConfigError("mae: maps use different normalizations");
    double acc = 0.0;
    for (std::size_t i = 0; i < P.values.size(); ++i) {
        double d = P.values[i] - Q.values[i];
        acc += signed_mode ? d : std::abs(d);
    }
    return acc / double(P.values.size());
}

double kl(const DenseMap& P, const DenseMap& Q, double epsilon) {
    check_map(P, "kl");
    check_map(Q, "kl");
    check_same_shape(P, Q.height, Q.width, "kl");
    require_mode(P, NormMode::Distribution, "kl");
    require_mode(Q, NormMode::Distribution, "kl");
    if (!(epsilon > 0.0)) throw ConfigError("kl: epsilon must be positive");
    double acc = 0.0;
    for (std::size_t i = 0; i < P.values.size(); ++i)
        acc += Q.values[i] * std::log((Q.values[i] + epsilon) / (P.values[i] + epsilon));
    return acc;
}

std::vector<MetricResult> evaluate_pair(const HeatmapRecord& saliency,
                                        const HeatmapRecord& attribution,
                                        const MetricConfig& cfg) {
    if (saliency.height != attribution.height || saliency.width != attribution.width)
        throw ConfigError("evaluate_pair: saliency and attribution shapes differ");

    // the attribution is treated as ground truth; its minmax form never fails
    DenseMap p_mm = normalize_map(saliency, NormMode::MinMax01, cfg.positive_part_only);
    DenseMap a_mm = normalize_map(attribution, NormMode::MinMax01, cfg.positive_part_only);
    BinaryFixationMap q = binarize_gt(a_mm, cfg.binarize_fraction);

    auto try_dist = [&](const HeatmapRecord& r, DenseMap& out, bool& ok) {
        try {
            out = normalize_map(r, NormMode::Distribution, cfg.positive_part_only);
            ok = true;
        } catch (const NumericError&) {
            ok = false;
        }
    };
    DenseMap p_dist, a_dist;
    bool p_dist_ok = false, a_dist_ok = false;
    try_dist(saliency, p_dist, p_dist_ok);
    try_dist(attribution, a_dist, a_dist_ok);

    auto pair_rng = [&](MetricId id) {
        std::uint64_t sources =
            (std::uint64_t(saliency.source_id) << 32) | std::uint64_t(attribution.source_id);
        return Rng::derive(cfg.seed, saliency.image_id, sources, std::uint64_t(int(id)));
    };

    std::vector<MetricResult> out;
    out.reserve(kMetricCount);
    for (int i = 0; i < kMetricCount; ++i) {
        MetricId id = MetricId(i);
        MetricResult r;
        r.id = id;
        r.orientation = metric_orientation(id);
        try {
            switch (id) {
                case MetricId::AucJudd:
                    r.value = auc_judd(p_mm, q);
                    break;
                case MetricId::AucBorji:
                    r.value = auc_borji(p_mm, q, cfg, pair_rng(id));
                    break;
                case MetricId::AucShuffled:
                    r.value = auc_shuffled(p_mm, q, cfg, pair_rng(id));
                    break;
                case MetricId::Nss:
                    r.value = nss(p_mm, q);
                    break;
                case MetricId::InfoGain:
                    if (!p_dist_ok) throw NumericError("saliency map has zero mass");
                    r.value = infogain(p_dist, q, cfg.ig_baseline, cfg.epsilon);
                    break;
                case MetricId::Sim:
                    if (!p_dist_ok) throw NumericError("saliency map has zero mass");
                    if (!a_dist_ok) throw NumericError("attribution map has zero mass");
                    r.value = sim(p_dist, a_dist);
                    break;
                case MetricId::Cc:
                    r.value = cc(p_mm, a_mm);
                    break;
                case MetricId::Mse:
                    r.value = mse(p_mm, a_mm);
                    break;
                case MetricId::Mae:
                    r.value = mae(p_mm, a_mm, cfg.mae_signed);
                    break;
                case MetricId::Kl:
                    if (!p_dist_ok) throw NumericError("saliency map has zero mass");
                    if (!a_dist_ok) throw NumericError("attribution map has zero mass");
                    r.value = kl(p_dist, a_dist, cfg.epsilon);
                    break;
            }
        } catch (const NumericError& e) {
            r.missing = true;
            r.value = std::numeric_limits<double>::quiet_NaN();
            r.note = e.what();
        }
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace protosal
