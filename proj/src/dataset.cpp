#include "protosal/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "protosal/binio.hpp"
#include "protosal/common.hpp"
#include "protosal/csv.hpp"
#include "protosal/image_io.hpp"

namespace protosal {

namespace {

constexpr int P = kPatchSize;

// H&E-ish palette: pale pink ground, purple blotches, dark nuclei
constexpr float kPink[3] = {0.91f, 0.76f, 0.86f};
constexpr float kPurple[3] = {0.58f, 0.40f, 0.68f};
constexpr float kNucleus[3] = {0.18f, 0.08f, 0.25f};
constexpr float kFaintDot[3] = {0.70f, 0.52f, 0.76f};

// Smooth value noise in [0,1]: random lattice, bilinear interpolation.
void add_noise_octave(std::vector<float>& field, Rng& rng, int cells, float weight) {
    int g = cells + 1;
    std::vector<float> lattice(std::size_t(g) * g);
    for (auto& v : lattice) v = static_cast<float>(rng.uniform());
    double scale = double(cells) / P;
    for (int y = 0; y < P; ++y) {
        double fy = y * scale;
        int y0 = static_cast<int>(fy);
        double wy = fy - y0;
        for (int x = 0; x < P; ++x) {
            double fx = x * scale;
            int x0 = static_cast<int>(fx);
            double wx = fx - x0;
            double v = (1 - wy) * ((1 - wx) * lattice[y0 * g + x0] +
                                   wx * lattice[y0 * g + x0 + 1]) +
                       wy * ((1 - wx) * lattice[(y0 + 1) * g + x0] +
                             wx * lattice[(y0 + 1) * g + x0 + 1]);
            field[std::size_t(y) * P + x] += weight * static_cast<float>(v);
        }
    }
}

void paint_background(Patch& p, const SyntheticConfig& cfg, Rng& rng) {
    std::vector<float> field(std::size_t(P) * P, 0.f);
    float total = 0.f;
    int cells = 6;
    float w = 0.5f;
    for (int o = 0; o < cfg.noise_octaves; ++o) {
        add_noise_octave(field, rng, cells, w);
        total += w;
        cells *= 2;
        w *= 0.5f;
    }
    for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x) {
            float u = field[std::size_t(y) * P + x] / total;
            for (int c = 0; c < 3; ++c) {
                float base = kPink[c] + u * (kPurple[c] - kPink[c]);
                float noise = static_cast<float>(rng.uniform(-cfg.fine_noise,
                                                             cfg.fine_noise));
                p.pixels.data[std::size_t(c) * P * P + y * P + x] =
                    std::clamp(base + noise, 0.f, 1.f);
            }
        }
}

// Blends an ellipse into the patch; optionally records covered pixels.
void paint_ellipse(Patch& p, double cy, double cx, double ra, double rb, double angle,
                   float blend, const float* color, std::vector<std::uint8_t>* mask) {
    double ca = std::cos(angle), sa = std::sin(angle);
    double r = std::max(ra, rb) + 1.0;
    int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
    int y1 = std::min(P - 1, static_cast<int>(std::ceil(cy + r)));
    int x0 = std::max(0, static_cast<int>(std::floor(cx - r)));
    int x1 = std::min(P - 1, static_cast<int>(std::ceil(cx + r)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            double dy = y - cy, dx = x - cx;
            double u = (dx * ca + dy * sa) / ra;
            double v = (-dx * sa + dy * ca) / rb;
            double d = u * u + v * v;
            if (d >= 1.0) continue;
            // soft 20% rim so nuclei are not aliased squares
            float cov = d <= 0.64 ? 1.f : static_cast<float>((1.0 - d) / 0.36);
            float a = blend * cov;
            for (int c = 0; c < 3; ++c) {
                float& px = p.pixels.data[std::size_t(c) * P * P + y * P + x];
                px = (1 - a) * px + a * color[c];
            }
            if (mask && cov >= 0.5f) (*mask)[std::size_t(y) * P + x] = 1;
        }
}

void paint_faint_dots(Patch& p, Rng& rng) {
    int dots = 4 + static_cast<int>(rng.uniform_int(5));
    for (int i = 0; i < dots; ++i) {
        double cy = rng.uniform(4.0, P - 4.0);
        double cx = rng.uniform(4.0, P - 4.0);
        double r = rng.uniform(1.5, 3.0);
        paint_ellipse(p, cy, cx, r, r, 0.0, 0.15f, kFaintDot, nullptr);
    }
}

// Returns false when the mask area lands outside the configured bounds.
bool paint_signal(Patch& p, const SyntheticConfig& cfg, Rng& rng) {
    Patch backup = p;
    std::vector<std::uint8_t> mask(std::size_t(P) * P, 0);
    double margin = cfg.radius_max + cfg.cluster_spread;
    double cy = rng.uniform(margin, P - margin);
    double cx = rng.uniform(margin, P - margin);
    int blobs = cfg.blob_min +
                static_cast<int>(rng.uniform_int(cfg.blob_max - cfg.blob_min + 1));
    for (int i = 0; i < blobs; ++i) {
        double by = std::clamp(cy + rng.normal() * cfg.cluster_spread, cfg.radius_max,
                               P - cfg.radius_max);
        double bx = std::clamp(cx + rng.normal() * cfg.cluster_spread, cfg.radius_max,
                               P - cfg.radius_max);
        double ra = rng.uniform(cfg.radius_min, cfg.radius_max);
        double rb = rng.uniform(cfg.radius_min, cfg.radius_max);
        double angle = rng.uniform(0.0, 3.14159265358979323846);
        float dark = static_cast<float>(rng.uniform(cfg.darkness_min, cfg.darkness_max));
        paint_ellipse(p, by, bx, ra, rb, angle, dark, kNucleus, &mask);
    }
    double area = std::accumulate(mask.begin(), mask.end(), 0.0) / (double(P) * P);
    if (area < cfg.mask_min_fraction || area > cfg.mask_max_fraction) {
        p = std::move(backup);
        return false;
    }
    p.mask = std::move(mask);
    return true;
}

Patch make_patch(const SyntheticConfig& cfg, int split_id, int index, int label) {
    Patch p;
    p.pixels = Tensor({3, P, P});
    p.label = label;
    Rng rng = Rng::derive(cfg.seed, static_cast<std::uint64_t>(split_id),
                          static_cast<std::uint64_t>(index), 0);
    paint_background(p, cfg, rng);
    paint_faint_dots(p, rng);
    if (label == 1) {
        bool ok = false;
        for (int attempt = 0; attempt < 32 && !ok; ++attempt) {
            Rng srng = Rng::derive(cfg.seed, static_cast<std::uint64_t>(split_id),
                                   static_cast<std::uint64_t>(index),
                                   1 + static_cast<std::uint64_t>(attempt));
            ok = paint_signal(p, cfg, srng);
        }
        if (!ok)
            throw Error("synthetic signal geometry infeasible under the configured "
                        "mask area bounds");
    }
    return p;
}

DatasetSplit make_split(const SyntheticConfig& cfg, int split_id, int n) {
    if (n < 1) throw Error("split size must be >= 1");
    int n_pos = static_cast<int>(std::llround(cfg.balance * n));
    std::vector<int> labels(n, 0);
    std::fill(labels.begin(), labels.begin() + n_pos, 1);
    Rng order = Rng::derive(cfg.seed, static_cast<std::uint64_t>(split_id), 0xfeed, 0);
    order.shuffle(labels);
    DatasetSplit split;
    split.patches.reserve(n);
    for (int i = 0; i < n; ++i)
        split.patches.push_back(make_patch(cfg, split_id, i, labels[i]));
    return split;
}

}  // namespace

Dataset generate_synthetic(const SyntheticConfig& cfg) {
    if (cfg.balance < 0 || cfg.balance > 1) throw Error("balance must be in [0,1]");
    if (cfg.radius_max + cfg.cluster_spread >= P / 2.0)
        throw Error("blob geometry does not fit the patch");
    if (cfg.radius_min <= 0 || cfg.radius_min > cfg.radius_max)
        throw Error("bad radius range");
    Dataset ds;
    ds.train = make_split(cfg, 0, cfg.n_train);
    ds.val = make_split(cfg, 1, cfg.n_val);
    ds.test = make_split(cfg, 2, cfg.n_test);
    return ds;
}

Patch augment(const Patch& p, const AugmentConfig& cfg, Rng& rng) {
    Patch out = p;
    bool hflip = rng.uniform() < cfg.hflip_prob;
    bool vflip = rng.uniform() < cfg.vflip_prob;
    float delta = static_cast<float>(
        rng.uniform(-cfg.brightness_delta, cfg.brightness_delta));
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < P; ++y)
            for (int x = 0; x < P; ++x) {
                int sy = vflip ? P - 1 - y : y;
                int sx = hflip ? P - 1 - x : x;
                float v = p.pixels.data[std::size_t(c) * P * P + sy * P + sx] + delta;
                out.pixels.data[std::size_t(c) * P * P + y * P + x] =
                    std::clamp(v, 0.f, 1.f);
            }
    if (p.has_mask()) {
        for (int y = 0; y < P; ++y)
            for (int x = 0; x < P; ++x) {
                int sy = vflip ? P - 1 - y : y;
                int sx = hflip ? P - 1 - x : x;
                out.mask[std::size_t(y) * P + x] = p.mask[std::size_t(sy) * P + sx];
            }
    }
    return out;
}

DatasetSplit load_image_dir(const std::string& dir, const std::string& labels_csv) {
    Csv labels = Csv::read_file(labels_csv);
    int fcol = labels.column("filename");
    int lcol = labels.column("label");
    DatasetSplit split;
    std::vector<std::string> errors;
    for (const auto& row : labels.rows) {
        const std::string& fname = row[fcol];
        const std::string& lstr = row[lcol];
        std::string path = (std::filesystem::path(dir) / fname).string();
        if (lstr != "0" && lstr != "1") {
            errors.push_back(fname + ": label `" + lstr + "` not in {0,1}");
            continue;
        }
        if (!std::filesystem::exists(path)) {
            errors.push_back(fname + ": missing file");
            continue;
        }
        try {
            Image img = read_image(path);
            if (img.height != P || img.width != P) img = resize_bilinear(img, P, P);
            Patch p;
            p.pixels = Tensor({3, P, P});
            p.label = lstr[0] - '0';
            for (int y = 0; y < P; ++y)
                for (int x = 0; x < P; ++x)
                    for (int c = 0; c < 3; ++c)
                        p.pixels.data[std::size_t(c) * P * P + y * P + x] =
                            img.at(y, x, c);
            split.patches.push_back(std::move(p));
        } catch (const Error& e) {
            errors.push_back(fname + ": " + e.what());
        }
    }
    if (!errors.empty()) {
        std::ostringstream os;
        os << "load_image_dir: " << errors.size() << " bad record(s):";
        for (const auto& e : errors) os << "\n  " << e;
        throw Error(os.str());
    }
    return split;
}

std::uint64_t synthetic_config_hash(const SyntheticConfig& cfg) {
    std::ostringstream os;
    os << cfg.n_train << '|' << cfg.n_val << '|' << cfg.n_test << '|' << cfg.balance
       << '|' << cfg.noise_octaves << '|' << cfg.fine_noise << '|' << cfg.blob_min
       << '|' << cfg.blob_max << '|' << cfg.radius_min << '|' << cfg.radius_max << '|'
       << cfg.darkness_min << '|' << cfg.darkness_max << '|' << cfg.cluster_spread
       << '|' << cfg.mask_min_fraction << '|' << cfg.mask_max_fraction << '|'
       << cfg.seed;
    return fnv1a(os.str());
}

namespace {

constexpr char kCacheMagic[9] = "PSDATA01";

void write_split(std::ostream& os, const DatasetSplit& s) {
    binio::write_u32(os, static_cast<std::uint32_t>(s.size()));
    for (const auto& p : s.patches) {
        unsigned char label = static_cast<unsigned char>(p.label);
        unsigned char has_mask = p.has_mask() ? 1 : 0;
        binio::write_bytes(os, &label, 1);
        binio::write_bytes(os, &has_mask, 1);
        binio::write_f32_array(os, p.pixels.data.data(), p.pixels.data.size());
        if (has_mask) binio::write_bytes(os, p.mask.data(), p.mask.size());
    }
}

DatasetSplit read_split(std::istream& is) {
    std::uint32_t n = binio::read_u32(is);
    DatasetSplit s;
    s.patches.resize(n);
    for (auto& p : s.patches) {
        unsigned char label, has_mask;
        binio::read_bytes(is, &label, 1);
        binio::read_bytes(is, &has_mask, 1);
        if (label > 1) throw Error("dataset cache: bad label");
        p.label = label;
        p.pixels = Tensor({3, P, P});
        binio::read_f32_array(is, p.pixels.data.data(), p.pixels.data.size());
        if (has_mask) {
            p.mask.resize(std::size_t(P) * P);
            binio::read_bytes(is, p.mask.data(), p.mask.size());
        }
    }
    return s;
}

}  // namespace

void save_dataset_cache(const std::string& path, const Dataset& ds,
                        const SyntheticConfig& cfg) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path);
    binio::write_bytes(f, kCacheMagic, 8);
    binio::write_u64(f, cfg.seed);
    binio::write_u64(f, synthetic_config_hash(cfg));
    write_split(f, ds.train);
    write_split(f, ds.val);
    write_split(f, ds.test);
    if (!f) throw Error("write failed: " + path);
}

Dataset load_dataset_cache(const std::string& path) {
    if (!std::filesystem::exists(path))
        throw MissingPrerequisiteError("dataset cache not found: " + path);
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open: " + path);
    binio::expect_magic(f, kCacheMagic, "dataset cache");
    binio::read_u64(f);  // seed, informational
    binio::read_u64(f);  // config hash, informational
    Dataset ds;
    ds.train = read_split(f);
    ds.val = read_split(f);
    ds.test = read_split(f);
    return ds;
}

}  // namespace protosal
