#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "protosal/dataset.hpp"
#include "protosal/image_io.hpp"

using namespace protosal;

namespace {

SyntheticConfig tiny_config(std::uint64_t seed = 7) {
    SyntheticConfig cfg;
    cfg.n_train = 24;
    cfg.n_val = 10;
    cfg.n_test = 10;
    cfg.seed = seed;
    return cfg;
}

int count_label(const DatasetSplit& s, int label) {
    return static_cast<int>(std::count_if(s.patches.begin(), s.patches.end(),
                                          [&](const Patch& p) { return p.label == label; }));
}

// mean brightness of the darkest 8x8 window; the planted nuclei cluster
// should drag it down for malignant patches
double darkest_window(const Patch& p) {
    const int P = kPatchSize, w = 8;
    double best = 1e9;
    for (int y = 0; y + w <= P; y += 4)
        for (int x = 0; x + w <= P; x += 4) {
            double s = 0;
            for (int c = 0; c < 3; ++c)
                for (int dy = 0; dy < w; ++dy)
                    for (int dx = 0; dx < w; ++dx)
                        s += p.pixels.data[std::size_t(c) * P * P + (y + dy) * P +
                                           (x + dx)];
            best = std::min(best, s / (3.0 * w * w));
        }
    return best;
}

double rank_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[a] < scores[b];
    });
    double rank_sum = 0;
    int pos = 0, neg = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        double mid = (double(i) + double(j - 1)) / 2.0 + 1.0;
        for (std::size_t t = i; t < j; ++t)
            if (labels[order[t]] == 1) rank_sum += mid;
        i = j;
    }
    for (int l : labels) (l == 1 ? pos : neg)++;
    if (!pos || !neg) return 0.5;
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (double(pos) * neg);
}

}  // namespace

TEST_CASE("class balance is exact by construction") {
    SyntheticConfig cfg = tiny_config();
    cfg.n_train = 20;
    cfg.balance = 0.5;
    Dataset ds = generate_synthetic(cfg);
    CHECK(count_label(ds.train, 1) == 10);
    CHECK(count_label(ds.train, 0) == 10);
    CHECK(count_label(ds.val, 1) == 5);
    CHECK(count_label(ds.test, 1) == 5);
}

TEST_CASE("same seed reproduces the dataset bitwise") {
    Dataset a = generate_synthetic(tiny_config(3));
    Dataset b = generate_synthetic(tiny_config(3));
    REQUIRE(a.train.size() == b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train.patches[i].pixels.data == b.train.patches[i].pixels.data);
        CHECK(a.train.patches[i].mask == b.train.patches[i].mask);
        CHECK(a.train.patches[i].label == b.train.patches[i].label);
    }
    Dataset c = generate_synthetic(tiny_config(4));
    CHECK(a.train.patches[0].pixels.data != c.train.patches[0].pixels.data);
}

TEST_CASE("pixels stay in range and masks mark only malignant patches") {
    Dataset ds = generate_synthetic(tiny_config());
    for (const auto* split : {&ds.train, &ds.val, &ds.test})
        for (const auto& p : split->patches) {
            CHECK(p.has_mask() == (p.label == 1));
            float lo = 1.f, hi = 0.f;
            for (float v : p.pixels.data) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            CHECK(lo >= 0.f);
            CHECK(hi <= 1.f);
        }
}

TEST_CASE("mask area fraction respects configured bounds") {
    SyntheticConfig cfg = tiny_config();
    Dataset ds = generate_synthetic(cfg);
    const double cells = double(kPatchSize) * kPatchSize;
    for (const auto& p : ds.train.patches) {
        if (!p.has_mask()) continue;
        double area = std::accumulate(p.mask.begin(), p.mask.end(), 0.0) / cells;
        CHECK(area >= cfg.mask_min_fraction);
        CHECK(area <= cfg.mask_max_fraction);
    }
}

TEST_CASE("a trivial darkness detector separates the classes") {
    SyntheticConfig cfg = tiny_config(11);
    cfg.n_train = 100;
    Dataset ds = generate_synthetic(cfg);
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& p : ds.train.patches) {
        scores.push_back(-darkest_window(p));  // darker window, higher score
        labels.push_back(p.label);
    }
    CHECK(rank_auc(scores, labels) >= 0.95);
}

TEST_CASE("augment flips mask and pixels together") {
    Dataset ds = generate_synthetic(tiny_config(5));
    const Patch* mal = nullptr;
    for (const auto& p : ds.train.patches)
        if (p.label == 1) {
            mal = &p;
            break;
        }
    REQUIRE(mal != nullptr);
    AugmentConfig cfg;
    cfg.hflip_prob = 1.0;
    cfg.vflip_prob = 0.0;
    cfg.brightness_delta = 0.0;
    Rng rng(1);
    Patch flipped = augment(*mal, cfg, rng);
    Rng rng2(1);
    Patch back = augment(flipped, cfg, rng2);
    CHECK(back.pixels.data == mal->pixels.data);
    CHECK(back.mask == mal->mask);
    CHECK(flipped.pixels.data != mal->pixels.data);
    const int P = kPatchSize;
    for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x)
            CHECK(flipped.mask[y * P + x] == mal->mask[y * P + (P - 1 - x)]);
}

TEST_CASE("augment brightness clamps to the pixel range") {
    Patch p;
    p.pixels = Tensor({3, kPatchSize, kPatchSize});
    p.pixels.fill(0.95f);
    AugmentConfig cfg;
    cfg.hflip_prob = 0.0;
    cfg.vflip_prob = 0.0;
    cfg.brightness_delta = 0.1;
    for (int tries = 0; tries < 50; ++tries) {
        Rng rng(tries);
        Patch out = augment(p, cfg, rng);
        for (float v : out.pixels.data) {
            CHECK(v <= 1.f);
            CHECK(v >= 0.85f - 1e-6f);
        }
    }
}

TEST_CASE("augment with zero deltas is the identity") {
    Dataset ds = generate_synthetic(tiny_config(6));
    AugmentConfig cfg;
    cfg.hflip_prob = 0.0;
    cfg.vflip_prob = 0.0;
    cfg.brightness_delta = 0.0;
    Rng rng(9);
    Patch out = augment(ds.train.patches[0], cfg, rng);
    CHECK(out.pixels.data == ds.train.patches[0].pixels.data);
}

TEST_CASE("dataset cache round-trips") {
    namespace fs = std::filesystem;
    SyntheticConfig cfg = tiny_config(8);
    cfg.n_train = 6;
    cfg.n_val = 3;
    cfg.n_test = 3;
    Dataset ds = generate_synthetic(cfg);
    fs::path tmp = fs::temp_directory_path() / "protosal_cache_test.bin";
    save_dataset_cache(tmp.string(), ds, cfg);
    Dataset back = load_dataset_cache(tmp.string());
    fs::remove(tmp);
    REQUIRE(back.train.size() == ds.train.size());
    REQUIRE(back.val.size() == ds.val.size());
    REQUIRE(back.test.size() == ds.test.size());
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        CHECK(back.train.patches[i].pixels.data == ds.train.patches[i].pixels.data);
        CHECK(back.train.patches[i].label == ds.train.patches[i].label);
        CHECK(back.train.patches[i].mask == ds.train.patches[i].mask);
    }
}

TEST_CASE("load_image_dir reads labeled images in file order") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "protosal_imgdir_test";
    fs::create_directories(dir);
    Dataset ds = generate_synthetic(tiny_config(10));
    auto to_image = [](const Patch& p) {
        Image img(kPatchSize, kPatchSize);
        const int P = kPatchSize;
        for (int y = 0; y < P; ++y)
            for (int x = 0; x < P; ++x)
                for (int c = 0; c < 3; ++c)
                    img.at(y, x, c) = p.pixels.data[std::size_t(c) * P * P + y * P + x];
        return img;
    };
    write_image((dir / "a.png").string(), to_image(ds.train.patches[0]));
    write_image((dir / "b.png").string(), to_image(ds.train.patches[1]));
    {
        std::ofstream f(dir / "labels.csv");
        f << "filename,label\nb.png,1\na.png,0\n";
    }
    DatasetSplit split = load_image_dir(dir.string(), (dir / "labels.csv").string());
    REQUIRE(split.size() == 2);
    CHECK(split.patches[0].label == 1);  // labels-file order, not directory order
    CHECK(split.patches[1].label == 0);
    CHECK_FALSE(split.patches[0].has_mask());

    {
        std::ofstream f(dir / "labels.csv");
        f << "filename,label\nmissing.png,1\na.png,2\n";
    }
    try {
        load_image_dir(dir.string(), (dir / "labels.csv").string());
        FAIL("expected Error");
    } catch (const Error& e) {
        std::string msg = e.what();
        CHECK(msg.find("missing.png") != std::string::npos);
        CHECK(msg.find("a.png") != std::string::npos);
    }
    fs::remove_all(dir);
}
