#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "protosal/csv.hpp"
#include "protosal/pipeline.hpp"

using namespace protosal;
namespace fs = std::filesystem;

namespace {

// deliberately tiny everything: the point is plumbing, not model quality
const char* kTinyConfig = R"(
[run]
seed = 7
jobs = 2
prototype_count = 2
overlay_images = 1
export_json = true

[data]
n_train = 24
n_val = 8
n_test = 6

[model]
conv_blocks = 2
channels = 8,12

[train]
batch_size = 8
max_epochs = 2
early_stop_patience = 2

[proto]
m = 4
per_class = 2,2

[ppnet]
cycles = 1
phase1_epochs = 1
batch_size = 8
ista_max_iters = 20000
ista_tol = 1e-4

[methods]
smoothgrad_samples = 3
ig_steps = 4
occlusion_window_h = 16
occlusion_window_w = 16
occlusion_stride = 16
gshap_samples = 3
lime_superpixels = 16
lime_samples = 24

[metrics]
auc_thresholds = 64
borji_negative_samples = 20
auc_repeats = 5
)";

RunConfig tiny_rc(const std::string& out_dir) {
    Config f = Config::parse_string(kTinyConfig, "tiny");
    f.set("run.out_dir", out_dir);
    return parse_run_config(f);
}

void run_all(const RunConfig& rc) {
    cmd_gen_data(rc);
    cmd_train(rc);
    cmd_train_ppnet(rc);
    cmd_explain(rc);
    cmd_evaluate(rc);
    cmd_rank(rc);
    cmd_report(rc);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(bool(in));
    return std::string(std::istreambuf_iterator<char>(in), {});
}

int call_cli(std::vector<std::string> args) {
    std::vector<const char*> argv{"protosal"};
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run_cli(int(argv.size()), argv.data());
}

const std::vector<std::string> kArtifacts = {
    "dataset.bin",        "cnn.ckpt",
    "cnn_train_log.csv",  "ppnet.ckpt",
    "ppnet_bank.bin",     "ppnet_train_log.csv",
    "heatmaps_methods.bin", "heatmaps_prototypes.bin",
    "heatmaps_methods.json", "heatmaps_prototypes.json",
    "metrics.csv",        "metrics_missing.csv",
    "ranks.csv",          "rank_contexts.csv",
    "friedman.csv",       "significant_pairs.csv",
    "performance.csv",    "agreement.csv",
    "report.txt",         "overlays/image_000.png",
};

}  // namespace

TEST_CASE("config round-trip is lossless") {
    RunConfig base = tiny_rc("x");
    base.metrics.sauc_mode = SaucMode::CrossImage;
    base.ig_baseline = "center";
    base.methods.gradient_target = TargetScalar::Probability;
    Config once = serialize_run_config(base);
    RunConfig back = parse_run_config(once);
    Config twice = serialize_run_config(back);
    CHECK(once == twice);
    CHECK(once.serialize() == twice.serialize());
    CHECK(back.metrics.sauc_mode == SaucMode::CrossImage);
    CHECK(back.ig_baseline == "center");
    CHECK(back.methods.gradient_target == TargetScalar::Probability);
    CHECK(back.model.channels == std::vector<int>{8, 12});
    CHECK(back.proto.per_class == std::vector<int>{2, 2});
    CHECK(back.synth.seed == 7);
    CHECK(back.train.seed == 7);

    // explicit module seed survives a global-seed change
    Config f = Config::parse_string(kTinyConfig, "tiny");
    f.set_int("data.seed", 42);
    f.set_int("run.seed", 9);
    RunConfig rc = parse_run_config(f);
    CHECK(rc.synth.seed == 42);
    CHECK(rc.train.seed == 9);

    CHECK_THROWS_AS(parse_run_config(Config::parse_string("[run]\nig_baseline = blue\n")),
                    ConfigError);
    CHECK_THROWS_AS(parse_run_config(Config::parse_string("[model]\nchannels = 8,beta\n")),
                    ConfigError);
    CHECK_THROWS_AS(parse_run_config(Config::parse_string("[run]\njobs = 0\n")),
                    ConfigError);
    CHECK_THROWS_AS(
        parse_run_config(Config::parse_string("[run]\nprototype_count = 9\n[proto]\nm = 4\n")),
        ConfigError);
}

TEST_CASE("two full runs produce byte-identical artifacts") {
    fs::remove_all("pipeline_tmp");
    RunConfig a = tiny_rc("pipeline_tmp/out_a");
    RunConfig b = tiny_rc("pipeline_tmp/out_b");
    run_all(a);
    run_all(b);

    for (const std::string& name : kArtifacts) {
        CAPTURE(name);
        fs::path pa = fs::path(a.out_dir) / name;
        fs::path pb = fs::path(b.out_dir) / name;
        REQUIRE(fs::exists(pa));
        REQUIRE(fs::exists(pb));
        CHECK(slurp(pa) == slurp(pb));
    }

    // a stage rerun in place rewrites its outputs bit-for-bit
    std::string metrics_before = slurp(fs::path(a.out_dir) / "metrics.csv");
    std::string missing_before = slurp(fs::path(a.out_dir) / "metrics_missing.csv");
    fs::remove(fs::path(a.out_dir) / "metrics.csv");
    fs::remove(fs::path(a.out_dir) / "metrics_missing.csv");
    cmd_evaluate(a);
    CHECK(slurp(fs::path(a.out_dir) / "metrics.csv") == metrics_before);
    CHECK(slurp(fs::path(a.out_dir) / "metrics_missing.csv") == missing_before);
    std::string ranks_before = slurp(fs::path(a.out_dir) / "ranks.csv");
    cmd_rank(a);
    CHECK(slurp(fs::path(a.out_dir) / "ranks.csv") == ranks_before);
}

TEST_CASE("evaluate covers the full grid and rank tables are coherent") {
    RunConfig a = tiny_rc("pipeline_tmp/out_a");
    REQUIRE(fs::exists(fs::path(a.out_dir) / "metrics.csv"));

    Csv m = Csv::read_file((fs::path(a.out_dir) / "metrics.csv").string());
    Csv miss = Csv::read_file((fs::path(a.out_dir) / "metrics_missing.csv").string());
    const std::size_t expected =
        std::size_t(a.synth.n_test) * 8 * std::size_t(a.prototype_count) * 10;
    CHECK(m.rows.size() + miss.rows.size() == expected);

    // every (image, method, slot, metric) tuple appears exactly once
    std::set<std::vector<std::string>> seen;
    auto key_of = [](const Csv& c, const std::vector<std::string>& row) {
        return std::vector<std::string>{row[std::size_t(c.column("image_id"))],
                                        row[std::size_t(c.column("method_id"))],
                                        row[std::size_t(c.column("prototype_id"))],
                                        row[std::size_t(c.column("metric_id"))]};
    };
    for (const auto& row : m.rows) CHECK(seen.insert(key_of(m, row)).second);
    for (const auto& row : miss.rows) CHECK(seen.insert(key_of(miss, row)).second);
    CHECK(seen.size() == expected);

    for (const auto& row : m.rows) {
        double v = std::stod(row[std::size_t(m.column("value"))]);
        CHECK(std::isfinite(v));
        int mid = std::stoi(row[std::size_t(m.column("metric_id"))]);
        const std::string& o = row[std::size_t(m.column("orientation"))];
        CHECK(o == (mid >= 7 ? "dissimilarity" : "similarity"));
    }

    Csv ranks = Csv::read_file((fs::path(a.out_dir) / "ranks.csv").string());
    REQUIRE(ranks.rows.size() == 8);
    REQUIRE(ranks.header ==
            std::vector<std::string>{"method_id", "method", "proto_0", "proto_1", "overall"});
    for (std::size_t col = 2; col < ranks.header.size(); ++col) {
        double sum = 0.0;
        for (const auto& row : ranks.rows) {
            double r = std::stod(row[col]);
            CHECK(r >= 1.0);
            CHECK(r <= 8.0);
            sum += r;
        }
        CHECK(sum / 8.0 == doctest::Approx(4.5).epsilon(1e-12));
    }

    Csv fr = Csv::read_file((fs::path(a.out_dir) / "friedman.csv").string());
    REQUIRE(fr.rows.size() == 3);  // proto_0, proto_1, overall
    int nc = fr.column("n"), kc = fr.column("k"), pc = fr.column("p_value");
    for (const auto& row : fr.rows) {
        CHECK(std::stoi(row[std::size_t(kc)]) == 8);
        CHECK(std::stoi(row[std::size_t(nc)]) >= 1);
        double p = std::stod(row[std::size_t(pc)]);
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
    }
    CHECK(std::stoi(fr.rows[2][std::size_t(nc)]) ==
          std::stoi(fr.rows[0][std::size_t(nc)]) + std::stoi(fr.rows[1][std::size_t(nc)]));

    Csv perf = Csv::read_file((fs::path(a.out_dir) / "performance.csv").string());
    REQUIRE(perf.rows.size() == 2);
    CHECK(perf.rows[0][0] == "cnn");
    CHECK(perf.rows[1][0] == "protopnet");
    for (const auto& row : perf.rows) {
        double acc = std::stod(row[std::size_t(perf.column("accuracy"))]);
        CHECK(acc >= 0.0);
        CHECK(acc <= 1.0);
    }
}

TEST_CASE("alternate evaluate modes run on existing heatmaps") {
    RunConfig a = tiny_rc("pipeline_tmp/out_a");
    RunConfig c = tiny_rc("pipeline_tmp/out_c");
    REQUIRE(fs::exists(fs::path(a.out_dir) / "heatmaps_methods.bin"));
    fs::create_directories(c.out_dir);
    fs::copy_file(fs::path(a.out_dir) / "heatmaps_methods.bin",
                  fs::path(c.out_dir) / "heatmaps_methods.bin",
                  fs::copy_options::overwrite_existing);
    fs::copy_file(fs::path(a.out_dir) / "heatmaps_prototypes.bin",
                  fs::path(c.out_dir) / "heatmaps_prototypes.bin",
                  fs::copy_options::overwrite_existing);

    c.ig_baseline = "center";
    c.metrics.sauc_mode = SaucMode::CrossImage;
    cmd_evaluate(c);

    auto collect = [](const std::string& dir, int metric) {
        Csv m = Csv::read_file((fs::path(dir) / "metrics.csv").string());
        std::vector<double> out;
        for (const auto& row : m.rows)
            if (std::stoi(row[std::size_t(m.column("metric_id"))]) == metric)
                out.push_back(std::stod(row[std::size_t(m.column("value"))]));
        return out;
    };
    // a different IG baseline must move at least one IG score
    std::vector<double> ig_a = collect(a.out_dir, 4), ig_c = collect(c.out_dir, 4);
    REQUIRE(!ig_a.empty());
    REQUIRE(ig_a.size() == ig_c.size());
    bool moved = false;
    for (std::size_t i = 0; i < ig_a.size(); ++i)
        if (ig_a[i] != ig_c[i]) moved = true;
    CHECK(moved);
    // jAUC ignores both settings
    CHECK(collect(a.out_dir, 0) == collect(c.out_dir, 0));
}

TEST_CASE("stages refuse to run before their inputs exist") {
    RunConfig rc = tiny_rc("pipeline_tmp/out_empty");
    fs::remove_all(rc.out_dir);
    CHECK_THROWS_AS(cmd_train(rc), MissingPrerequisiteError);
    CHECK_THROWS_AS(cmd_train_ppnet(rc), MissingPrerequisiteError);
    CHECK_THROWS_AS(cmd_explain(rc), MissingPrerequisiteError);
    CHECK_THROWS_AS(cmd_evaluate(rc), MissingPrerequisiteError);
    CHECK_THROWS_AS(cmd_rank(rc), MissingPrerequisiteError);
    CHECK_THROWS_AS(cmd_report(rc), MissingPrerequisiteError);
}

TEST_CASE("cli maps outcomes to exit codes") {
    CHECK(call_cli({"--help"}) == 0);
    CHECK(call_cli({"frobnicate"}) == 2);
    CHECK(call_cli({"train", "--out", "pipeline_tmp/out_empty"}) == 3);

    std::ofstream bad("pipeline_tmp/bad.conf");
    bad << "[run]\nig_baseline = sideways\n";
    bad.close();
    CHECK(call_cli({"gen-data", "--config", "pipeline_tmp/bad.conf"}) == 2);
    CHECK(call_cli({"gen-data", "--config", "pipeline_tmp/no_such.conf"}) == 2);

    std::ofstream tiny("pipeline_tmp/tiny.conf");
    tiny << kTinyConfig;
    tiny.close();
    CHECK(call_cli({"gen-data", "--config", "pipeline_tmp/tiny.conf", "--out",
                    "pipeline_tmp/out_cli"}) == 0);
    CHECK(fs::exists("pipeline_tmp/out_cli/dataset.bin"));

    // --seed must change the dataset, matching seeds must reproduce it
    CHECK(call_cli({"gen-data", "--config", "pipeline_tmp/tiny.conf", "--out",
                    "pipeline_tmp/out_cli2", "--seed", "99"}) == 0);
    CHECK(call_cli({"gen-data", "--config", "pipeline_tmp/tiny.conf", "--out",
                    "pipeline_tmp/out_cli3", "--seed", "99"}) == 0);
    CHECK(slurp("pipeline_tmp/out_cli2/dataset.bin") ==
          slurp("pipeline_tmp/out_cli3/dataset.bin"));
    CHECK(slurp("pipeline_tmp/out_cli/dataset.bin") !=
          slurp("pipeline_tmp/out_cli2/dataset.bin"));
}
