#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "protosal/checkpoint.hpp"
#include "protosal/config.hpp"
#include "protosal/csv.hpp"
#include "protosal/graph.hpp"
#include "protosal/heatmap_store.hpp"
#include "protosal/image_io.hpp"

using namespace protosal;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("protosal_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

Graph small_graph() {
    Graph g;
    int in = g.add_input({2, 4, 4});
    int c = g.add_conv2d(in, 3, 3, 3, 1, 1, "c");
    int b = g.add_batchnorm2d(c, "bn");
    int r = g.add_relu(b);
    int gp = g.add_global_avg_pool(r);
    g.add_dense(gp, 2, true, "fc");
    return g;
}

}  // namespace

TEST_CASE("checkpoint round-trips bit-exactly") {
    TempDir td;
    Graph g = small_graph();
    init_params(g, Rng::derive(42, 0, 0, 0));
    // move a running stat off its default so buffers are exercised
    g.param("bn.running_mean").value.data = {0.25f, -1.5f, 3.0f};
    save_checkpoint(td.file("m.ckpt"), g);

    Graph h = small_graph();
    init_params(h, Rng::derive(43, 0, 0, 0));
    load_checkpoint(td.file("m.ckpt"), h);
    for (std::size_t i = 0; i < g.params().size(); ++i) {
        CAPTURE(g.params()[i].name);
        CHECK(g.params()[i].value.data == h.params()[i].value.data);
    }

    Tensor x({1, 2, 4, 4});
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] = float(i) * 0.03f - 0.4f;
    CHECK(g.forward(x).data == h.forward(x).data);
}

TEST_CASE("checkpoint refuses a mismatched topology") {
    TempDir td;
    Graph g = small_graph();
    init_params(g, Rng::derive(1, 0, 0, 0));
    save_checkpoint(td.file("m.ckpt"), g);
    Graph other;
    int in = other.add_input({2, 4, 4});
    other.add_conv2d(in, 3, 3, 3, 1, 0, "c");
    CHECK_THROWS_AS(load_checkpoint(td.file("m.ckpt"), other), Error);
}

TEST_CASE("missing checkpoint is a missing prerequisite") {
    Graph g = small_graph();
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/path.ckpt", g),
                    MissingPrerequisiteError);
}

TEST_CASE("config parses sections, comments, and types") {
    Config c = Config::parse_string(
        "# pipeline settings\n"
        "seed = 7\n"
        "\n"
        "[train]\n"
        "lr = 0.001\n"
        "optimizer = sgd\n"
        "use_skip = true\n",
        "inline");
    CHECK(c.get_int("seed") == 7);
    CHECK(c.get_real("train.lr") == doctest::Approx(0.001));
    CHECK(c.get_str("train.optimizer") == "sgd");
    CHECK(c.get_bool("train.use_skip"));
    CHECK(c.get_int("train.missing", 5) == 5);
    CHECK_THROWS_AS(c.get_int("train.optimizer"), ConfigError);
    CHECK_THROWS_AS(c.get_str("nope"), ConfigError);
}

TEST_CASE("config errors carry line numbers") {
    try {
        Config::parse_string("a = 1\nbroken line\n", "cfg.ini");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("cfg.ini:2") != std::string::npos);
    }
    try {
        Config::parse_string("[s]\nk = 1\nk = 2\n", "cfg.ini");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("cfg.ini:3") != std::string::npos);
        CHECK(std::string(e.what()).find("duplicate") != std::string::npos);
    }
}

TEST_CASE("config round-trips losslessly") {
    Config c;
    c.set_int("seed", 123);
    c.set("out", "runs/exp 1");
    c.set_real("train.lr", 0.0012345678901234567);
    c.set_bool("train.skip", false);
    c.set_int("data.n_train", 800);
    std::string text = c.serialize();
    Config back = Config::parse_string(text);
    CHECK(back == c);
    CHECK(back.serialize() == text);
    CHECK(back.get_real("train.lr") == 0.0012345678901234567);
}

TEST_CASE("csv round-trips and rejects ragged rows") {
    TempDir td;
    Csv t;
    t.header = {"image_id", "value"};
    t.rows = {{"0", csv_real(0.5)}, {"1", csv_real(1.0 / 3.0)}};
    t.write_file(td.file("t.csv"));
    Csv back = Csv::read_file(td.file("t.csv"));
    CHECK(back.header == t.header);
    CHECK(back.rows == t.rows);
    CHECK(std::stod(back.rows[1][1]) == 1.0 / 3.0);

    std::ofstream f(td.file("bad.csv"));
    f << "a,b\n1\n";
    f.close();
    CHECK_THROWS_AS(Csv::read_file(td.file("bad.csv")), Error);
}

TEST_CASE("heatmap container round-trips losslessly") {
    TempDir td;
    std::vector<HeatmapRecord> recs(2);
    recs[0].image_id = 3;
    recs[0].source_kind = HeatmapRecord::Source::Method;
    recs[0].source_id = 5;
    recs[0].target_class = 1;
    recs[0].height = 2;
    recs[0].width = 3;
    recs[0].is_absolute = true;
    recs[0].values = {0.1f, -0.25f, 3.5f, 0.f, 1e-20f, -7.f};
    recs[1].image_id = 4;
    recs[1].source_kind = HeatmapRecord::Source::Prototype;
    recs[1].source_id = 2;
    recs[1].target_class = 0;
    recs[1].height = 1;
    recs[1].width = 2;
    recs[1].values = {1.f, 2.f};

    write_heatmaps(td.file("h.bin"), recs);
    auto back = read_heatmaps(td.file("h.bin"));
    REQUIRE(back.size() == 2);
    CHECK(back[0].values == recs[0].values);
    CHECK(back[0].is_absolute == recs[0].is_absolute);
    CHECK(back[0].source_kind == recs[0].source_kind);
    CHECK(back[1].image_id == 4);
    CHECK(back[1].source_kind == HeatmapRecord::Source::Prototype);

    export_heatmaps_json(td.file("h.json"), recs);
    std::ifstream jf(td.file("h.json"));
    std::string text((std::istreambuf_iterator<char>(jf)),
                     std::istreambuf_iterator<char>());
    CHECK(text.find("\"prototype\"") != std::string::npos);
}

TEST_CASE("heatmap container rejects malformed records") {
    TempDir td;
    HeatmapRecord r;
    r.height = 2;
    r.width = 2;
    r.values = {1.f, 2.f, 3.f};  // wrong payload size
    CHECK_THROWS_AS(write_heatmaps(td.file("h.bin"), {r}), Error);
}

TEST_CASE("png round-trips at 8-bit precision") {
    TempDir td;
    Image img(5, 7);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 7; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = float((y * 7 + x) * 3 + c) / 255.f * 2.f - 0.1f;
    write_image(td.file("i.png"), img);
    Image back = read_image(td.file("i.png"));
    REQUIRE(back.height == 5);
    REQUIRE(back.width == 7);
    for (std::size_t i = 0; i < img.rgb.size(); ++i) {
        float clamped = std::min(1.f, std::max(0.f, img.rgb[i]));
        CHECK(std::abs(back.rgb[i] - clamped) <= 0.5f / 255.f + 1e-6f);
    }
}

TEST_CASE("ppm round-trips exactly on byte-aligned values") {
    TempDir td;
    Image img(3, 2);
    for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = float(i * 10) / 255.f;
    write_image(td.file("i.ppm"), img);
    Image back = read_image(td.file("i.ppm"));
    CHECK(back.rgb == img.rgb);
}

TEST_CASE("pixel value 255 maps to exactly 1.0") {
    TempDir td;
    Image img(1, 1);
    img.at(0, 0, 0) = img.at(0, 0, 1) = img.at(0, 0, 2) = 1.f;
    write_image(td.file("w.png"), img);
    Image back = read_image(td.file("w.png"));
    CHECK(back.at(0, 0, 0) == 1.f);
}

TEST_CASE("overlay tints evidence directionally") {
    Image img(1, 2);
    for (auto& v : img.rgb) v = 0.5f;
    std::vector<float> map = {1.f, -1.f};
    Image o = overlay_signed(img, map);
    CHECK(o.at(0, 0, 1) > o.at(0, 0, 0));  // positive leans green
    CHECK(o.at(0, 1, 0) > o.at(0, 1, 1));  // negative leans red
    Image a = overlay_absolute(img, map);
    CHECK(a.at(0, 0, 2) > a.at(0, 0, 0));  // magnitude leans blue
    CHECK(a.at(0, 1, 2) > a.at(0, 1, 1));
}

TEST_CASE("tile grid shapes") {
    std::vector<Image> cells(3, Image(4, 4));
    Image grid = tile_grid(cells, 2);
    CHECK(grid.width == 4 + 2 + 4);
    CHECK(grid.height == 4 + 2 + 4);
}
