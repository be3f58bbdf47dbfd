#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "protosal/classifier.hpp"
#include "protosal/optimizer.hpp"

using namespace protosal;

namespace {

// Constant-brightness tiles: benign dark, malignant bright. Separable by any
// monotone pooling of the first conv layer.
std::vector<Patch> toy_patches(int n, std::uint64_t seed) {
    Rng rng = Rng::derive(seed, 77, 0, 0);
    std::vector<Patch> out;
    out.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i) {
        Patch p;
        p.label = i % 2;
        double base = p.label ? rng.uniform(0.6, 0.8) : rng.uniform(0.2, 0.4);
        p.pixels = Tensor({3, kPatchSize, kPatchSize});
        for (auto& v : p.pixels.data)
            v = static_cast<float>(base + rng.uniform(-0.02, 0.02));
        out.push_back(std::move(p));
    }
    return out;
}

ModelConfig tiny_model() {
    ModelConfig mc;
    mc.conv_blocks = 1;
    mc.channels = {4};
    mc.skip_connections = false;
    return mc;
}

TrainConfig toy_train() {
    TrainConfig tc;
    tc.optimizer = "sgd";
    tc.lr = 0.01;
    tc.batch_size = 16;
    tc.max_epochs = 30;
    tc.early_stop_patience = 6;
    tc.lr_plateau_patience = 3;
    tc.augment = false;
    tc.seed = 5;
    return tc;
}

}  // namespace

TEST_CASE("plateau tracker: improvement must exceed min_delta") {
    PlateauTracker t{0.25};
    CHECK(t.update(1.0));
    CHECK(t.since == 0);
    CHECK(!t.update(1.25));  // exactly best + min_delta is not an improvement
    CHECK(t.since == 1);
    CHECK(!t.update(1.2));
    CHECK(t.since == 2);
    CHECK(t.update(1.3));
    CHECK(t.since == 0);
    CHECK(t.best == 1.3);
}

TEST_CASE("optimizer: sgd momentum hand sequence") {
    Graph g;
    int x = g.add_input({1});
    g.add_dense(x, 1, false, "w");
    auto& p = g.param("w.weight");
    p.value.data[0] = 1.0f;
    p.value.ensure_grad();

    Optimizer opt = Optimizer::sgd(0.1, 0.9);
    // constant gradient 1: v_t = 1 + 0.9 v_{t-1}, w_t = w_{t-1} - 0.1 v_t
    double v = 0.0, w = 1.0;
    for (int t = 0; t < 4; ++t) {
        p.value.grad.assign(1, 1.0f);
        opt.step(g);
        v = 1.0 + 0.9 * v;
        w -= 0.1 * v;
        CHECK(p.value.data[0] == doctest::Approx(w).epsilon(1e-6));
    }
}

TEST_CASE("optimizer: adam with constant gradient steps by ~lr") {
    Graph g;
    int x = g.add_input({1});
    g.add_dense(x, 1, false, "w");
    auto& p = g.param("w.weight");
    p.value.data[0] = 0.5f;
    p.value.ensure_grad();

    Optimizer opt = Optimizer::adam(0.1);
    for (int t = 0; t < 3; ++t) {
        p.value.grad.assign(1, 1.0f);
        opt.step(g);
    }
    // bias-corrected m-hat = 1 and v-hat = 1 at every step for g == 1
    CHECK(p.value.data[0] == doctest::Approx(0.5 - 3 * 0.1).epsilon(1e-5));
}

TEST_CASE("optimizer: frozen filter leaves parameters untouched") {
    Graph g;
    int x = g.add_input({2});
    int h = g.add_dense(x, 2, true, "a");
    g.add_dense(h, 2, true, "b");
    for (auto& p : g.params()) {
        p.value.ensure_grad();
        p.value.grad.assign(p.value.data.size(), 1.0f);
    }
    auto before_a = g.param("a.weight").value.data;
    auto before_b = g.param("b.weight").value.data;
    Optimizer opt = Optimizer::sgd(0.1, 0.0);
    opt.set_param_filter({"b.weight", "b.bias"});
    opt.step(g);
    CHECK(g.param("a.weight").value.data == before_a);
    CHECK(g.param("b.weight").value.data != before_b);
}

TEST_CASE("backbone: rejects configs that collapse below 3x3") {
    Graph g;
    ModelConfig mc;
    mc.conv_blocks = 6;
    mc.channels = {4, 4, 4, 4, 4, 4};
    CHECK_THROWS_AS(build_backbone(g, mc), ConfigError);

    Graph g2;
    ModelConfig mc2;
    mc2.conv_blocks = 2;
    mc2.channels = {4};  // length mismatch
    CHECK_THROWS_AS(build_backbone(g2, mc2), ConfigError);
}

TEST_CASE("classifier: shapes and probability simplex") {
    Classifier c = make_classifier(tiny_model(), 3);
    auto data = toy_patches(5, 9);
    auto probs = predict(c, data, 2);
    REQUIRE(probs.size() == 5);
    for (const auto& row : probs) {
        CHECK(row[0] >= 0.0);
        CHECK(row[1] >= 0.0);
        CHECK(row[0] + row[1] == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK(c.g.activation(c.logits_node).shape ==
          std::vector<std::int64_t>{1, 2});  // last batch had one leftover sample
    CHECK(c.g.activation(c.loss_node).shape == std::vector<std::int64_t>{1});
}

TEST_CASE("assemble_batch: copies pixels and labels in order") {
    auto data = toy_patches(4, 11);
    std::vector<int> idx = {2, 0, 3};
    std::vector<int> labels;
    Tensor b = assemble_batch(data, idx, &labels, false, {}, 0, 0);
    CHECK(b.shape == std::vector<std::int64_t>{3, 3, kPatchSize, kPatchSize});
    CHECK(labels == std::vector<int>{0, 0, 1});
    const std::size_t plane = std::size_t(3) * kPatchSize * kPatchSize;
    for (std::size_t i = 0; i < idx.size(); ++i)
        CHECK(std::memcmp(b.data.data() + i * plane,
                          data[std::size_t(idx[i])].pixels.data.data(),
                          plane * sizeof(float)) == 0);

    std::vector<int> l2;
    Tensor a1 = assemble_batch(data, idx, &l2, true, AugmentConfig{}, 21, 3);
    Tensor a2 = assemble_batch(data, idx, &l2, true, AugmentConfig{}, 21, 3);
    CHECK(a1.data == a2.data);  // augmentation streams are per (seed, epoch, index)
}

TEST_CASE("training: separable toy reaches perfect validation accuracy") {
    auto train = toy_patches(40, 1);
    auto val = toy_patches(20, 2);
    Classifier c = make_classifier(tiny_model(), 3);
    TrainResult r = train_classifier(c, train, val, toy_train());
    CHECK(r.best_val_accuracy == 1.0);
    // parameters were restored to the best epoch
    CHECK(accuracy(c, val) == r.best_val_accuracy);
    REQUIRE(!r.log.empty());
    CHECK(r.log.front().epoch == 1);
    CHECK(r.log.front().lr == 0.01);
    for (const auto& e : r.log) CHECK(std::isfinite(e.train_loss));
}

TEST_CASE("training: lr drops by the plateau factor and early stop fires") {
    auto train = toy_patches(40, 1);
    auto val = toy_patches(20, 2);
    Classifier c = make_classifier(tiny_model(), 3);
    TrainConfig tc = toy_train();
    tc.max_epochs = 60;
    tc.lr_plateau_patience = 2;
    tc.early_stop_patience = 7;
    TrainResult r = train_classifier(c, train, val, tc);

    REQUIRE(r.best_val_accuracy == 1.0);
    REQUIRE(r.log.size() < std::size_t(tc.max_epochs));
    // halt exactly at best epoch + patience
    CHECK(r.log.size() == std::size_t(r.best_epoch + tc.early_stop_patience));

    // after the best epoch: two stale epochs at the old rate, then x0.2 steps
    std::size_t b = std::size_t(r.best_epoch);  // 1-based == index of epoch B+1
    REQUIRE(r.log.size() >= b + 5);
    double lr0 = r.log[b - 1].lr;
    CHECK(r.log[b].lr == doctest::Approx(lr0));
    CHECK(r.log[b + 1].lr == doctest::Approx(lr0));
    CHECK(r.log[b + 2].lr == doctest::Approx(0.2 * lr0));
    CHECK(r.log[b + 3].lr == doctest::Approx(0.2 * lr0));
    CHECK(r.log[b + 4].lr == doctest::Approx(0.04 * lr0));
}

TEST_CASE("training: bitwise deterministic given the seed") {
    auto train = toy_patches(24, 4);
    auto val = toy_patches(12, 5);
    TrainConfig tc = toy_train();
    tc.max_epochs = 4;
    tc.augment = true;

    Classifier c1 = make_classifier(tiny_model(), 3);
    Classifier c2 = make_classifier(tiny_model(), 3);
    TrainResult r1 = train_classifier(c1, train, val, tc);
    TrainResult r2 = train_classifier(c2, train, val, tc);

    REQUIRE(r1.log.size() == r2.log.size());
    for (std::size_t i = 0; i < r1.log.size(); ++i) {
        CHECK(r1.log[i].train_loss == r2.log[i].train_loss);
        CHECK(r1.log[i].val_accuracy == r2.log[i].val_accuracy);
        CHECK(r1.log[i].lr == r2.log[i].lr);
    }
    for (std::size_t i = 0; i < c1.g.params().size(); ++i)
        CHECK(c1.g.params()[i].value.data == c2.g.params()[i].value.data);
}

TEST_CASE("training: non-finite loss aborts with the epoch index") {
    auto train = toy_patches(24, 4);
    auto val = toy_patches(12, 5);
    Classifier c = make_classifier(tiny_model(), 3);
    TrainConfig tc = toy_train();
    // batch norm keeps the net scale-stable, so a merely-large rate only
    // thrashes; overflowing the head to inf takes steps near float-max
    tc.lr = 1e38;
    tc.max_epochs = 8;
    CHECK_THROWS_WITH_AS(train_classifier(c, train, val, tc),
                         doctest::Contains("epoch"), NumericError);
}

TEST_CASE("grid search: diverging rate loses, ties prefer lower lr") {
    auto train = toy_patches(32, 6);
    auto val = toy_patches(16, 7);
    ModelConfig mc = tiny_model();
    TrainConfig base = toy_train();
    base.max_epochs = 12;
    base.early_stop_patience = 3;

    GridResult gr = grid_search(mc, base, {{"sgd", 1e38}, {"sgd", 1e-2}}, train, val);
    REQUIRE(gr.outcomes.size() == 2);
    CHECK(gr.outcomes[0].diverged);
    CHECK(gr.outcomes[0].best_val_accuracy == -1.0);
    CHECK(!gr.outcomes[1].diverged);
    CHECK(gr.best.optimizer == "sgd");
    CHECK(gr.best.lr == 1e-2);

    // both rates should saturate the toy set; the tie goes to the lower lr
    GridResult tie = grid_search(mc, base, {{"sgd", 1e-2}, {"sgd", 5e-3}}, train, val);
    if (tie.outcomes[0].best_val_accuracy == tie.outcomes[1].best_val_accuracy)
        CHECK(tie.best.lr == 5e-3);

    GridResult opt_tie =
        grid_search(mc, base, {{"sgd", 1e-2}, {"adam", 1e-2}}, train, val);
    if (opt_tie.outcomes[0].best_val_accuracy == opt_tie.outcomes[1].best_val_accuracy)
        CHECK(opt_tie.best.optimizer == "adam");
}

TEST_CASE("default grid spans both optimizers and three rates") {
    auto g = default_grid();
    REQUIRE(g.size() == 6);
    CHECK(g[0].optimizer == "sgd");
    CHECK(g[3].optimizer == "adam");
    CHECK(g[1].lr == 1e-3);
}
