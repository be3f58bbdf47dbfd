#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "protosal/image_io.hpp"
#include "protosal/protopnet.hpp"

using namespace protosal;

namespace {

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

PrototypeLayerConfig tiny_protos() {
    PrototypeLayerConfig pc;
    pc.m = 4;
    return pc;
}

// exhaustive double-min oracle over a {B,m,oh,ow} distance tensor
double brute_min_cost(const Tensor64& dist, const std::vector<int>& labels,
                      const std::vector<int>& pc, bool own) {
    std::int64_t B = dist.dim(0), M = dist.dim(1), HW = dist.dim(2) * dist.dim(3);
    double total = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        double best = std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < M; ++j) {
            if ((pc[std::size_t(j)] == labels[std::size_t(b)]) != own) continue;
            for (std::int64_t i = 0; i < HW; ++i)
                best = std::min(best, dist.data[std::size_t((b * M + j) * HW + i)]);
        }
        total += best;
    }
    return total / double(B);
}

}  // namespace

TEST_CASE("cluster cost: inner minimum over cells") {
    // one image, one own-class prototype, cell distances {4, 9}
    Tensor64 dist({1, 1, 1, 2}, {4.0, 9.0});
    CHECK(cluster_cost(dist, {0}, {0}) == 4.0);
    // a coincident patch gives zero
    Tensor64 zero({1, 1, 1, 2}, {0.0, 9.0});
    CHECK(cluster_cost(zero, {0}, {0}) == 0.0);
}

TEST_CASE("cluster/separation: brute-force agreement and seed mass") {
    Rng rng = Rng::derive(42, 1, 2, 3);
    Tensor64 dist({8, 4, 3, 3});
    for (auto& v : dist.data) v = rng.uniform(0.0, 10.0);
    std::vector<int> labels = {0, 1, 0, 1, 1, 0, 0, 1};
    std::vector<int> pc = {0, 0, 1, 1};

    Tensor64 seed(dist.shape);
    double clst = cluster_cost(dist, labels, pc, &seed, 0.8);
    CHECK(clst == doctest::Approx(brute_min_cost(dist, labels, pc, true)).epsilon(1e-15));
    double ssum = 0.0;
    for (double v : seed.data) ssum += v;
    CHECK(ssum == doctest::Approx(0.8).epsilon(1e-12));  // 8 cells at 0.8/8 each

    Tensor64 seed2(dist.shape);
    double sep = separation_cost(dist, labels, pc, &seed2, 0.08);
    CHECK(sep ==
          doctest::Approx(-brute_min_cost(dist, labels, pc, false)).epsilon(1e-15));
    CHECK(sep <= 0.0);
    double s2 = 0.0;
    for (double v : seed2.data) s2 += v;
    CHECK(s2 == doctest::Approx(-0.08).epsilon(1e-12));
}

TEST_CASE("cluster/separation: missing prototype class is rejected") {
    Tensor64 dist({1, 2, 1, 1}, {1.0, 2.0});
    CHECK_THROWS_AS(cluster_cost(dist, {0}, {1, 1}), ConfigError);
    CHECK_THROWS_AS(separation_cost(dist, {0}, {0, 0}), ConfigError);
    // valid cases for contrast
    CHECK(cluster_cost(dist, {1}, {1, 1}) == 1.0);
    CHECK(separation_cost(dist, {1}, {0, 0}) == -1.0);
}

TEST_CASE("cluster gradient: seeded backward matches finite differences") {
    Graph64 g;
    int x = g.add_input({3, 4, 4});
    int dn = g.add_l2_distance_map(x, 2, 1, 1, "p");
    Rng rng = Rng::derive(7, 0, 0, 0);
    auto& P = g.param("p");
    for (auto& v : P.value.data) v = rng.uniform(0.0, 1.0);
    Tensor64 in({2, 3, 4, 4});
    for (auto& v : in.data) v = rng.uniform(0.0, 1.0);
    std::vector<int> labels = {0, 1};
    std::vector<int> pc = {0, 1};

    g.forward(in, false);
    Tensor64 seed(g.activation(dn).shape);
    cluster_cost(g.activation(dn), labels, pc, &seed, 1.0);
    g.zero_grad();
    g.backward_from({{dn, seed}});
    Tensor64 analytic = g.input_gradient();

    const double h = 1e-6;
    for (std::size_t i = 0; i < in.data.size(); i += 7) {  // stride keeps it quick
        Tensor64 up = in, dn_ = in;
        up.data[i] += h;
        dn_.data[i] -= h;
        g.forward(up, false);
        double f1 = cluster_cost(g.activation(dn), labels, pc);
        g.forward(dn_, false);
        double f0 = cluster_cost(g.activation(dn), labels, pc);
        double fd = (f1 - f0) / (2 * h);
        CHECK(analytic.data[i] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
    }
}

TEST_CASE("make_protopnet: wiring, allocation, and last-layer convention") {
    ProtoPNet net = make_protopnet(tiny_model(), tiny_protos(), 11);
    CHECK(net.proto_class == std::vector<int>{0, 0, 1, 1});
    CHECK(net.latent_d == 4);
    CHECK(net.latent_h == 48);
    const auto& W = net.g.param("last_layer.weight").value;
    REQUIRE(W.shape == std::vector<std::int64_t>{2, 4});
    CHECK(W.data == std::vector<float>{1.f, 1.f, -0.5f, -0.5f, -0.5f, -0.5f, 1.f, 1.f});

    PrototypeLayerConfig bad = tiny_protos();
    bad.per_class = {4, 0};
    CHECK_THROWS_AS(make_protopnet(tiny_model(), bad, 11), ConfigError);
}

TEST_CASE("predict: softmax of last-layer times scores, simplex") {
    ProtoPNet net = make_protopnet(tiny_model(), tiny_protos(), 11);
    auto data = toy_patches(5, 3);
    auto pred = predict_protopnet(net, data, 2);
    REQUIRE(pred.probs.size() == 5);
    const auto& W = net.g.param("last_layer.weight").value;
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(pred.probs[i][0] + pred.probs[i][1] == doctest::Approx(1.0).epsilon(1e-6));
        double z0 = 0, z1 = 0;
        for (int j = 0; j < 4; ++j) {
            double s = pred.scores.data[i * 4 + std::size_t(j)];
            z0 += W.data[std::size_t(j)] * s;
            z1 += W.data[4 + std::size_t(j)] * s;
        }
        double p1 = 1.0 / (1.0 + std::exp(z0 - z1));
        CHECK(pred.probs[i][1] == doctest::Approx(p1).epsilon(1e-4));
    }
}

TEST_CASE("last-layer math: zero scores tie, one-hot favors the wired class") {
    // logits = W s with the +1/-0.5 convention
    std::vector<double> W = {1, 1, -0.5, -0.5, -0.5, -0.5, 1, 1};
    auto prob1 = [&](const std::vector<double>& s) {
        double z0 = 0, z1 = 0;
        for (int j = 0; j < 4; ++j) {
            z0 += W[std::size_t(j)] * s[std::size_t(j)];
            z1 += W[4 + std::size_t(j)] * s[std::size_t(j)];
        }
        return 1.0 / (1.0 + std::exp(z0 - z1));
    };
    CHECK(prob1({0, 0, 0, 0}) == 0.5);
    CHECK(prob1({0, 0, 5, 0}) > 0.5);  // class-1 prototype activated
    CHECK(prob1({5, 0, 0, 0}) < 0.5);
}

TEST_CASE("projection: exact zero, recorded sources, idempotence") {
    ProtoPNet net = make_protopnet(tiny_model(), tiny_protos(), 11);
    auto train = toy_patches(12, 9);
    project_prototypes(net, train, 4);

    auto& P = net.g.param("prototypes").value;
    std::vector<float> first = P.data;
    auto sources = net.sources;
    for (const auto& s : net.sources) CHECK(s.valid);

    // the distance map at each recorded source cell is exactly zero
    for (int j = 0; j < 4; ++j) {
        const ProtoSource& s = net.sources[std::size_t(j)];
        CHECK(train[std::size_t(s.image_id)].label == net.proto_class[std::size_t(j)]);
        Tensor batch({1, 3, kPatchSize, kPatchSize},
                     train[std::size_t(s.image_id)].pixels.data);
        net.g.set_labels({0});
        net.g.forward(batch, false);
        const Tensor& dist = net.g.activation(net.dist_node);
        std::int64_t hw = std::int64_t(net.latent_h) * net.latent_w;
        float at = dist.data[std::size_t(j * hw + s.h * net.latent_w + s.w)];
        CHECK(at == 0.0f);
        // and it is the minimum over that image's cells
        float mn = std::numeric_limits<float>::infinity();
        for (std::int64_t i = 0; i < hw; ++i)
            mn = std::min(mn, dist.data[std::size_t(j * hw + i)]);
        CHECK(mn == 0.0f);
    }

    project_prototypes(net, train, 4);
    CHECK(P.data == first);
    for (int j = 0; j < 4; ++j) {
        CHECK(net.sources[std::size_t(j)].image_id == sources[std::size_t(j)].image_id);
        CHECK(net.sources[std::size_t(j)].h == sources[std::size_t(j)].h);
        CHECK(net.sources[std::size_t(j)].w == sources[std::size_t(j)].w);
        CHECK(net.sources[std::size_t(j)].distance == 0.0);
    }

    auto one_class = toy_patches(6, 9);
    for (auto& p : one_class) p.label = 0;
    CHECK_THROWS_AS(project_prototypes(net, one_class, 4), ConfigError);
}

TEST_CASE("last layer: convex fit, shrinkage, restart agreement") {
    // class-0 images activate prototypes {0,1}; a flipped label every 5th
    // row keeps the logistic minimum finite
    Rng rng = Rng::derive(31, 0, 0, 0);
    const int n = 40, m = 4;
    std::vector<double> scores(std::size_t(n) * m);
    std::vector<int> labels(static_cast<std::size_t>(n));
    std::vector<int> pc = {0, 0, 1, 1};
    for (int i = 0; i < n; ++i) {
        labels[std::size_t(i)] = i % 5 == 0 ? 1 - i % 2 : i % 2;
        for (int j = 0; j < m; ++j)
            scores[std::size_t(i) * m + j] =
                (pc[std::size_t(j)] == (i % 2) ? 3.0 : 0.3) + rng.uniform(0.0, 0.2);
    }
    std::vector<double> w0 = {1, 1, -0.5, -0.5, -0.5, -0.5, 1, 1};

    auto off_mass = [&](const std::vector<double>& W) {
        double s = 0;
        for (int c = 0; c < 2; ++c)
            for (int j = 0; j < m; ++j)
                if (pc[std::size_t(j)] != c) s += std::abs(W[std::size_t(c) * m + j]);
        return s;
    };

    LastLayerFit plain = fit_last_layer(scores, n, m, labels, pc, 0.0, w0, 20000, 1e-10);
    CHECK(plain.converged);
    CHECK(plain.grad_norm < 1e-5);  // stationary point of the smooth objective

    LastLayerFit sparse = fit_last_layer(scores, n, m, labels, pc, 0.5, w0, 20000, 1e-10);
    CHECK(sparse.converged);
    CHECK(off_mass(sparse.weights) < 1e-8);  // large penalty kills off-class weights

    double prev = std::numeric_limits<double>::infinity();
    for (double sw : {0.0, 0.01, 0.1, 0.5}) {
        LastLayerFit f = fit_last_layer(scores, n, m, labels, pc, sw, w0, 20000, 1e-10);
        CHECK(off_mass(f.weights) <= prev + 1e-9);
        prev = off_mass(f.weights);
    }

    // convexity: 10 random restarts land on the same objective
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int r = 0; r < 10; ++r) {
        Rng rr = Rng::derive(100, std::uint64_t(r), 0, 0);
        std::vector<double> w(std::size_t(2) * m);
        for (auto& v : w) v = rr.uniform(-1.0, 1.0);
        LastLayerFit f = fit_last_layer(scores, n, m, labels, pc, 0.05, w, 50000, 1e-11);
        CHECK(f.converged);
        lo = std::min(lo, f.objective);
        hi = std::max(hi, f.objective);
    }
    CHECK(hi - lo < 1e-4);

    LastLayerFit stuck = fit_last_layer(scores, n, m, labels, pc, 0.05, w0, 1, 1e-12);
    CHECK(!stuck.converged);
}

TEST_CASE("training: three phases, component log, cluster cost falls") {
    auto train = toy_patches(24, 1);
    auto val = toy_patches(12, 2);
    ProtoPNet net = make_protopnet(tiny_model(), tiny_protos(), 11);
    LossWeights lw;
    PPNetSchedule sched;
    sched.cycles = 2;
    sched.phase1_epochs = 3;
    sched.batch_size = 12;
    sched.augment = false;
    sched.seed = 5;
    std::vector<float> frozen = net.g.param("last_layer.weight").value.data;

    PPNetTrainResult r = train_protopnet(net, train, val, lw, sched);
    REQUIRE(r.log.size() == std::size_t(2 * (3 + 2)));
    for (std::size_t i = 0; i < r.log.size(); ++i) {
        const auto& row = r.log[i];
        CHECK(row.loss ==
              doctest::Approx(joint_loss(row.ce, row.clst, row.sep, lw)).epsilon(1e-9));
        CHECK(row.clst >= 0.0);
        CHECK(row.sep <= 0.0);
    }
    CHECK(r.log[0].phase == 1);
    CHECK(r.log[3].phase == 2);
    CHECK(r.log[4].phase == 3);

    // the phase-1 descent drives the cluster term down within the first cycle
    CHECK(r.log[3].clst < r.log[0].clst);
    // the last layer stayed frozen through phase 1 and moved only in phase 3
    CHECK(net.g.param("last_layer.weight").value.data != frozen);
    for (const auto& s : net.sources) CHECK(s.valid);

    double acc = ppnet_accuracy(net, val, 12);
    CHECK(acc == r.final_val_accuracy);
    CHECK(acc >= 0.9);  // separable toy set

    LossWeights bad;
    bad.l1 = 0.0;
    CHECK_THROWS_AS(train_protopnet(net, train, val, bad, sched), ConfigError);
}

TEST_CASE("attributions: ranked by |weight|, non-negative, argmax consistent") {
    auto train = toy_patches(16, 1);
    auto val = toy_patches(8, 2);
    ProtoPNet net = make_protopnet(tiny_model(), tiny_protos(), 11);
    PPNetSchedule sched;
    sched.cycles = 1;
    sched.phase1_epochs = 2;
    sched.batch_size = 8;
    sched.augment = false;
    train_protopnet(net, train, val, LossWeights{}, sched);

    auto atts = prototype_attributions(net, val[0], 3);
    REQUIRE(atts.size() == 3);
    for (std::size_t i = 1; i < atts.size(); ++i)
        CHECK(std::abs(atts[i - 1].weight_to_pred) >=
              std::abs(atts[i].weight_to_pred));
    for (const auto& a : atts) {
        CHECK(a.raw.shape == std::vector<std::int64_t>{48, 48});
        CHECK(a.upsampled.shape ==
              std::vector<std::int64_t>{kPatchSize, kPatchSize});
        for (float v : a.upsampled.data) CHECK(v >= 0.0f);
        // interpolation stays inside the raw range
        float rlo = *std::min_element(a.raw.data.begin(), a.raw.data.end());
        float rhi = *std::max_element(a.raw.data.begin(), a.raw.data.end());
        for (float v : a.upsampled.data) {
            CHECK(v >= rlo - 1e-6f);
            CHECK(v <= rhi + 1e-6f);
        }
    }
}

TEST_CASE("upsampling: unique peak maps back into the argmax cell") {
    Rng rng = Rng::derive(3, 1, 4, 1);
    const int h = 5, w = 7, H = 96, W = 96;
    std::vector<float> raw(std::size_t(h) * w);
    for (auto& v : raw) v = static_cast<float>(rng.uniform(0.0, 0.5));
    raw[2 * w + 3] = 4.0f;
    auto up = resize_plane_bilinear(raw, h, w, H, W);
    std::size_t at =
        std::size_t(std::max_element(up.begin(), up.end()) - up.begin());
    double sy = double(H - 1) / (h - 1), sx = double(W - 1) / (w - 1);
    CHECK(std::abs(double(at / std::size_t(W)) / sy - 2.0) <= 0.5);
    CHECK(std::abs(double(at % std::size_t(W)) / sx - 3.0) <= 0.5);

    // a constant grid upsamples to a constant map
    std::vector<float> flat(std::size_t(h) * w, 0.7f);
    for (float v : resize_plane_bilinear(flat, h, w, H, W))
        CHECK(v == doctest::Approx(0.7f));
}

TEST_CASE("prototype bank: round trip, validation, missing file") {
    auto train = toy_patches(10, 1);
    ProtoPNet net = make_protopnet(tiny_model(), tiny_protos(), 11);
    project_prototypes(net, train, 4);

    auto path = (std::filesystem::temp_directory_path() / "protosal_bank.bin").string();
    save_prototype_bank(path, net);

    ProtoPNet other = make_protopnet(tiny_model(), tiny_protos(), 77);
    load_prototype_bank(path, other);
    CHECK(other.g.param("prototypes").value.data ==
          net.g.param("prototypes").value.data);
    for (int j = 0; j < 4; ++j) {
        CHECK(other.sources[std::size_t(j)].image_id ==
              net.sources[std::size_t(j)].image_id);
        CHECK(other.sources[std::size_t(j)].h == net.sources[std::size_t(j)].h);
        CHECK(other.sources[std::size_t(j)].w == net.sources[std::size_t(j)].w);
        CHECK(other.sources[std::size_t(j)].valid);
    }

    PrototypeLayerConfig pc6 = tiny_protos();
    pc6.m = 6;
    ProtoPNet mism = make_protopnet(tiny_model(), pc6, 1);
    CHECK_THROWS(load_prototype_bank(path, mism));
    CHECK_THROWS_AS(load_prototype_bank("/nonexistent/bank.bin", mism),
                    MissingPrerequisiteError);
    std::filesystem::remove(path);
}
