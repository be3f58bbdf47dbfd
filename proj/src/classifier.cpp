#include "protosal/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "protosal/optimizer.hpp"

namespace protosal {

int build_backbone(Graph& g, const ModelConfig& cfg) {
    if (cfg.conv_blocks < 1) throw ConfigError("model.conv_blocks must be >= 1");
    if (static_cast<int>(cfg.channels.size()) != cfg.conv_blocks)
        throw ConfigError("model.channels must list one width per conv block");
    int side = cfg.input_size;
    for (int b = 0; b < cfg.conv_blocks; ++b) side /= 2;
    if (side < 3)
        throw ConfigError("model: final feature map would be " + std::to_string(side) +
                          "x" + std::to_string(side) + ", need at least 3x3");

    int cur = g.add_input({3, cfg.input_size, cfg.input_size});
    for (int b = 0; b < cfg.conv_blocks; ++b) {
        const int ch = cfg.channels[b];
        const std::string base = "block" + std::to_string(b);
        int x = g.add_conv2d(cur, ch, 3, 3, 1, 1, base + ".conv1");
        x = g.add_batchnorm2d(x, base + ".bn1");
        x = g.add_relu(x);
        if (cfg.skip_connections) {
            int y = g.add_conv2d(x, ch, 3, 3, 1, 1, base + ".conv2");
            y = g.add_batchnorm2d(y, base + ".bn2");
            y = g.add_add(y, x);
            x = g.add_relu(y);
        }
        cur = g.add_maxpool2d(x, 2, 2);
    }
    return cur;
}

Classifier make_classifier(const ModelConfig& cfg, std::uint64_t init_seed) {
    Classifier c;
    c.cfg = cfg;
    c.features_node = build_backbone(c.g, cfg);
    c.input_node = c.g.input_node();
    int pooled = c.g.add_global_avg_pool(c.features_node);
    c.logits_node = c.g.add_dense(pooled, cfg.num_classes, true, "head");
    c.loss_node = c.g.add_cross_entropy_softmax(c.logits_node);
    init_params(c.g, Rng::derive(init_seed, 0x1717, 0, 0));
    return c;
}

Tensor assemble_batch(const std::vector<Patch>& patches, const std::vector<int>& idx,
                      std::vector<int>* labels, bool do_augment, const AugmentConfig& acfg,
                      std::uint64_t seed, int epoch) {
    const std::int64_t n = static_cast<std::int64_t>(idx.size());
    Tensor batch({n, 3, kPatchSize, kPatchSize});
    if (labels) labels->resize(idx.size());
    const std::size_t plane = std::size_t(3) * kPatchSize * kPatchSize;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const Patch& p = patches.at(static_cast<std::size_t>(idx[i]));
        if (do_augment) {
            Rng rng = Rng::derive(seed, 0xa2, static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(idx[i]));
            Patch q = augment(p, acfg, rng);
            std::copy(q.pixels.data.begin(), q.pixels.data.end(),
                      batch.data.begin() + static_cast<std::int64_t>(i * plane));
        } else {
            std::copy(p.pixels.data.begin(), p.pixels.data.end(),
                      batch.data.begin() + static_cast<std::int64_t>(i * plane));
        }
        if (labels) (*labels)[i] = p.label;
    }
    return batch;
}

namespace {

std::vector<std::vector<float>> snapshot_params(const Graph& g) {
    std::vector<std::vector<float>> snap;
    snap.reserve(g.params().size());
    for (const auto& p : g.params()) snap.push_back(p.value.data);
    return snap;
}

void restore_params(Graph& g, const std::vector<std::vector<float>>& snap) {
    auto& params = g.params();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value.data = snap[i];
    g.invalidate();
}

}  // namespace

std::vector<std::array<double, 2>> predict(Classifier& c, const std::vector<Patch>& patches,
                                           int batch_size) {
    std::vector<std::array<double, 2>> probs(patches.size());
    for (std::size_t start = 0; start < patches.size(); start += std::size_t(batch_size)) {
        std::size_t stop = std::min(patches.size(), start + std::size_t(batch_size));
        std::vector<int> idx(stop - start);
        std::iota(idx.begin(), idx.end(), static_cast<int>(start));
        Tensor batch = assemble_batch(patches, idx, nullptr, false, {}, 0, 0);
        c.g.set_labels(std::vector<int>(idx.size(), 0));
        c.g.forward(batch, false);
        const Tensor& p = c.g.node(c.loss_node).aux;  // softmax rows
        for (std::size_t i = 0; i < idx.size(); ++i) {
            probs[start + i] = {double(p.data[i * 2]), double(p.data[i * 2 + 1])};
        }
    }
    return probs;
}

double accuracy(Classifier& c, const std::vector<Patch>& patches, int batch_size) {
    if (patches.empty()) return 0.0;
    auto probs = predict(c, patches, batch_size);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < patches.size(); ++i) {
        int pred = probs[i][1] > probs[i][0] ? 1 : 0;
        if (pred == patches[i].label) ++hits;
    }
    return double(hits) / double(patches.size());
}

TrainResult train_classifier(Classifier& c, const std::vector<Patch>& train,
                             const std::vector<Patch>& val, const TrainConfig& tc) {
    if (train.empty() || val.empty())
        throw ConfigError("training requires non-empty train and val splits");
    Optimizer opt = Optimizer::by_name(tc.optimizer, tc.lr);

    TrainResult res;
    PlateauTracker es{tc.min_delta};
    int lr_since = 0;
    double best_exact = -1.0;
    std::vector<std::vector<float>> best_snap = snapshot_params(c.g);

    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        Rng shuffle_rng = Rng::derive(tc.seed, 0xe0, static_cast<std::uint64_t>(epoch), 0);
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::int64_t seen = 0;
        for (std::size_t start = 0; start < order.size();
             start += std::size_t(tc.batch_size)) {
            std::size_t stop = std::min(order.size(), start + std::size_t(tc.batch_size));
            std::vector<int> idx(order.begin() + start, order.begin() + stop);
            std::vector<int> labels;
            Tensor batch = assemble_batch(train, idx, &labels, tc.augment, tc.augment_cfg,
                                          tc.seed, epoch);
            c.g.set_labels(labels);
            const Tensor& out = c.g.forward(batch, true);
            double loss = out.data[0];
            if (!std::isfinite(loss))
                throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                                   ": loss is not finite");
            loss_sum += loss * double(idx.size());
            seen += static_cast<std::int64_t>(idx.size());
            c.g.zero_grad();
            Tensor seed_grad({1});
            seed_grad.data[0] = 1.f;
            c.g.backward(seed_grad);
            opt.step(c.g);
        }

        double val_acc = accuracy(c, val, tc.batch_size);
        res.log.push_back({epoch, loss_sum / double(seen), val_acc, opt.lr()});

        if (val_acc > best_exact) {
            best_exact = val_acc;
            res.best_epoch = epoch;
            res.best_val_accuracy = val_acc;
            best_snap = snapshot_params(c.g);
        }
        if (es.update(val_acc)) {
            lr_since = 0;
        } else {
            ++lr_since;
            if (lr_since >= tc.lr_plateau_patience) {
                opt.set_lr(opt.lr() * tc.lr_plateau_factor);
                lr_since = 0;
            }
        }
        if (es.since >= tc.early_stop_patience) break;
    }

    restore_params(c.g, best_snap);
    return res;
}

GridResult grid_search(const ModelConfig& mc, const TrainConfig& base,
                       const std::vector<GridCandidate>& candidates,
                       const std::vector<Patch>& train, const std::vector<Patch>& val) {
    if (candidates.empty()) throw ConfigError("grid search needs candidates");
    GridResult gr;
    gr.best = base;
    double best_acc = -2.0;
    for (const auto& cand : candidates) {
        TrainConfig tc = base;
        tc.optimizer = cand.optimizer;
        tc.lr = cand.lr;
        Classifier c = make_classifier(mc, tc.seed);
        GridOutcome out;
        out.candidate = cand;
        try {
            TrainResult tr = train_classifier(c, train, val, tc);
            out.best_val_accuracy = tr.best_val_accuracy;
        } catch (const NumericError&) {
            out.best_val_accuracy = -1.0;
            out.diverged = true;
        }
        gr.outcomes.push_back(out);
        bool wins = false;
        if (out.best_val_accuracy > best_acc) {
            wins = true;
        } else if (out.best_val_accuracy == best_acc) {
            if (cand.lr < gr.best.lr) wins = true;
            else if (cand.lr == gr.best.lr && cand.optimizer < gr.best.optimizer) wins = true;
        }
        if (wins) {
            best_acc = out.best_val_accuracy;
            gr.best.optimizer = cand.optimizer;
            gr.best.lr = cand.lr;
        }
    }
    return gr;
}

std::vector<GridCandidate> default_grid() {
    return {{"sgd", 1e-2}, {"sgd", 1e-3}, {"sgd", 1e-4},
            {"adam", 1e-2}, {"adam", 1e-3}, {"adam", 1e-4}};
}

}  // namespace protosal
