#include "protosal/protopnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "protosal/binio.hpp"
#include "protosal/image_io.hpp"
#include "protosal/optimizer.hpp"

namespace protosal {

namespace {

constexpr char kProtoMagic[8] = {'P', 'S', 'P', 'R', 'O', 'T', 'O', '1'};

std::vector<int> resolve_per_class(const PrototypeLayerConfig& pc) {
    std::vector<int> per = pc.per_class;
    if (per.empty()) per = {pc.m / 2, pc.m - pc.m / 2};
    if (per.size() != 2) throw ConfigError("prototype allocation must cover 2 classes");
    if (per[0] + per[1] != pc.m)
        throw ConfigError("prototype allocation does not sum to m");
    if (pc.m < 2 || per[0] < 1 || per[1] < 1)
        throw ConfigError("need m >= 2 prototypes with at least one per class");
    return per;
}

void set_dummy_labels(Graph& g, std::size_t n) { g.set_labels(std::vector<int>(n, 0)); }

}  // namespace

ProtoPNet make_protopnet(const ModelConfig& mc, PrototypeLayerConfig pc,
                         std::uint64_t init_seed) {
    if (pc.ph != 1 || pc.pw != 1)
        throw ConfigError("prototypes must be 1x1xD");
    std::vector<int> per = resolve_per_class(pc);

    ProtoPNet net;
    net.backbone_cfg = mc;
    pc.per_class = per;
    net.proto_cfg = pc;
    net.features_node = build_backbone(net.g, mc);
    net.input_node = net.g.input_node();
    const auto& fs = net.g.node(net.features_node).sample_shape;
    net.latent_d = static_cast<int>(fs[0]);
    net.latent_h = static_cast<int>(fs[1]);
    net.latent_w = static_cast<int>(fs[2]);

    net.dist_node = net.g.add_l2_distance_map(net.features_node, pc.m, pc.ph, pc.pw,
                                              "prototypes");
    net.sim_node = net.g.add_similarity_log(net.dist_node, pc.epsilon);
    net.scores_node = net.g.add_topk_avg_pool(net.sim_node, pc.topk_fraction);
    net.logits_node = net.g.add_dense(net.scores_node, mc.num_classes, false, "last_layer");
    net.loss_node = net.g.add_cross_entropy_softmax(net.logits_node);

    net.proto_class.resize(std::size_t(pc.m));
    for (int j = 0; j < pc.m; ++j) net.proto_class[std::size_t(j)] = j < per[0] ? 0 : 1;
    net.sources.assign(std::size_t(pc.m), ProtoSource{});

    init_params(net.g, Rng::derive(init_seed, 0x99e7, 0, 0));
    // connection convention: +1 prototype -> own class, -0.5 off class
    auto& W = net.g.param("last_layer.weight");
    for (int c = 0; c < mc.num_classes; ++c)
        for (int j = 0; j < pc.m; ++j)
            W.value.data[std::size_t(c) * pc.m + j] =
                net.proto_class[std::size_t(j)] == c ? 1.0f : -0.5f;
    return net;
}

template <class S>
static double min_cost(const TensorT<S>& dist, const std::vector<int>& labels,
                       const std::vector<int>& proto_class, bool own_class,
                       TensorT<S>* seed_accum, double coeff, const char* what) {
    if (dist.ndim() != 4) throw Error("distance map must be {B,m,oh,ow}");
    const std::int64_t B = dist.dim(0);
    const std::int64_t M = dist.dim(1);
    const std::int64_t HW = dist.dim(2) * dist.dim(3);
    if (static_cast<std::int64_t>(labels.size()) != B)
        throw Error("labels do not match the batch");
    if (static_cast<std::int64_t>(proto_class.size()) != M)
        throw Error("prototype classes do not match the map");
    if (seed_accum && !seed_accum->same_shape(dist))
        throw Error("seed accumulator shape mismatch");

    double total = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        double best = std::numeric_limits<double>::infinity();
        std::int64_t best_at = -1;
        for (std::int64_t j = 0; j < M; ++j) {
            bool own = proto_class[std::size_t(j)] == labels[std::size_t(b)];
            if (own != own_class) continue;
            const S* cell = dist.data.data() + (b * M + j) * HW;
            for (std::int64_t i = 0; i < HW; ++i) {
                double d = double(cell[i]);
                if (d < best) {
                    best = d;
                    best_at = (b * M + j) * HW + i;
                }
            }
        }
        if (best_at < 0)
            throw ConfigError(std::string(what) + ": a sample has no " +
                              (own_class ? "own" : "other") + "-class prototypes");
        total += best;
        if (seed_accum) seed_accum->data[std::size_t(best_at)] += S(coeff / double(B));
    }
    return total / double(B);
}

template <class S>
double cluster_cost(const TensorT<S>& dist, const std::vector<int>& labels,
                    const std::vector<int>& proto_class, TensorT<S>* seed_accum,
                    double coeff) {
    return min_cost(dist, labels, proto_class, true, seed_accum, coeff, "cluster_cost");
}

template <class S>
double separation_cost(const TensorT<S>& dist, const std::vector<int>& labels,
                       const std::vector<int>& proto_class, TensorT<S>* seed_accum,
                       double coeff) {
    return -min_cost(dist, labels, proto_class, false, seed_accum, -coeff,
                     "separation_cost");
}

template double cluster_cost<float>(const Tensor&, const std::vector<int>&,
                                    const std::vector<int>&, Tensor*, double);
template double cluster_cost<double>(const Tensor64&, const std::vector<int>&,
                                     const std::vector<int>&, Tensor64*, double);
template double separation_cost<float>(const Tensor&, const std::vector<int>&,
                                       const std::vector<int>&, Tensor*, double);
template double separation_cost<double>(const Tensor64&, const std::vector<int>&,
                                        const std::vector<int>&, Tensor64*, double);

namespace {

// Eval-mode backbone latents for every patch, {D*fh*fw} floats per image.
std::vector<std::vector<float>> collect_latents(ProtoPNet& net,
                                                const std::vector<Patch>& patches,
                                                int batch_size) {
    std::vector<std::vector<float>> latents(patches.size());
    const std::size_t per = std::size_t(net.latent_d) * net.latent_h * net.latent_w;
    for (std::size_t start = 0; start < patches.size(); start += std::size_t(batch_size)) {
        std::size_t stop = std::min(patches.size(), start + std::size_t(batch_size));
        std::vector<int> idx(stop - start);
        std::iota(idx.begin(), idx.end(), static_cast<int>(start));
        Tensor batch = assemble_batch(patches, idx, nullptr, false, {}, 0, 0);
        set_dummy_labels(net.g, idx.size());
        net.g.forward(batch, false);
        const Tensor& f = net.g.activation(net.features_node);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            latents[start + i].assign(f.data.begin() + std::int64_t((i)*per),
                                      f.data.begin() + std::int64_t((i + 1) * per));
        }
    }
    return latents;
}

}  // namespace

void project_prototypes(ProtoPNet& net, const std::vector<Patch>& train, int batch_size) {
    for (int c = 0; c < 2; ++c) {
        bool any = std::any_of(train.begin(), train.end(),
                               [c](const Patch& p) { return p.label == c; });
        if (!any)
            throw ConfigError("projection: no training images of class " +
                              std::to_string(c));
    }
    auto latents = collect_latents(net, train, batch_size);
    auto& P = net.g.param("prototypes").value;
    const int D = net.latent_d;
    const std::int64_t HW = std::int64_t(net.latent_h) * net.latent_w;

    for (int j = 0; j < net.proto_cfg.m; ++j) {
        const float* p = P.data.data() + std::int64_t(j) * D;
        double best = std::numeric_limits<double>::infinity();
        int best_img = -1;
        std::int64_t best_cell = -1;
        for (std::size_t i = 0; i < train.size(); ++i) {
            if (train[i].label != net.proto_class[std::size_t(j)]) continue;
            const float* z = latents[i].data();
            for (std::int64_t cell = 0; cell < HW; ++cell) {
                double d = 0.0;
                for (int k = 0; k < D; ++k) {
                    double diff = double(z[k * HW + cell]) - double(p[k]);
                    d += diff * diff;
                }
                if (d < best) {
                    best = d;
                    best_img = static_cast<int>(i);
                    best_cell = cell;
                }
            }
        }
        const float* z = latents[std::size_t(best_img)].data();
        float* dst = P.data.data() + std::int64_t(j) * D;
        for (int k = 0; k < D; ++k) dst[k] = z[k * HW + best_cell];
        net.sources[std::size_t(j)] = {best_img, static_cast<int>(best_cell / net.latent_w),
                                       static_cast<int>(best_cell % net.latent_w), best,
                                       true};
    }
    net.g.invalidate();
}

LastLayerFit fit_last_layer(const std::vector<double>& scores, int n, int m,
                            const std::vector<int>& labels,
                            const std::vector<int>& proto_class, double sparsity_weight,
                            const std::vector<double>& w0, int max_iters, double tol) {
    if (n <= 0 || m <= 0 || scores.size() != std::size_t(n) * m)
        throw Error("fit_last_layer: bad score matrix");
    if (labels.size() != std::size_t(n) || proto_class.size() != std::size_t(m) ||
        w0.size() != std::size_t(2) * m)
        throw Error("fit_last_layer: shape mismatch");

    // Gershgorin bound on the spectral norm of (1/n) S^T S; the softmax
    // cross-entropy Hessian in the logits is at most 1/2, giving a safe
    // ISTA step of 1/L.
    std::vector<double> gram(std::size_t(m) * m, 0.0);
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < m; ++a)
            for (int b = 0; b < m; ++b)
                gram[std::size_t(a) * m + b] +=
                    scores[std::size_t(i) * m + a] * scores[std::size_t(i) * m + b];
    double lam = 0.0;
    for (int a = 0; a < m; ++a) {
        double row = 0.0;
        for (int b = 0; b < m; ++b) row += std::abs(gram[std::size_t(a) * m + b]) / n;
        lam = std::max(lam, row);
    }
    const double L = std::max(0.5 * lam, 1e-12);
    const double step = 1.0 / L;

    LastLayerFit fit;
    fit.weights = w0;
    std::vector<double> grad(std::size_t(2) * m);
    auto smooth_grad = [&](const std::vector<double>& W) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double ce = 0.0;
        for (int i = 0; i < n; ++i) {
            const double* s = scores.data() + std::size_t(i) * m;
            double z0 = 0.0, z1 = 0.0;
            for (int j = 0; j < m; ++j) {
                z0 += W[std::size_t(j)] * s[j];
                z1 += W[std::size_t(m) + j] * s[j];
            }
            double mx = std::max(z0, z1);
            double e0 = std::exp(z0 - mx), e1 = std::exp(z1 - mx);
            double zsum = e0 + e1;
            double p0 = e0 / zsum, p1 = e1 / zsum;
            ce -= std::log((labels[std::size_t(i)] == 0 ? p0 : p1) +
                           std::numeric_limits<double>::min());
            double g0 = p0 - (labels[std::size_t(i)] == 0 ? 1.0 : 0.0);
            double g1 = p1 - (labels[std::size_t(i)] == 1 ? 1.0 : 0.0);
            for (int j = 0; j < m; ++j) {
                grad[std::size_t(j)] += g0 * s[j] / n;
                grad[std::size_t(m) + j] += g1 * s[j] / n;
            }
        }
        return ce / n;
    };
    auto objective = [&](const std::vector<double>& W) {
        double ce = smooth_grad(W);
        double l1 = 0.0;
        for (int c = 0; c < 2; ++c)
            for (int j = 0; j < m; ++j)
                if (proto_class[std::size_t(j)] != c)
                    l1 += std::abs(W[std::size_t(c) * m + j]);
        return ce + sparsity_weight * l1;
    };

    // FISTA with adaptive restart: momentum resets whenever it points
    // uphill, which removes the ripple near the optimum
    std::vector<double> y = fit.weights;
    std::vector<double> xn(std::size_t(2) * m);
    double tk = 1.0;
    for (fit.iters = 0; fit.iters < max_iters; ++fit.iters) {
        smooth_grad(y);
        double max_delta = 0.0, uphill = 0.0;
        double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
        for (int c = 0; c < 2; ++c)
            for (int j = 0; j < m; ++j) {
                std::size_t at = std::size_t(c) * m + j;
                double w = y[at] - step * grad[at];
                if (proto_class[std::size_t(j)] != c) {
                    double thr = step * sparsity_weight;
                    w = w > thr ? w - thr : (w < -thr ? w + thr : 0.0);
                }
                xn[at] = w;
                max_delta = std::max(max_delta, std::abs(w - fit.weights[at]));
                uphill += (y[at] - w) * (w - fit.weights[at]);
            }
        if (uphill > 0.0) tk = 1.0, tn = 1.0;
        for (std::size_t at = 0; at < xn.size(); ++at) {
            y[at] = xn[at] + (tk - 1.0) / tn * (xn[at] - fit.weights[at]);
            fit.weights[at] = xn[at];
        }
        tk = tn;
        if (max_delta < tol) {
            fit.converged = true;
            ++fit.iters;
            break;
        }
        // momentum can coast on a flat objective; periodically test the
        // plain proximal step from x, which is the true optimality residual
        if (fit.iters % 25 == 24) {
            smooth_grad(fit.weights);
            double res = 0.0;
            for (int c = 0; c < 2; ++c)
                for (int j = 0; j < m; ++j) {
                    std::size_t at = std::size_t(c) * m + j;
                    double w = fit.weights[at] - step * grad[at];
                    if (proto_class[std::size_t(j)] != c) {
                        double thr = step * sparsity_weight;
                        w = w > thr ? w - thr : (w < -thr ? w + thr : 0.0);
                    }
                    res = std::max(res, std::abs(w - fit.weights[at]));
                }
            if (res < tol) {
                fit.converged = true;
                ++fit.iters;
                break;
            }
        }
    }
    fit.objective = objective(fit.weights);
    double gn = 0.0;
    for (double g : grad) gn += g * g;
    fit.grad_norm = std::sqrt(gn);
    return fit;
}

namespace {

// n x m pooled similarity scores in eval mode.
std::vector<double> collect_scores(ProtoPNet& net, const std::vector<Patch>& patches,
                                   int batch_size, std::vector<int>* labels_out) {
    const int m = net.proto_cfg.m;
    std::vector<double> scores(patches.size() * std::size_t(m));
    if (labels_out) labels_out->resize(patches.size());
    for (std::size_t start = 0; start < patches.size(); start += std::size_t(batch_size)) {
        std::size_t stop = std::min(patches.size(), start + std::size_t(batch_size));
        std::vector<int> idx(stop - start);
        std::iota(idx.begin(), idx.end(), static_cast<int>(start));
        Tensor batch = assemble_batch(patches, idx, nullptr, false, {}, 0, 0);
        set_dummy_labels(net.g, idx.size());
        net.g.forward(batch, false);
        const Tensor& s = net.g.activation(net.scores_node);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            for (int j = 0; j < m; ++j)
                scores[(start + i) * std::size_t(m) + j] =
                    double(s.data[i * std::size_t(m) + j]);
            if (labels_out) (*labels_out)[start + i] = patches[start + i].label;
        }
    }
    return scores;
}

}  // namespace

LastLayerFit optimize_last_layer(ProtoPNet& net, const std::vector<Patch>& train,
                                 double sparsity_weight, int max_iters, double tol,
                                 int batch_size) {
    std::vector<int> labels;
    std::vector<double> scores = collect_scores(net, train, batch_size, &labels);
    auto& W = net.g.param("last_layer.weight");
    std::vector<double> w0(W.value.data.begin(), W.value.data.end());
    LastLayerFit fit = fit_last_layer(scores, static_cast<int>(train.size()),
                                      net.proto_cfg.m, labels, net.proto_class,
                                      sparsity_weight, w0, max_iters, tol);
    if (!fit.converged)
        throw NumericError("last-layer optimization did not converge within " +
                           std::to_string(max_iters) + " iterations (gradient norm " +
                           std::to_string(fit.grad_norm) + ")");
    for (std::size_t i = 0; i < W.value.data.size(); ++i)
        W.value.data[i] = static_cast<float>(fit.weights[i]);
    net.g.invalidate();
    return fit;
}

PPNetPrediction predict_protopnet(ProtoPNet& net, const std::vector<Patch>& patches,
                                  int batch_size) {
    const int m = net.proto_cfg.m;
    PPNetPrediction out;
    out.probs.resize(patches.size());
    out.scores = Tensor({static_cast<std::int64_t>(patches.size()), m});
    for (std::size_t start = 0; start < patches.size(); start += std::size_t(batch_size)) {
        std::size_t stop = std::min(patches.size(), start + std::size_t(batch_size));
        std::vector<int> idx(stop - start);
        std::iota(idx.begin(), idx.end(), static_cast<int>(start));
        Tensor batch = assemble_batch(patches, idx, nullptr, false, {}, 0, 0);
        set_dummy_labels(net.g, idx.size());
        net.g.forward(batch, false);
        const Tensor& probs = net.g.node(net.loss_node).aux;
        const Tensor& s = net.g.activation(net.scores_node);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            out.probs[start + i] = {double(probs.data[i * 2]), double(probs.data[i * 2 + 1])};
            std::copy(s.data.begin() + std::int64_t(i) * m,
                      s.data.begin() + std::int64_t(i + 1) * m,
                      out.scores.data.begin() + std::int64_t(start + i) * m);
        }
    }
    return out;
}

double ppnet_accuracy(ProtoPNet& net, const std::vector<Patch>& patches, int batch_size) {
    if (patches.empty()) return 0.0;
    auto pred = predict_protopnet(net, patches, batch_size);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < patches.size(); ++i)
        if ((pred.probs[i][1] > pred.probs[i][0] ? 1 : 0) == patches[i].label) ++hits;
    return double(hits) / double(patches.size());
}

PPNetEval evaluate_protopnet(ProtoPNet& net, const std::vector<Patch>& patches,
                             int batch_size) {
    PPNetEval ev;
    std::size_t hits = 0;
    double ce_sum = 0.0, clst_sum = 0.0, sep_sum = 0.0;
    for (std::size_t start = 0; start < patches.size(); start += std::size_t(batch_size)) {
        std::size_t stop = std::min(patches.size(), start + std::size_t(batch_size));
        std::vector<int> idx(stop - start);
        std::iota(idx.begin(), idx.end(), static_cast<int>(start));
        std::vector<int> labels;
        Tensor batch = assemble_batch(patches, idx, &labels, false, {}, 0, 0);
        net.g.set_labels(labels);
        net.g.forward(batch, false);
        double w = double(idx.size());
        ce_sum += double(net.g.activation(net.loss_node).data[0]) * w;
        const Tensor& dist = net.g.activation(net.dist_node);
        clst_sum += cluster_cost(dist, labels, net.proto_class) * w;
        sep_sum += separation_cost(dist, labels, net.proto_class) * w;
        const Tensor& probs = net.g.node(net.loss_node).aux;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            int pred = probs.data[i * 2 + 1] > probs.data[i * 2] ? 1 : 0;
            if (pred == labels[i]) ++hits;
        }
    }
    double n = double(patches.size());
    ev.ce = ce_sum / n;
    ev.clst = clst_sum / n;
    ev.sep = sep_sum / n;
    ev.accuracy = double(hits) / n;
    return ev;
}

PPNetTrainResult train_protopnet(ProtoPNet& net, const std::vector<Patch>& train,
                                 const std::vector<Patch>& val, const LossWeights& lw,
                                 const PPNetSchedule& sched) {
    if (!(lw.l1 > 0.0) || lw.l2 < 0.0 || lw.l3 < 0.0)
        throw ConfigError("loss weights: need l1 > 0, l2 >= 0, l3 >= 0");
    if (train.empty() || val.empty())
        throw ConfigError("training requires non-empty train and val splits");

    PPNetTrainResult res;
    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    int global_epoch = 0;

    for (int cycle = 1; cycle <= sched.cycles; ++cycle) {
        Optimizer opt = Optimizer::by_name(sched.optimizer, sched.lr);
        std::vector<std::string> names;
        for (const auto& p : net.g.params())
            if (p.trainable && p.name != "last_layer.weight") names.push_back(p.name);
        opt.set_param_filter(names);

        for (int e = 1; e <= sched.phase1_epochs; ++e) {
            ++global_epoch;
            Rng shuffle_rng =
                Rng::derive(sched.seed, 0xe0, static_cast<std::uint64_t>(global_epoch), 0);
            shuffle_rng.shuffle(order);
            double lsum = 0, cesum = 0, clsum = 0, sepsum = 0;
            std::int64_t seen = 0;
            for (std::size_t start = 0; start < order.size();
                 start += std::size_t(sched.batch_size)) {
                std::size_t stop =
                    std::min(order.size(), start + std::size_t(sched.batch_size));
                std::vector<int> idx(order.begin() + start, order.begin() + stop);
                std::vector<int> labels;
                Tensor batch = assemble_batch(train, idx, &labels, sched.augment,
                                              sched.augment_cfg, sched.seed, global_epoch);
                net.g.set_labels(labels);
                net.g.forward(batch, true);
                double ce = double(net.g.activation(net.loss_node).data[0]);
                const Tensor& dist = net.g.activation(net.dist_node);
                Tensor seed(dist.shape);
                double clst = cluster_cost(dist, labels, net.proto_class, &seed, lw.l2);
                double sep = separation_cost(dist, labels, net.proto_class, &seed, lw.l3);
                double total = lw.l1 * ce + lw.l2 * clst + lw.l3 * sep;
                if (!std::isfinite(total))
                    throw NumericError("training diverged at epoch " +
                                       std::to_string(global_epoch) +
                                       ": loss is not finite");
                net.g.zero_grad();
                Tensor ce_seed({1});
                ce_seed.data[0] = static_cast<float>(lw.l1);
                net.g.backward_from({{net.loss_node, ce_seed}, {net.dist_node, seed}});
                opt.step(net.g);
                double w = double(idx.size());
                lsum += total * w;
                cesum += ce * w;
                clsum += clst * w;
                sepsum += sep * w;
                seen += static_cast<std::int64_t>(idx.size());
            }
            double val_acc = ppnet_accuracy(net, val, sched.batch_size);
            res.log.push_back({cycle, 1, global_epoch, lsum / double(seen),
                               cesum / double(seen), clsum / double(seen),
                               sepsum / double(seen), val_acc, opt.lr()});
        }

        project_prototypes(net, train, sched.batch_size);
        PPNetEval ev = evaluate_protopnet(net, train, sched.batch_size);
        double val_acc = ppnet_accuracy(net, val, sched.batch_size);
        res.log.push_back({cycle, 2, global_epoch,
                           lw.l1 * ev.ce + lw.l2 * ev.clst + lw.l3 * ev.sep, ev.ce, ev.clst,
                           ev.sep, val_acc, 0.0});

        optimize_last_layer(net, train, sched.sparsity_weight, sched.ista_max_iters,
                            sched.ista_tol, sched.batch_size);
        ev = evaluate_protopnet(net, train, sched.batch_size);
        val_acc = ppnet_accuracy(net, val, sched.batch_size);
        res.log.push_back({cycle, 3, global_epoch,
                           lw.l1 * ev.ce + lw.l2 * ev.clst + lw.l3 * ev.sep, ev.ce, ev.clst,
                           ev.sep, val_acc, 0.0});
        res.final_val_accuracy = val_acc;
    }
    return res;
}

std::vector<PrototypeAttribution> prototype_attributions(ProtoPNet& net, const Patch& img,
                                                         int top_count) {
    const int m = net.proto_cfg.m;
    Tensor batch({1, 3, kPatchSize, kPatchSize}, img.pixels.data);
    set_dummy_labels(net.g, 1);
    net.g.forward(batch, false);
    const Tensor& probs = net.g.node(net.loss_node).aux;
    int pred = probs.data[1] > probs.data[0] ? 1 : 0;
    const Tensor& sims = net.g.activation(net.sim_node);  // {1, m, oh, ow}
    const Tensor& scores = net.g.activation(net.scores_node);
    const auto& W = net.g.param("last_layer.weight").value;

    std::vector<int> ids(static_cast<std::size_t>(m));
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
        return std::abs(W.data[std::size_t(pred) * m + a]) >
               std::abs(W.data[std::size_t(pred) * m + b]);
    });
    ids.resize(std::size_t(std::min(top_count, m)));

    const int oh = net.latent_h, ow = net.latent_w;
    std::vector<PrototypeAttribution> out;
    for (int j : ids) {
        PrototypeAttribution a;
        a.prototype_id = j;
        a.class_id = net.proto_class[std::size_t(j)];
        a.score = double(scores.data[std::size_t(j)]);
        a.weight_to_pred = double(W.data[std::size_t(pred) * m + j]);
        a.raw = Tensor({oh, ow});
        std::copy(sims.data.begin() + std::int64_t(j) * oh * ow,
                  sims.data.begin() + std::int64_t(j + 1) * oh * ow, a.raw.data.begin());
        a.upsampled = Tensor({kPatchSize, kPatchSize},
                             resize_plane_bilinear(a.raw.data, oh, ow, kPatchSize,
                                                   kPatchSize));
        out.push_back(std::move(a));
    }
    return out;
}

void save_prototype_bank(const std::string& path, const ProtoPNet& net) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path);
    f.write(kProtoMagic, 8);
    binio::write_u32(f, static_cast<std::uint32_t>(net.proto_cfg.m));
    binio::write_u32(f, static_cast<std::uint32_t>(net.proto_cfg.ph));
    binio::write_u32(f, static_cast<std::uint32_t>(net.proto_cfg.pw));
    binio::write_u32(f, static_cast<std::uint32_t>(net.latent_d));
    const auto& P = net.g.params();
    const ParamT<float>* proto = nullptr;
    for (const auto& p : P)
        if (p.name == "prototypes") proto = &p;
    if (!proto) throw Error("graph has no prototype bank");
    for (int j = 0; j < net.proto_cfg.m; ++j) {
        binio::write_u32(f, static_cast<std::uint32_t>(j));
        binio::write_u32(f, static_cast<std::uint32_t>(net.proto_class[std::size_t(j)]));
        binio::write_f32_array(f, proto->value.data.data() + std::int64_t(j) * net.latent_d,
                               std::size_t(net.latent_d));
        const ProtoSource& s = net.sources[std::size_t(j)];
        binio::write_i64(f, s.valid ? s.image_id : -1);
        binio::write_u32(f, static_cast<std::uint32_t>(s.h));
        binio::write_u32(f, static_cast<std::uint32_t>(s.w));
    }
    if (!f) throw Error("write failed: " + path);
}

void load_prototype_bank(const std::string& path, ProtoPNet& net) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingPrerequisiteError("prototype bank not found: " + path);
    binio::expect_magic(f, kProtoMagic, path.c_str());
    std::uint32_t m = binio::read_u32(f), ph = binio::read_u32(f), pw = binio::read_u32(f),
                  d = binio::read_u32(f);
    if (m != std::uint32_t(net.proto_cfg.m) || ph != std::uint32_t(net.proto_cfg.ph) ||
        pw != std::uint32_t(net.proto_cfg.pw) || d != std::uint32_t(net.latent_d))
        throw Error("prototype bank does not match the network: " + path);
    auto& P = net.g.param("prototypes").value;
    for (std::uint32_t j = 0; j < m; ++j) {
        std::uint32_t id = binio::read_u32(f);
        std::uint32_t cls = binio::read_u32(f);
        if (id != j || cls != std::uint32_t(net.proto_class[j]))
            throw Error("prototype bank record mismatch at " + std::to_string(j));
        binio::read_f32_array(f, P.data.data() + std::int64_t(j) * net.latent_d,
                              std::size_t(net.latent_d));
        ProtoSource s;
        std::int64_t img = binio::read_i64(f);
        s.image_id = static_cast<int>(img);
        s.h = static_cast<int>(binio::read_u32(f));
        s.w = static_cast<int>(binio::read_u32(f));
        s.valid = img >= 0;
        net.sources[j] = s;
    }
    if (!f) throw Error("truncated prototype bank: " + path);
    net.g.invalidate();
}

}  // namespace protosal
