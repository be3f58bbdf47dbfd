#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "protosal/classifier.hpp"
#include "protosal/dataset.hpp"
#include "protosal/graph.hpp"

namespace protosal {

struct PrototypeLayerConfig {
    int m = 8;
    std::vector<int> per_class;  // empty = split m evenly over the 2 classes
    int ph = 1, pw = 1;
    double topk_fraction = 0.05;
    double epsilon = 1e-4;
};

// total = l1 * cross-entropy + l2 * cluster + l3 * separation
// (separation is itself negative: maximizing the margin lowers the loss)
struct LossWeights {
    double l1 = 1.0, l2 = 0.8, l3 = 0.08;
};

struct ProtoSource {
    int image_id = -1;
    int h = 0, w = 0;
    double distance = 0.0;
    bool valid = false;
};

// Backbone -> squared-L2 distance map against m prototype vectors ->
// log-similarity -> top-k average pooling -> bias-free dense head.
// Prototypes 0..per_class[0]-1 belong to class 0, the rest to class 1.
struct ProtoPNet {
    ModelConfig backbone_cfg;
    PrototypeLayerConfig proto_cfg;
    Graph g;
    int input_node = 0;
    int features_node = -1;
    int dist_node = -1;
    int sim_node = -1;
    int scores_node = -1;
    int logits_node = -1;
    int loss_node = -1;
    std::vector<int> proto_class;
    std::vector<ProtoSource> sources;
    int latent_d = 0, latent_h = 0, latent_w = 0;
};

struct PPNetSchedule {
    int cycles = 2;
    int phase1_epochs = 10;
    std::string optimizer = "adam";
    double lr = 1e-3;
    int batch_size = 64;
    bool augment = true;
    AugmentConfig augment_cfg;
    double sparsity_weight = 1e-4;
    int ista_max_iters = 20000;
    double ista_tol = 1e-7;
    std::uint64_t seed = 1;
};

struct PPNetLogRow {
    int cycle = 0, phase = 0, epoch = 0;  // epoch is global, 1-based
    double loss = 0.0, ce = 0.0, clst = 0.0, sep = 0.0;
    double val_accuracy = 0.0, lr = 0.0;
};

struct PPNetTrainResult {
    std::vector<PPNetLogRow> log;
    double final_val_accuracy = 0.0;
};

ProtoPNet make_protopnet(const ModelConfig& mc, PrototypeLayerConfig pc,
                         std::uint64_t init_seed);

// Mean over the batch of the smallest squared distance from each sample to
// any own-class prototype cell. `dist` is the {B,m,oh,ow} distance-map
// activation. When seed_accum is given, d(coeff * cost)/d(dist) is added to
// it (coeff/B at each per-sample argmin, first cell wins ties).
template <class S>
double cluster_cost(const TensorT<S>& dist, const std::vector<int>& labels,
                    const std::vector<int>& proto_class,
                    TensorT<S>* seed_accum = nullptr, double coeff = 0.0);

// Negated mean of the smallest squared distance to any other-class
// prototype cell (always <= 0; training minimizes coeff * this).
template <class S>
double separation_cost(const TensorT<S>& dist, const std::vector<int>& labels,
                       const std::vector<int>& proto_class,
                       TensorT<S>* seed_accum = nullptr, double coeff = 0.0);

// Phase 2: each prototype becomes a bitwise copy of the nearest same-class
// training latent patch; the winning (image, cell) is recorded.
void project_prototypes(ProtoPNet& net, const std::vector<Patch>& train,
                        int batch_size = 64);

struct LastLayerFit {
    std::vector<double> weights;  // num_classes x m, row-major
    double objective = 0.0;
    double grad_norm = 0.0;
    int iters = 0;
    bool converged = false;
};

// ISTA on cross-entropy + sparsity_weight * sum |off-class weights|;
// convex, so any start converges to the same objective. scores is n x m
// row-major similarity scores at fixed features/prototypes.
LastLayerFit fit_last_layer(const std::vector<double>& scores, int n, int m,
                            const std::vector<int>& labels,
                            const std::vector<int>& proto_class, double sparsity_weight,
                            const std::vector<double>& w0, int max_iters, double tol);

// Phase 3 wrapper: fits from the current weights and writes them back.
// Throws NumericError (with the gradient norm) if the budget runs out.
LastLayerFit optimize_last_layer(ProtoPNet& net, const std::vector<Patch>& train,
                                 double sparsity_weight, int max_iters = 20000,
                                 double tol = 1e-7, int batch_size = 64);

PPNetTrainResult train_protopnet(ProtoPNet& net, const std::vector<Patch>& train,
                                 const std::vector<Patch>& val, const LossWeights& lw,
                                 const PPNetSchedule& sched);

struct PPNetPrediction {
    std::vector<std::array<double, 2>> probs;
    Tensor scores;  // {n, m} pooled similarity per prototype
};

PPNetPrediction predict_protopnet(ProtoPNet& net, const std::vector<Patch>& patches,
                                  int batch_size = 64);

double ppnet_accuracy(ProtoPNet& net, const std::vector<Patch>& patches,
                      int batch_size = 64);

// Loss components and accuracy over a split, eval mode, no augmentation.
struct PPNetEval {
    double ce = 0.0, clst = 0.0, sep = 0.0, accuracy = 0.0;
};

inline double joint_loss(double ce, double clst, double sep, const LossWeights& lw) {
    return lw.l1 * ce + lw.l2 * clst + lw.l3 * sep;
}
PPNetEval evaluate_protopnet(ProtoPNet& net, const std::vector<Patch>& patches,
                             int batch_size = 64);

struct PrototypeAttribution {
    int prototype_id = -1;
    int class_id = 0;
    double score = 0.0;           // pooled similarity for this image
    double weight_to_pred = 0.0;  // last-layer weight to the predicted class
    Tensor raw;                   // {oh, ow} similarity grid
    Tensor upsampled;             // {H, W} bilinear map, non-negative
};

// The top_count prototypes with the largest |last-layer weight| to the
// image's predicted class (ties to the lower id), with their similarity
// grids upsampled to input resolution.
std::vector<PrototypeAttribution> prototype_attributions(ProtoPNet& net, const Patch& img,
                                                         int top_count = 4);

void save_prototype_bank(const std::string& path, const ProtoPNet& net);
void load_prototype_bank(const std::string& path, ProtoPNet& net);

}  // namespace protosal
