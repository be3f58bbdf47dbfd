#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "protosal/dataset.hpp"
#include "protosal/graph.hpp"
#include "protosal/rng.hpp"

namespace protosal {

struct ModelConfig {
    int conv_blocks = 4;
    std::vector<int> channels = {16, 32, 64, 128};
    bool skip_connections = true;
    int input_size = kPatchSize;
    int num_classes = 2;
};

struct TrainConfig {
    std::string optimizer = "sgd";  // "sgd" | "adam"
    double lr = 0.01;
    int batch_size = 64;
    int max_epochs = 100;
    int early_stop_patience = 10;
    int lr_plateau_patience = 3;
    double lr_plateau_factor = 0.2;
    double min_delta = 1e-4;
    bool augment = true;
    AugmentConfig augment_cfg;
    std::uint64_t seed = 1;
};

struct EpochLog {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_accuracy = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    int best_epoch = 0;
    double best_val_accuracy = 0.0;
};

// CNN classifier: conv_blocks of [conv3x3-bn-relu (-conv3x3-bn-add-relu)
// -maxpool2], then global average pooling, a dense head and the softmax
// cross-entropy loss node. Inference reads class probabilities from the
// loss node's cached softmax.
struct Classifier {
    ModelConfig cfg;
    Graph g;
    int input_node = 0;
    int features_node = -1;  // backbone output, before pooling
    int logits_node = -1;
    int loss_node = -1;
};

// Appends the convolutional backbone to `g` and returns the final feature
// node. Shared with the prototype network.
int build_backbone(Graph& g, const ModelConfig& cfg);

Classifier make_classifier(const ModelConfig& cfg, std::uint64_t init_seed);

// Assembles patches[idx] into a {B,3,H,W} batch (optionally augmented) plus
// the matching label vector.
Tensor assemble_batch(const std::vector<Patch>& patches, const std::vector<int>& idx,
                      std::vector<int>* labels, bool augment, const AugmentConfig& acfg,
                      std::uint64_t seed, int epoch);

// Mini-batch training with validation-accuracy plateau scheduling: LR times
// lr_plateau_factor after lr_plateau_patience epochs without improvement
// greater than min_delta, early stop after early_stop_patience, parameters
// restored to the best epoch. Throws NumericError (with the epoch index) if
// the loss turns non-finite.
TrainResult train_classifier(Classifier& c, const std::vector<Patch>& train,
                             const std::vector<Patch>& val, const TrainConfig& tc);

// Class-probability rows, one per patch, in order.
std::vector<std::array<double, 2>> predict(Classifier& c, const std::vector<Patch>& patches,
                                           int batch_size = 64);

double accuracy(Classifier& c, const std::vector<Patch>& patches, int batch_size = 64);

struct GridCandidate {
    std::string optimizer;
    double lr = 0.0;
};

struct GridOutcome {
    GridCandidate candidate;
    double best_val_accuracy = 0.0;  // -1 when training diverged
    bool diverged = false;
};

struct GridResult {
    TrainConfig best;
    std::vector<GridOutcome> outcomes;
};

// Exhaustive search over candidates; winner by validation accuracy, ties
// broken towards the lower learning rate, then the lexicographically
// smaller optimizer name. Diverging candidates score -1.
GridResult grid_search(const ModelConfig& mc, const TrainConfig& base,
                       const std::vector<GridCandidate>& candidates,
                       const std::vector<Patch>& train, const std::vector<Patch>& val);

std::vector<GridCandidate> default_grid();

}  // namespace protosal
