#pragma once

#include <cstdint>
#include <string>

#include "protosal/classifier.hpp"
#include "protosal/config.hpp"
#include "protosal/dataset.hpp"
#include "protosal/metrics.hpp"
#include "protosal/protopnet.hpp"
#include "protosal/saliency.hpp"

namespace protosal {

// Everything one batch run needs, assembled from a config file plus CLI
// overrides. Module seeds left unset in the file default to `seed`.
struct RunConfig {
    std::string out_dir = "out";
    std::uint64_t seed = 1;
    int jobs = 1;
    int explain_count = 0;    // 0 = the whole test split
    int prototype_count = 4;  // importance slots evaluated per image
    int overlay_images = 2;
    double nemenyi_alpha = 0.05;
    bool export_json = false;
    std::string ig_baseline = "uniform";  // or "center"

    SyntheticConfig synth;
    ModelConfig model;
    TrainConfig train;
    PrototypeLayerConfig proto;
    LossWeights loss_weights;
    PPNetSchedule ppnet;
    MethodConfig methods;
    MetricConfig metrics;
};

RunConfig parse_run_config(const Config& file);
Config serialize_run_config(const RunConfig& rc);

// Stage entry points. Each consumes only files under rc.out_dir written by
// earlier stages and is bitwise idempotent for a fixed config and seed.
void cmd_gen_data(const RunConfig& rc);
void cmd_train(const RunConfig& rc);
void cmd_train_ppnet(const RunConfig& rc);
void cmd_explain(const RunConfig& rc);
void cmd_evaluate(const RunConfig& rc);
void cmd_rank(const RunConfig& rc);
void cmd_report(const RunConfig& rc);

// Verb dispatch; returns the process exit code (0 ok, 2 config error,
// 3 missing prerequisite, 4 numeric failure).
int run_cli(int argc, const char* const* argv);

}  // namespace protosal
