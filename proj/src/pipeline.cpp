#include "protosal/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "protosal/checkpoint.hpp"
#include "protosal/common.hpp"
#include "protosal/csv.hpp"
#include "protosal/heatmap_store.hpp"
#include "protosal/image_io.hpp"
#include "protosal/stats.hpp"

namespace fs = std::filesystem;

namespace protosal {

namespace {

struct Paths {
    fs::path root;
    fs::path dataset, cnn_ckpt, cnn_log, ppnet_ckpt, ppnet_bank, ppnet_log;
    fs::path methods_bin, protos_bin, methods_json, protos_json;
    fs::path metrics_csv, missing_csv;
    fs::path ranks_csv, rank_contexts_csv, friedman_csv, pairs_csv;
    fs::path performance_csv, agreement_csv, report_txt, overlays;
};

Paths layout(const RunConfig& rc) {
    Paths p;
    p.root = rc.out_dir;
    p.dataset = p.root / "dataset.bin";
    p.cnn_ckpt = p.root / "cnn.ckpt";
    p.cnn_log = p.root / "cnn_train_log.csv";
    p.ppnet_ckpt = p.root / "ppnet.ckpt";
    p.ppnet_bank = p.root / "ppnet_bank.bin";
    p.ppnet_log = p.root / "ppnet_train_log.csv";
    p.methods_bin = p.root / "heatmaps_methods.bin";
    p.protos_bin = p.root / "heatmaps_prototypes.bin";
    p.methods_json = p.root / "heatmaps_methods.json";
    p.protos_json = p.root / "heatmaps_prototypes.json";
    p.metrics_csv = p.root / "metrics.csv";
    p.missing_csv = p.root / "metrics_missing.csv";
    p.ranks_csv = p.root / "ranks.csv";
    p.rank_contexts_csv = p.root / "rank_contexts.csv";
    p.friedman_csv = p.root / "friedman.csv";
    p.pairs_csv = p.root / "significant_pairs.csv";
    p.performance_csv = p.root / "performance.csv";
    p.agreement_csv = p.root / "agreement.csv";
    p.report_txt = p.root / "report.txt";
    p.overlays = p.root / "overlays";
    return p;
}

void need(const fs::path& file, const std::string& stage, const std::string& producer) {
    if (!fs::exists(file))
        throw MissingPrerequisiteError(stage + ": missing " + file.string() + "; run " +
                                       producer + " first");
}

std::vector<int> parse_int_list(const std::string& text, const std::string& key) {
    std::vector<int> out;
    std::string cur;
    std::stringstream ss(text);
    while (std::getline(ss, cur, ',')) {
        if (cur.empty()) continue;
        try {
            std::size_t used = 0;
            int v = std::stoi(cur, &used);
            if (used != cur.size()) throw std::invalid_argument(cur);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected a comma-separated integer list, got `" +
                              text + "`");
        }
    }
    return out;
}

std::string join_int_list(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i)
        out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

TargetScalar parse_target(const std::string& s, const std::string& key) {
    if (s == "logit") return TargetScalar::Logit;
    if (s == "probability") return TargetScalar::Probability;
    throw ConfigError(key + ": expected `logit` or `probability`, got `" + s + "`");
}

std::string target_name(TargetScalar t) {
    return t == TargetScalar::Logit ? "logit" : "probability";
}

// Runs `body(worker)` on `jobs` threads; the body strides over its share.
template <class Body>
void run_workers(int jobs, Body body) {
    if (jobs <= 1) {
        body(0);
        return;
    }
    std::vector<std::thread> threads;
    std::exception_ptr first;
    std::mutex mu;
    for (int w = 0; w < jobs; ++w)
        threads.emplace_back([&, w] {
            try {
                body(w);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!first) first = std::current_exception();
            }
        });
    for (auto& t : threads) t.join();
    if (first) std::rethrow_exception(first);
}

Image patch_to_image(const Patch& p) {
    Image img(kPatchSize, kPatchSize);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < kPatchSize; ++y)
            for (int x = 0; x < kPatchSize; ++x)
                img.at(y, x, c) =
                    p.pixels.data[(std::size_t(c) * kPatchSize + y) * kPatchSize + x];
    return img;
}

std::string orientation_name(Orientation o) {
    return o == Orientation::Similarity ? "similarity" : "dissimilarity";
}

std::string fmt4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace

RunConfig parse_run_config(const Config& f) {
    RunConfig rc;
    rc.out_dir = f.get_str("run.out_dir", rc.out_dir);
    rc.seed = std::uint64_t(f.get_int("run.seed", std::int64_t(rc.seed)));
    rc.jobs = int(f.get_int("run.jobs", rc.jobs));
    rc.explain_count = int(f.get_int("run.explain_count", rc.explain_count));
    rc.prototype_count = int(f.get_int("run.prototype_count", rc.prototype_count));
    rc.overlay_images = int(f.get_int("run.overlay_images", rc.overlay_images));
    rc.nemenyi_alpha = f.get_real("run.nemenyi_alpha", rc.nemenyi_alpha);
    rc.export_json = f.get_bool("run.export_json", rc.export_json);
    rc.ig_baseline = f.get_str("run.ig_baseline", rc.ig_baseline);
    if (rc.jobs < 1) throw ConfigError("run.jobs: must be at least 1");
    if (rc.explain_count < 0) throw ConfigError("run.explain_count: must be >= 0");
    if (rc.prototype_count < 1) throw ConfigError("run.prototype_count: must be >= 1");
    if (rc.overlay_images < 0) throw ConfigError("run.overlay_images: must be >= 0");
    if (rc.ig_baseline != "uniform" && rc.ig_baseline != "center")
        throw ConfigError("run.ig_baseline: expected `uniform` or `center`");

    SyntheticConfig& s = rc.synth;
    s.n_train = int(f.get_int("data.n_train", s.n_train));
    s.n_val = int(f.get_int("data.n_val", s.n_val));
    s.n_test = int(f.get_int("data.n_test", s.n_test));
    s.balance = f.get_real("data.balance", s.balance);
    s.noise_octaves = int(f.get_int("data.noise_octaves", s.noise_octaves));
    s.fine_noise = f.get_real("data.fine_noise", s.fine_noise);
    s.blob_min = int(f.get_int("data.blob_min", s.blob_min));
    s.blob_max = int(f.get_int("data.blob_max", s.blob_max));
    s.radius_min = f.get_real("data.radius_min", s.radius_min);
    s.radius_max = f.get_real("data.radius_max", s.radius_max);
    s.darkness_min = f.get_real("data.darkness_min", s.darkness_min);
    s.darkness_max = f.get_real("data.darkness_max", s.darkness_max);
    s.cluster_spread = f.get_real("data.cluster_spread", s.cluster_spread);
    s.mask_min_fraction = f.get_real("data.mask_min_fraction", s.mask_min_fraction);
    s.mask_max_fraction = f.get_real("data.mask_max_fraction", s.mask_max_fraction);
    s.seed = std::uint64_t(f.get_int("data.seed", std::int64_t(rc.seed)));

    ModelConfig& m = rc.model;
    m.conv_blocks = int(f.get_int("model.conv_blocks", m.conv_blocks));
    m.channels = parse_int_list(
        f.get_str("model.channels", join_int_list(m.channels)), "model.channels");
    m.skip_connections = f.get_bool("model.skip_connections", m.skip_connections);

    TrainConfig& t = rc.train;
    t.optimizer = f.get_str("train.optimizer", t.optimizer);
    t.lr = f.get_real("train.lr", t.lr);
    t.batch_size = int(f.get_int("train.batch_size", t.batch_size));
    t.max_epochs = int(f.get_int("train.max_epochs", t.max_epochs));
    t.early_stop_patience = int(f.get_int("train.early_stop_patience", t.early_stop_patience));
    t.lr_plateau_patience = int(f.get_int("train.lr_plateau_patience", t.lr_plateau_patience));
    t.lr_plateau_factor = f.get_real("train.lr_plateau_factor", t.lr_plateau_factor);
    t.min_delta = f.get_real("train.min_delta", t.min_delta);
    t.augment = f.get_bool("train.augment", t.augment);
    t.augment_cfg.hflip_prob = f.get_real("train.hflip_prob", t.augment_cfg.hflip_prob);
    t.augment_cfg.vflip_prob = f.get_real("train.vflip_prob", t.augment_cfg.vflip_prob);
    t.augment_cfg.brightness_delta =
        f.get_real("train.brightness_delta", t.augment_cfg.brightness_delta);
    t.seed = std::uint64_t(f.get_int("train.seed", std::int64_t(rc.seed)));

    PrototypeLayerConfig& pl = rc.proto;
    pl.m = int(f.get_int("proto.m", pl.m));
    pl.per_class =
        parse_int_list(f.get_str("proto.per_class", join_int_list(pl.per_class)),
                       "proto.per_class");
    pl.ph = int(f.get_int("proto.ph", pl.ph));
    pl.pw = int(f.get_int("proto.pw", pl.pw));
    pl.topk_fraction = f.get_real("proto.topk_fraction", pl.topk_fraction);
    pl.epsilon = f.get_real("proto.epsilon", pl.epsilon);
    if (rc.prototype_count > pl.m)
        throw ConfigError("run.prototype_count: exceeds the prototype count proto.m");

    LossWeights& lw = rc.loss_weights;
    lw.l1 = f.get_real("loss.l1", lw.l1);
    lw.l2 = f.get_real("loss.l2", lw.l2);
    lw.l3 = f.get_real("loss.l3", lw.l3);

    PPNetSchedule& ps = rc.ppnet;
    ps.cycles = int(f.get_int("ppnet.cycles", ps.cycles));
    ps.phase1_epochs = int(f.get_int("ppnet.phase1_epochs", ps.phase1_epochs));
    ps.optimizer = f.get_str("ppnet.optimizer", ps.optimizer);
    ps.lr = f.get_real("ppnet.lr", ps.lr);
    ps.batch_size = int(f.get_int("ppnet.batch_size", ps.batch_size));
    ps.augment = f.get_bool("ppnet.augment", ps.augment);
    ps.augment_cfg.hflip_prob = f.get_real("ppnet.hflip_prob", ps.augment_cfg.hflip_prob);
    ps.augment_cfg.vflip_prob = f.get_real("ppnet.vflip_prob", ps.augment_cfg.vflip_prob);
    ps.augment_cfg.brightness_delta =
        f.get_real("ppnet.brightness_delta", ps.augment_cfg.brightness_delta);
    ps.sparsity_weight = f.get_real("ppnet.sparsity_weight", ps.sparsity_weight);
    ps.ista_max_iters = int(f.get_int("ppnet.ista_max_iters", ps.ista_max_iters));
    ps.ista_tol = f.get_real("ppnet.ista_tol", ps.ista_tol);
    ps.seed = std::uint64_t(f.get_int("ppnet.seed", std::int64_t(rc.seed)));

    MethodConfig& mc = rc.methods;
    mc.gradient_target = parse_target(
        f.get_str("methods.gradient_target", target_name(mc.gradient_target)),
        "methods.gradient_target");
    mc.perturbation_target = parse_target(
        f.get_str("methods.perturbation_target", target_name(mc.perturbation_target)),
        "methods.perturbation_target");
    mc.smoothgrad.noise_sigma =
        f.get_real("methods.smoothgrad_sigma", mc.smoothgrad.noise_sigma);
    mc.smoothgrad.n_samples =
        int(f.get_int("methods.smoothgrad_samples", mc.smoothgrad.n_samples));
    mc.integrated_gradients.n_steps =
        int(f.get_int("methods.ig_steps", mc.integrated_gradients.n_steps));
    mc.occlusion.window_h = int(f.get_int("methods.occlusion_window_h", mc.occlusion.window_h));
    mc.occlusion.window_w = int(f.get_int("methods.occlusion_window_w", mc.occlusion.window_w));
    mc.occlusion.stride = int(f.get_int("methods.occlusion_stride", mc.occlusion.stride));
    mc.occlusion.fill_value =
        float(f.get_real("methods.occlusion_fill", mc.occlusion.fill_value));
    mc.gradient_shap.n_samples =
        int(f.get_int("methods.gshap_samples", mc.gradient_shap.n_samples));
    mc.gradient_shap.noise_sigma =
        f.get_real("methods.gshap_sigma", mc.gradient_shap.noise_sigma);
    mc.gradient_shap.finite_differences =
        f.get_bool("methods.gshap_fd", mc.gradient_shap.finite_differences);
    mc.gradient_shap.fd_step = f.get_real("methods.gshap_fd_step", mc.gradient_shap.fd_step);
    mc.lime.n_superpixels = int(f.get_int("methods.lime_superpixels", mc.lime.n_superpixels));
    mc.lime.n_samples = int(f.get_int("methods.lime_samples", mc.lime.n_samples));
    mc.lime.kernel_width = f.get_real("methods.lime_kernel_width", mc.lime.kernel_width);
    mc.lime.ridge = f.get_real("methods.lime_ridge", mc.lime.ridge);
    mc.lime.fill_value = float(f.get_real("methods.lime_fill", mc.lime.fill_value));
    mc.seed = std::uint64_t(f.get_int("methods.seed", std::int64_t(rc.seed)));

    MetricConfig& ec = rc.metrics;
    ec.binarize_fraction = f.get_real("metrics.binarize_fraction", ec.binarize_fraction);
    ec.auc_thresholds = int(f.get_int("metrics.auc_thresholds", ec.auc_thresholds));
    ec.borji_negative_samples =
        int(f.get_int("metrics.borji_negative_samples", ec.borji_negative_samples));
    ec.auc_repeats = int(f.get_int("metrics.auc_repeats", ec.auc_repeats));
    std::string mode = f.get_str(
        "metrics.sauc_mode", ec.sauc_mode == SaucMode::CenterPrior ? "center" : "crossimage");
    if (mode == "center")
        ec.sauc_mode = SaucMode::CenterPrior;
    else if (mode == "crossimage")
        ec.sauc_mode = SaucMode::CrossImage;
    else
        throw ConfigError("metrics.sauc_mode: expected `center` or `crossimage`");
    ec.epsilon = f.get_real("metrics.epsilon", ec.epsilon);
    ec.mae_signed = f.get_bool("metrics.mae_signed", ec.mae_signed);
    ec.positive_part_only = f.get_bool("metrics.positive_part_only", ec.positive_part_only);
    ec.seed = std::uint64_t(f.get_int("metrics.seed", std::int64_t(rc.seed)));
    return rc;
}

Config serialize_run_config(const RunConfig& rc) {
    Config f;
    f.set("run.out_dir", rc.out_dir);
    f.set_int("run.seed", std::int64_t(rc.seed));
    f.set_int("run.jobs", rc.jobs);
    f.set_int("run.explain_count", rc.explain_count);
    f.set_int("run.prototype_count", rc.prototype_count);
    f.set_int("run.overlay_images", rc.overlay_images);
    f.set_real("run.nemenyi_alpha", rc.nemenyi_alpha);
    f.set_bool("run.export_json", rc.export_json);
    f.set("run.ig_baseline", rc.ig_baseline);

    const SyntheticConfig& s = rc.synth;
    f.set_int("data.n_train", s.n_train);
    f.set_int("data.n_val", s.n_val);
    f.set_int("data.n_test", s.n_test);
    f.set_real("data.balance", s.balance);
    f.set_int("data.noise_octaves", s.noise_octaves);
    f.set_real("data.fine_noise", s.fine_noise);
    f.set_int("data.blob_min", s.blob_min);
    f.set_int("data.blob_max", s.blob_max);
    f.set_real("data.radius_min", s.radius_min);
    f.set_real("data.radius_max", s.radius_max);
    f.set_real("data.darkness_min", s.darkness_min);
    f.set_real("data.darkness_max", s.darkness_max);
    f.set_real("data.cluster_spread", s.cluster_spread);
    f.set_real("data.mask_min_fraction", s.mask_min_fraction);
    f.set_real("data.mask_max_fraction", s.mask_max_fraction);
    f.set_int("data.seed", std::int64_t(s.seed));

    f.set_int("model.conv_blocks", rc.model.conv_blocks);
    f.set("model.channels", join_int_list(rc.model.channels));
    f.set_bool("model.skip_connections", rc.model.skip_connections);

    const TrainConfig& t = rc.train;
    f.set("train.optimizer", t.optimizer);
    f.set_real("train.lr", t.lr);
    f.set_int("train.batch_size", t.batch_size);
    f.set_int("train.max_epochs", t.max_epochs);
    f.set_int("train.early_stop_patience", t.early_stop_patience);
    f.set_int("train.lr_plateau_patience", t.lr_plateau_patience);
    f.set_real("train.lr_plateau_factor", t.lr_plateau_factor);
    f.set_real("train.min_delta", t.min_delta);
    f.set_bool("train.augment", t.augment);
    f.set_real("train.hflip_prob", t.augment_cfg.hflip_prob);
    f.set_real("train.vflip_prob", t.augment_cfg.vflip_prob);
    f.set_real("train.brightness_delta", t.augment_cfg.brightness_delta);
    f.set_int("train.seed", std::int64_t(t.seed));

    f.set_int("proto.m", rc.proto.m);
    f.set("proto.per_class", join_int_list(rc.proto.per_class));
    f.set_int("proto.ph", rc.proto.ph);
    f.set_int("proto.pw", rc.proto.pw);
    f.set_real("proto.topk_fraction", rc.proto.topk_fraction);
    f.set_real("proto.epsilon", rc.proto.epsilon);

    f.set_real("loss.l1", rc.loss_weights.l1);
    f.set_real("loss.l2", rc.loss_weights.l2);
    f.set_real("loss.l3", rc.loss_weights.l3);

    const PPNetSchedule& ps = rc.ppnet;
    f.set_int("ppnet.cycles", ps.cycles);
    f.set_int("ppnet.phase1_epochs", ps.phase1_epochs);
    f.set("ppnet.optimizer", ps.optimizer);
    f.set_real("ppnet.lr", ps.lr);
    f.set_int("ppnet.batch_size", ps.batch_size);
    f.set_bool("ppnet.augment", ps.augment);
    f.set_real("ppnet.hflip_prob", ps.augment_cfg.hflip_prob);
    f.set_real("ppnet.vflip_prob", ps.augment_cfg.vflip_prob);
    f.set_real("ppnet.brightness_delta", ps.augment_cfg.brightness_delta);
    f.set_real("ppnet.sparsity_weight", ps.sparsity_weight);
    f.set_int("ppnet.ista_max_iters", ps.ista_max_iters);
    f.set_real("ppnet.ista_tol", ps.ista_tol);
    f.set_int("ppnet.seed", std::int64_t(ps.seed));

    const MethodConfig& mc = rc.methods;
    f.set("methods.gradient_target", target_name(mc.gradient_target));
    f.set("methods.perturbation_target", target_name(mc.perturbation_target));
    f.set_real("methods.smoothgrad_sigma", mc.smoothgrad.noise_sigma);
    f.set_int("methods.smoothgrad_samples", mc.smoothgrad.n_samples);
    f.set_int("methods.ig_steps", mc.integrated_gradients.n_steps);
    f.set_int("methods.occlusion_window_h", mc.occlusion.window_h);
    f.set_int("methods.occlusion_window_w", mc.occlusion.window_w);
    f.set_int("methods.occlusion_stride", mc.occlusion.stride);
    f.set_real("methods.occlusion_fill", mc.occlusion.fill_value);
    f.set_int("methods.gshap_samples", mc.gradient_shap.n_samples);
    f.set_real("methods.gshap_sigma", mc.gradient_shap.noise_sigma);
    f.set_bool("methods.gshap_fd", mc.gradient_shap.finite_differences);
    f.set_real("methods.gshap_fd_step", mc.gradient_shap.fd_step);
    f.set_int("methods.lime_superpixels", mc.lime.n_superpixels);
    f.set_int("methods.lime_samples", mc.lime.n_samples);
    f.set_real("methods.lime_kernel_width", mc.lime.kernel_width);
    f.set_real("methods.lime_ridge", mc.lime.ridge);
    f.set_real("methods.lime_fill", mc.lime.fill_value);
    f.set_int("methods.seed", std::int64_t(mc.seed));

    const MetricConfig& ec = rc.metrics;
    f.set_real("metrics.binarize_fraction", ec.binarize_fraction);
    f.set_int("metrics.auc_thresholds", ec.auc_thresholds);
    f.set_int("metrics.borji_negative_samples", ec.borji_negative_samples);
    f.set_int("metrics.auc_repeats", ec.auc_repeats);
    f.set("metrics.sauc_mode",
          ec.sauc_mode == SaucMode::CenterPrior ? "center" : "crossimage");
    f.set_real("metrics.epsilon", ec.epsilon);
    f.set_bool("metrics.mae_signed", ec.mae_signed);
    f.set_bool("metrics.positive_part_only", ec.positive_part_only);
    f.set_int("metrics.seed", std::int64_t(ec.seed));
    return f;
}

void cmd_gen_data(const RunConfig& rc) {
    Paths p = layout(rc);
    fs::create_directories(p.root);
    Dataset ds = generate_synthetic(rc.synth);
    save_dataset_cache(p.dataset.string(), ds, rc.synth);
}

void cmd_train(const RunConfig& rc) {
    Paths p = layout(rc);
    need(p.dataset, "train", "gen-data");
    Dataset ds = load_dataset_cache(p.dataset.string());
    Classifier c = make_classifier(rc.model, Rng::derive(rc.seed, 17, 0, 0).next_u64());
    TrainResult res = train_classifier(c, ds.train.patches, ds.val.patches, rc.train);
    save_checkpoint(p.cnn_ckpt.string(), c.g);
    Csv log;
    log.header = {"epoch", "train_loss", "val_accuracy", "lr"};
    for (const EpochLog& e : res.log)
        log.rows.push_back({std::to_string(e.epoch), csv_real(e.train_loss),
                            csv_real(e.val_accuracy), csv_real(e.lr)});
    log.write_file(p.cnn_log.string());
}

void cmd_train_ppnet(const RunConfig& rc) {
    Paths p = layout(rc);
    need(p.dataset, "train-ppnet", "gen-data");
    Dataset ds = load_dataset_cache(p.dataset.string());
    ProtoPNet net =
        make_protopnet(rc.model, rc.proto, Rng::derive(rc.seed, 23, 0, 0).next_u64());
    PPNetTrainResult res =
        train_protopnet(net, ds.train.patches, ds.val.patches, rc.loss_weights, rc.ppnet);
    save_checkpoint(p.ppnet_ckpt.string(), net.g);
    save_prototype_bank(p.ppnet_bank.string(), net);
    Csv log;
    log.header = {"cycle", "phase", "epoch", "loss", "ce",
                  "clst",  "sep",   "val_accuracy", "lr"};
    for (const PPNetLogRow& r : res.log)
        log.rows.push_back({std::to_string(r.cycle), std::to_string(r.phase),
                            std::to_string(r.epoch), csv_real(r.loss), csv_real(r.ce),
                            csv_real(r.clst), csv_real(r.sep), csv_real(r.val_accuracy),
                            csv_real(r.lr)});
    log.write_file(p.ppnet_log.string());
}

void cmd_explain(const RunConfig& rc) {
    Paths p = layout(rc);
    need(p.dataset, "explain", "gen-data");
    need(p.cnn_ckpt, "explain", "train");
    need(p.ppnet_ckpt, "explain", "train-ppnet");
    need(p.ppnet_bank, "explain", "train-ppnet");
    Dataset ds = load_dataset_cache(p.dataset.string());
    const std::vector<Patch>& test = ds.test.patches;
    int n = rc.explain_count == 0 ? int(test.size())
                                  : std::min<int>(rc.explain_count, int(test.size()));
    if (n == 0) throw ConfigError("explain: the test split is empty");
    int slots = rc.prototype_count;

    std::vector<HeatmapRecord> method_recs(std::size_t(n) * kMethodCount);
    std::vector<HeatmapRecord> proto_recs(std::size_t(n) * std::size_t(slots));

    int jobs = std::max(1, std::min(rc.jobs, n));
    run_workers(jobs, [&](int w) {
        // each worker drives its own model instances
        Classifier c = make_classifier(rc.model, Rng::derive(rc.seed, 17, 0, 0).next_u64());
        load_checkpoint(p.cnn_ckpt.string(), c.g);
        ProtoPNet net =
            make_protopnet(rc.model, rc.proto, Rng::derive(rc.seed, 23, 0, 0).next_u64());
        load_checkpoint(p.ppnet_ckpt.string(), net.g);
        load_prototype_bank(p.ppnet_bank.string(), net);
        ModelRef ref{&c.g, c.input_node, c.logits_node, c.loss_node};

        for (int i = w; i < n; i += jobs) {
            std::vector<Patch> one{test[std::size_t(i)]};
            auto cnn_probs = predict(c, one, 1);
            int cnn_pred = cnn_probs[0][1] > cnn_probs[0][0] ? 1 : 0;
            for (int m = 0; m < kMethodCount; ++m)
                method_recs[std::size_t(i) * kMethodCount + std::size_t(m)] =
                    compute_saliency(ref, Method(m), test[std::size_t(i)].pixels,
                                     std::uint32_t(i), cnn_pred, rc.methods);

            auto pp = predict_protopnet(net, one, 1);
            int pp_pred = pp.probs[0][1] > pp.probs[0][0] ? 1 : 0;
            std::vector<PrototypeAttribution> attrs =
                prototype_attributions(net, test[std::size_t(i)], slots);
            for (int s = 0; s < slots; ++s) {
                HeatmapRecord hr;
                hr.image_id = std::uint32_t(i);
                hr.source_kind = HeatmapRecord::Source::Prototype;
                hr.source_id = std::uint32_t(s);  // importance slot, not bank id
                hr.target_class = pp_pred;
                hr.height = hr.width = kPatchSize;
                hr.is_absolute = true;
                hr.values = attrs[std::size_t(s)].upsampled.data;
                proto_recs[std::size_t(i) * std::size_t(slots) + std::size_t(s)] =
                    std::move(hr);
            }
        }
    });

    write_heatmaps(p.methods_bin.string(), method_recs);
    write_heatmaps(p.protos_bin.string(), proto_recs);
    if (rc.export_json) {
        export_heatmaps_json(p.methods_json.string(), method_recs);
        export_heatmaps_json(p.protos_json.string(), proto_recs);
    }
}

void cmd_evaluate(const RunConfig& rc) {
    Paths p = layout(rc);
    need(p.methods_bin, "evaluate", "explain");
    need(p.protos_bin, "evaluate", "explain");
    std::vector<HeatmapRecord> method_recs = read_heatmaps(p.methods_bin.string());
    std::vector<HeatmapRecord> proto_recs = read_heatmaps(p.protos_bin.string());
    if (method_recs.empty() || proto_recs.empty())
        throw MissingPrerequisiteError("evaluate: empty heatmap container");

    std::map<std::uint32_t, std::vector<const HeatmapRecord*>> by_image_m, by_image_p;
    for (const HeatmapRecord& r : method_recs) by_image_m[r.image_id].push_back(&r);
    for (const HeatmapRecord& r : proto_recs) by_image_p[r.image_id].push_back(&r);
    std::vector<std::uint32_t> images;
    for (auto& [id, recs] : by_image_m) {
        if (!by_image_p.count(id))
            throw MissingPrerequisiteError(
                "evaluate: no prototype maps for image " + std::to_string(id));
        std::sort(recs.begin(), recs.end(), [](auto* a, auto* b) {
            return a->source_id < b->source_id;
        });
        auto& pr = by_image_p[id];
        std::sort(pr.begin(), pr.end(), [](auto* a, auto* b) {
            return a->source_id < b->source_id;
        });
        images.push_back(id);
    }

    MetricConfig base = rc.metrics;
    DenseMap center;
    if (rc.ig_baseline == "center") {
        const HeatmapRecord& first = *by_image_m.begin()->second.front();
        center = center_prior(int(first.height), int(first.width));
        base.ig_baseline = &center;
    }

    // crossimage negatives: pool each slot's fixations over the other images
    bool crossimage = base.sauc_mode == SaucMode::CrossImage;
    std::map<std::uint32_t, std::vector<BinaryFixationMap>> fix_by_image;
    if (crossimage) {
        for (std::uint32_t id : images) {
            std::vector<BinaryFixationMap> fm;
            for (const HeatmapRecord* a : by_image_p[id])
                fm.push_back(binarize_gt(
                    normalize_map(*a, NormMode::MinMax01, base.positive_part_only),
                    base.binarize_fraction));
            fix_by_image[id] = std::move(fm);
        }
    }

    struct Row {
        std::vector<std::string> fields;
    };
    std::vector<std::vector<std::vector<std::string>>> ok_rows(images.size());
    std::vector<std::vector<std::vector<std::string>>> miss_rows(images.size());

    int jobs = std::max(1, std::min<int>(rc.jobs, int(images.size())));
    run_workers(jobs, [&](int w) {
        for (std::size_t ii = std::size_t(w); ii < images.size(); ii += std::size_t(jobs)) {
            std::uint32_t id = images[ii];
            const auto& meths = by_image_m[id];
            const auto& prots = by_image_p[id];
            for (std::size_t s = 0; s < prots.size(); ++s) {
                MetricConfig cfg = base;
                std::vector<BinaryFixationMap> pool;
                if (crossimage) {
                    for (std::uint32_t other : images) {
                        if (other == id) continue;
                        pool.push_back(fix_by_image[other][s]);
                    }
                    cfg.crossimage_fixations = &pool;
                }
                for (const HeatmapRecord* mrec : meths) {
                    std::vector<MetricResult> results = evaluate_pair(*mrec, *prots[s], cfg);
                    for (const MetricResult& r : results) {
                        std::vector<std::string> row{
                            std::to_string(id), std::to_string(mrec->source_id),
                            std::to_string(prots[s]->source_id),
                            std::to_string(int(r.id))};
                        if (r.missing) {
                            std::string note = r.note;
                            for (char& ch : note)
                                if (ch == ',' || ch == '\n') ch = ';';
                            row.push_back(note);
                            miss_rows[ii].push_back(std::move(row));
                        } else {
                            row.push_back(csv_real(r.value));
                            row.push_back(orientation_name(r.orientation));
                            ok_rows[ii].push_back(std::move(row));
                        }
                    }
                }
            }
        }
    });

    Csv out;
    out.header = {"image_id", "method_id", "prototype_id", "metric_id", "value",
                  "orientation"};
    for (auto& bucket : ok_rows)
        for (auto& row : bucket) out.rows.push_back(std::move(row));
    out.write_file(p.metrics_csv.string());

    Csv missing;
    missing.header = {"image_id", "method_id", "prototype_id", "metric_id", "note"};
    for (auto& bucket : miss_rows)
        for (auto& row : bucket) missing.rows.push_back(std::move(row));
    missing.write_file(p.missing_csv.string());
}

namespace {

struct RankGroup {
    std::string name;
    RankTable table;
    FriedmanResult friedman;
    NemenyiResult nemenyi;
};

// mean metric value per (method, metric) cell for one prototype slot
ScoreTable slot_scores(const Csv& csv, const std::vector<int>& methods, int slot) {
    int ci = csv.column("image_id");
    (void)ci;
    int cm = csv.column("method_id");
    int cp = csv.column("prototype_id");
    int cd = csv.column("metric_id");
    int cv = csv.column("value");
    ScoreTable s;
    s.k = int(methods.size());
    s.n = kMetricCount;
    for (int m : methods) s.method_names.push_back(method_name(Method(m)));
    for (int d = 0; d < kMetricCount; ++d) {
        s.context_names.push_back(metric_name(MetricId(d)));
        s.orientations.push_back(metric_orientation(MetricId(d)));
    }
    std::vector<double> sum(std::size_t(s.k) * kMetricCount, 0.0);
    std::vector<int> cnt(std::size_t(s.k) * kMetricCount, 0);
    for (const auto& row : csv.rows) {
        if (slot >= 0 && std::stoi(row[std::size_t(cp)]) != slot) continue;
        int mid = std::stoi(row[std::size_t(cm)]);
        auto it = std::find(methods.begin(), methods.end(), mid);
        if (it == methods.end()) continue;
        std::size_t at = std::size_t(it - methods.begin()) * kMetricCount +
                         std::size_t(std::stoi(row[std::size_t(cd)]));
        sum[at] += std::stod(row[std::size_t(cv)]);
        cnt[at] += 1;
    }
    s.values.resize(sum.size());
    for (std::size_t i = 0; i < sum.size(); ++i)
        s.values[i] = cnt[i] ? sum[i] / cnt[i]
                             : std::numeric_limits<double>::quiet_NaN();
    return s;
}

}  // namespace

void cmd_rank(const RunConfig& rc) {
    Paths p = layout(rc);
    need(p.metrics_csv, "rank", "evaluate");
    Csv csv = Csv::read_file(p.metrics_csv.string());
    int cm = csv.column("method_id");
    int cp = csv.column("prototype_id");
    std::set<int> method_set, slot_set;
    for (const auto& row : csv.rows) {
        method_set.insert(std::stoi(row[std::size_t(cm)]));
        slot_set.insert(std::stoi(row[std::size_t(cp)]));
    }
    if (method_set.size() < 2)
        throw ConfigError("rank: need at least two methods in the metrics table");
    std::vector<int> methods(method_set.begin(), method_set.end());
    std::vector<int> slots(slot_set.begin(), slot_set.end());

    std::vector<RankGroup> groups;
    for (int slot : slots) {
        RankGroup g;
        g.name = "proto_" + std::to_string(slot);
        g.table = rank_methods(slot_scores(csv, methods, slot));
        g.friedman = friedman_test(g.table);
        g.nemenyi = nemenyi_test(g.table, rc.nemenyi_alpha);
        groups.push_back(std::move(g));
    }
    // pooled: every (slot, metric) pair is one context
    {
        ScoreTable pooled;
        pooled.k = int(methods.size());
        for (int m : methods) pooled.method_names.push_back(method_name(Method(m)));
        for (int slot : slots) {
            ScoreTable part = slot_scores(csv, methods, slot);
            for (int c = 0; c < part.n; ++c) {
                pooled.context_names.push_back("proto_" + std::to_string(slot) + ":" +
                                               part.context_names[std::size_t(c)]);
                pooled.orientations.push_back(part.orientations[std::size_t(c)]);
            }
            pooled.n += part.n;
        }
        pooled.values.resize(std::size_t(pooled.k) * std::size_t(pooled.n));
        int base_col = 0;
        for (int slot : slots) {
            ScoreTable part = slot_scores(csv, methods, slot);
            for (int m = 0; m < part.k; ++m)
                for (int c = 0; c < part.n; ++c)
                    pooled.values[std::size_t(m) * std::size_t(pooled.n) +
                                  std::size_t(base_col + c)] = part.at(m, c);
            base_col += part.n;
        }
        RankGroup g;
        g.name = "overall";
        g.table = rank_methods(pooled);
        g.friedman = friedman_test(g.table);
        g.nemenyi = nemenyi_test(g.table, rc.nemenyi_alpha);
        groups.push_back(std::move(g));
    }

    Csv ranks;
    ranks.header = {"method_id", "method"};
    for (const RankGroup& g : groups) ranks.header.push_back(g.name);
    for (std::size_t m = 0; m < methods.size(); ++m) {
        std::vector<std::string> row{std::to_string(methods[m]),
                                     method_name(Method(methods[m]))};
        for (const RankGroup& g : groups) row.push_back(csv_real(g.table.average_rank[m]));
        ranks.rows.push_back(std::move(row));
    }
    ranks.write_file(p.ranks_csv.string());

    Csv detail;
    detail.header = {"group", "context", "method_id", "method", "rank"};
    for (const RankGroup& g : groups)
        for (int c = 0; c < g.table.n; ++c)
            for (std::size_t m = 0; m < methods.size(); ++m)
                detail.rows.push_back({g.name, g.table.context_names[std::size_t(c)],
                                       std::to_string(methods[m]),
                                       method_name(Method(methods[m])),
                                       csv_real(g.table.at(int(m), c))});
    detail.write_file(p.rank_contexts_csv.string());

    Csv fr;
    fr.header = {"group", "k", "n", "chi_square", "f_statistic", "df1", "df2",
                 "p_value", "degenerate", "q_critical", "cd", "alpha",
                 "dropped_contexts"};
    for (const RankGroup& g : groups)
        fr.rows.push_back({g.name, std::to_string(g.table.k), std::to_string(g.table.n),
                           csv_real(g.friedman.chi_square), csv_real(g.friedman.f_statistic),
                           std::to_string(g.friedman.df1), std::to_string(g.friedman.df2),
                           csv_real(g.friedman.p_value),
                           g.friedman.degenerate ? "true" : "false",
                           csv_real(g.nemenyi.q_critical), csv_real(g.nemenyi.cd),
                           csv_real(g.nemenyi.alpha),
                           std::to_string(g.table.dropped_columns.size())});
    fr.write_file(p.friedman_csv.string());

    Csv pairs;
    pairs.header = {"group", "method_a", "method_b", "avg_rank_a", "avg_rank_b",
                    "abs_diff",  "cd"};
    for (const RankGroup& g : groups)
        for (auto [a, b] : g.nemenyi.significant_pairs)
            pairs.rows.push_back(
                {g.name, method_name(Method(methods[std::size_t(a)])),
                 method_name(Method(methods[std::size_t(b)])),
                 csv_real(g.table.average_rank[std::size_t(a)]),
                 csv_real(g.table.average_rank[std::size_t(b)]),
                 csv_real(std::abs(g.table.average_rank[std::size_t(a)] -
                                   g.table.average_rank[std::size_t(b)])),
                 csv_real(g.nemenyi.cd)});
    pairs.write_file(p.pairs_csv.string());
}

void cmd_report(const RunConfig& rc) {
    Paths p = layout(rc);
    need(p.dataset, "report", "gen-data");
    need(p.cnn_ckpt, "report", "train");
    need(p.ppnet_ckpt, "report", "train-ppnet");
    need(p.ppnet_bank, "report", "train-ppnet");
    need(p.ranks_csv, "report", "rank");
    need(p.friedman_csv, "report", "rank");
    need(p.pairs_csv, "report", "rank");

    Dataset ds = load_dataset_cache(p.dataset.string());
    const std::vector<Patch>& test = ds.test.patches;
    Classifier c = make_classifier(rc.model, Rng::derive(rc.seed, 17, 0, 0).next_u64());
    load_checkpoint(p.cnn_ckpt.string(), c.g);
    ProtoPNet net =
        make_protopnet(rc.model, rc.proto, Rng::derive(rc.seed, 23, 0, 0).next_u64());
    load_checkpoint(p.ppnet_ckpt.string(), net.g);
    load_prototype_bank(p.ppnet_bank.string(), net);

    std::vector<int> labels;
    for (const Patch& t : test) labels.push_back(t.label);
    auto cnn_rows = predict(c, test);
    auto pp = predict_protopnet(net, test);
    std::vector<double> cnn_probs, pp_probs;
    for (auto& r : cnn_rows) cnn_probs.push_back(r[1]);
    for (auto& r : pp.probs) pp_probs.push_back(r[1]);

    PerformanceMetrics cnn_perf = performance_metrics(cnn_probs, labels);
    PerformanceMetrics pp_perf = performance_metrics(pp_probs, labels);
    auto perf_row = [](const std::string& name, const PerformanceMetrics& m) {
        std::vector<std::string> row{name, csv_real(m.accuracy)};
        row.push_back(m.precision_defined ? csv_real(m.precision) : "");
        row.push_back(m.recall_defined ? csv_real(m.recall) : "");
        row.push_back(m.auc_defined ? csv_real(m.auc) : "");
        return row;
    };
    Csv perf;
    perf.header = {"model", "accuracy", "precision", "recall", "auc"};
    perf.rows.push_back(perf_row("cnn", cnn_perf));
    perf.rows.push_back(perf_row("protopnet", pp_perf));
    perf.write_file(p.performance_csv.string());

    PerformanceMetrics agree_cnn_truth = model_agreement(cnn_probs, pp_probs);
    PerformanceMetrics agree_pp_truth = model_agreement(pp_probs, cnn_probs);
    Csv agree;
    agree.header = {"truth", "scored", "accuracy", "precision", "recall", "auc"};
    auto agree_row = [&](const std::string& truth, const std::string& scored,
                         const PerformanceMetrics& m) {
        std::vector<std::string> row{truth, scored, csv_real(m.accuracy)};
        row.push_back(m.precision_defined ? csv_real(m.precision) : "");
        row.push_back(m.recall_defined ? csv_real(m.recall) : "");
        row.push_back(m.auc_defined ? csv_real(m.auc) : "");
        return row;
    };
    agree.rows.push_back(agree_row("cnn", "protopnet", agree_cnn_truth));
    agree.rows.push_back(agree_row("protopnet", "cnn", agree_pp_truth));
    agree.write_file(p.agreement_csv.string());

    // overlays: original plus every heatmap for the first few test images
    int rendered = 0;
    if (rc.overlay_images > 0 && fs::exists(p.methods_bin) && fs::exists(p.protos_bin)) {
        fs::create_directories(p.overlays);
        std::vector<HeatmapRecord> method_recs = read_heatmaps(p.methods_bin.string());
        std::vector<HeatmapRecord> proto_recs = read_heatmaps(p.protos_bin.string());
        for (int i = 0; i < rc.overlay_images && i < int(test.size()); ++i) {
            std::vector<Image> cells;
            Image base = patch_to_image(test[std::size_t(i)]);
            cells.push_back(base);
            auto add_overlays = [&](const std::vector<HeatmapRecord>& recs) {
                std::vector<const HeatmapRecord*> mine;
                for (const HeatmapRecord& r : recs)
                    if (r.image_id == std::uint32_t(i)) mine.push_back(&r);
                std::sort(mine.begin(), mine.end(), [](auto* a, auto* b) {
                    return a->source_id < b->source_id;
                });
                for (const HeatmapRecord* r : mine)
                    cells.push_back(r->is_absolute ? overlay_absolute(base, r->values)
                                                   : overlay_signed(base, r->values));
            };
            add_overlays(method_recs);
            add_overlays(proto_recs);
            if (cells.size() == 1) continue;
            Image grid = tile_grid(cells, 5);
            char name[32];
            std::snprintf(name, sizeof name, "image_%03d.png", i);
            write_image((p.overlays / name).string(), grid);
            ++rendered;
        }
    }

    Csv ranks = Csv::read_file(p.ranks_csv.string());
    Csv friedman = Csv::read_file(p.friedman_csv.string());
    Csv pairs = Csv::read_file(p.pairs_csv.string());

    std::ostringstream rep;
    rep << "# evaluation report\n\n";
    rep << "test images: " << test.size() << "\n\n";

    rep << "## classification performance\n";
    rep << "model       accuracy  precision  recall    auc\n";
    auto perf_line = [&](const std::string& name, const PerformanceMetrics& m) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%-10s  %8s  %9s  %6s  %6s\n", name.c_str(),
                      fmt4(m.accuracy).c_str(),
                      m.precision_defined ? fmt4(m.precision).c_str() : "-",
                      m.recall_defined ? fmt4(m.recall).c_str() : "-",
                      m.auc_defined ? fmt4(m.auc).c_str() : "-");
        rep << buf;
    };
    perf_line("cnn", cnn_perf);
    perf_line("protopnet", pp_perf);

    rep << "\n## model agreement (rows: truth -> scored)\n";
    perf_line("cnn->pp", agree_cnn_truth);
    perf_line("pp->cnn", agree_pp_truth);

    rep << "\n## average ranks (1 = best)\n";
    for (const std::string& h : ranks.header) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%-14s", h.c_str());
        rep << buf;
    }
    rep << "\n";
    for (const auto& row : ranks.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            std::string cell = row[i];
            if (i >= 2) cell = fmt4(std::stod(cell));
            char buf[32];
            std::snprintf(buf, sizeof buf, "%-14s", cell.c_str());
            rep << buf;
        }
        rep << "\n";
    }

    rep << "\n## friedman / nemenyi\n";
    int gc = friedman.column("group"), kc = friedman.column("k"), nc = friedman.column("n");
    int xc = friedman.column("chi_square"), pc = friedman.column("p_value");
    int cdc = friedman.column("cd"), qc = friedman.column("q_critical");
    for (const auto& row : friedman.rows) {
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "%-10s k=%s n=%-3s chi2=%-9s p=%-12s q=%-8s cd=%s\n",
                      row[std::size_t(gc)].c_str(), row[std::size_t(kc)].c_str(),
                      row[std::size_t(nc)].c_str(),
                      fmt4(std::stod(row[std::size_t(xc)])).c_str(),
                      csv_real(std::stod(row[std::size_t(pc)])).c_str(),
                      fmt4(std::stod(row[std::size_t(qc)])).c_str(),
                      fmt4(std::stod(row[std::size_t(cdc)])).c_str());
        rep << buf;
    }
    rep << "\nnote: for k=8, n=10 the critical difference is q(8)*sqrt(8*9/60) = "
           "3.3201 with q(8) = 3.031. A figure of 2.949 sometimes quoted for this "
           "design equals the tabulated q for k=7 and does not follow from the "
           "formula above.\n";

    rep << "\n## significant pairs (|avg rank diff| > cd, alpha=" << fmt4(rc.nemenyi_alpha)
        << ")\n";
    if (pairs.rows.empty()) {
        rep << "none\n";
    } else {
        for (const auto& row : pairs.rows) {
            char buf[256];
            std::snprintf(buf, sizeof buf, "%-10s %s (%s) vs %s (%s), diff %s > cd %s\n",
                          row[0].c_str(), row[1].c_str(), fmt4(std::stod(row[3])).c_str(),
                          row[2].c_str(), fmt4(std::stod(row[4])).c_str(),
                          fmt4(std::stod(row[5])).c_str(), fmt4(std::stod(row[6])).c_str());
            rep << buf;
        }
    }

    rep << "\n## overlays\n";
    rep << "wrote " << rendered << " overlay grids to " << p.overlays.filename().string()
        << "/\n";

    std::ofstream out(p.report_txt, std::ios::trunc);
    if (!out) throw Error("cannot write report: " + p.report_txt.string());
    out << rep.str();
}

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"prototype vs saliency evaluation pipeline"};
    app.require_subcommand(1);
    std::string config_path, out_dir;
    std::int64_t seed = -1;
    int jobs = 0;
    app.add_option("-c,--config", config_path, "run configuration file");
    app.add_option("--seed", seed, "override run.seed");
    app.add_option("--out", out_dir, "override run.out_dir");
    app.add_option("--jobs", jobs, "override run.jobs");

    struct Verb {
        const char* name;
        const char* help;
        void (*fn)(const RunConfig&);
    };
    static const Verb verbs[] = {
        {"gen-data", "synthesize the dataset cache", cmd_gen_data},
        {"train", "train the cnn classifier", cmd_train},
        {"train-ppnet", "train the prototype network", cmd_train_ppnet},
        {"explain", "write method and prototype heatmaps for the test split", cmd_explain},
        {"evaluate", "score every (method, prototype) pair", cmd_evaluate},
        {"rank", "rank methods and run the friedman analysis", cmd_rank},
        {"report", "write performance tables, overlays and the text report", cmd_report},
    };
    for (const Verb& v : verbs) app.add_subcommand(v.name, v.help)->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    try {
        Config file;
        if (!config_path.empty()) file = Config::parse_file(config_path);
        if (seed >= 0) file.set_int("run.seed", seed);
        if (!out_dir.empty()) file.set("run.out_dir", out_dir);
        if (jobs > 0) file.set_int("run.jobs", jobs);
        RunConfig rc = parse_run_config(file);
        for (const Verb& v : verbs)
            if (app.got_subcommand(v.name)) {
                v.fn(rc);
                return 0;
            }
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const MissingPrerequisiteError& e) {
        std::fprintf(stderr, "missing prerequisite: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace protosal
