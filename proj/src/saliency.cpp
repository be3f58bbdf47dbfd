#include "protosal/saliency.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "protosal/common.hpp"
#include "protosal/rng.hpp"

namespace protosal {

namespace {

// Perturbed copies are evaluated in fixed-size chunks so peak activation
// memory stays flat no matter how many samples a method draws.
constexpr std::int64_t kChunk = 16;

const char* const kMethodNames[kMethodCount] = {
    "Deconvolution", "GuidedBackprop", "Saliency",  "GradientShap",
    "IntegratedGradients", "Lime",     "Occlusion", "SmoothGrad",
};

std::string shape_str(const std::vector<std::int64_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i)
        out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

template <class S>
void check_ref(const ModelRefT<S>& m) {
    if (!m.g) throw ConfigError("saliency: model graph is null");
    const int n = static_cast<int>(m.g->node_count());
    if (m.input_node < 0 || m.input_node >= n ||
        m.g->node(m.input_node).kind != OpKind::Input)
        throw ConfigError("saliency: input_node does not name an input node");
    if (m.logits_node < 0 || m.logits_node >= n)
        throw ConfigError("saliency: logits_node out of range");
    if (m.g->node(m.logits_node).sample_shape.size() != 1)
        throw ConfigError("saliency: logits node must be flat per sample, got " +
                          shape_str(m.g->node(m.logits_node).sample_shape));
    if (m.loss_node >= n) throw ConfigError("saliency: loss_node out of range");
}

template <class S>
int class_count(const ModelRefT<S>& m) {
    return static_cast<int>(m.g->node(m.logits_node).sample_shape[0]);
}

template <class S>
void check_image(const ModelRefT<S>& m, const TensorT<S>& image, int target_class) {
    const auto& want = m.g->node(m.input_node).sample_shape;
    if (want.size() != 3)
        throw ConfigError("saliency: model input must be CxHxW, got " + shape_str(want));
    if (image.shape != want)
        throw ConfigError("saliency: image shape " + image.shape_str() +
                          " does not match model input " + shape_str(want));
    const int classes = class_count(m);
    if (target_class < 0 || target_class >= classes)
        throw ConfigError("saliency: target class " + std::to_string(target_class) +
                          " out of range [0," + std::to_string(classes) + ")");
}

// Forward a batch and return the cached logits. Graphs ending in a loss
// node need labels of the right length even though none are meaningful.
template <class S>
const TensorT<S>& forward_batch(ModelRefT<S> m, const TensorT<S>& batch) {
    if (m.loss_node >= 0)
        m.g->set_labels(std::vector<int>(static_cast<std::size_t>(batch.shape[0]), 0));
    m.g->forward(batch, /*training=*/false);
    return m.g->activation(m.logits_node);
}

template <class S>
std::vector<double> softmax_row(const S* z, int C) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(z[c]));
    std::vector<double> p(static_cast<std::size_t>(C));
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
        p[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(z[c]) - mx);
        sum += p[static_cast<std::size_t>(c)];
    }
    for (auto& v : p) v /= sum;
    return p;
}

template <class S>
double row_target(const S* z, int C, int t, TargetScalar target) {
    if (target == TargetScalar::Logit) return static_cast<double>(z[t]);
    return softmax_row(z, C)[static_cast<std::size_t>(t)];
}

template <class S>
TensorT<S> slice_rows(const TensorT<S>& src, std::int64_t from, std::int64_t count) {
    std::vector<std::int64_t> shp = src.shape;
    shp[0] = count;
    TensorT<S> out(std::move(shp));
    const std::int64_t stride = src.numel() / src.shape[0];
    std::copy(src.data.begin() + from * stride, src.data.begin() + (from + count) * stride,
              out.data.begin());
    return out;
}

// Target scalar for every row of `batch`, forward passes only.
template <class S>
std::vector<double> batch_targets(ModelRefT<S> m, const TensorT<S>& batch, int t,
                                  TargetScalar target) {
    const std::int64_t N = batch.shape[0];
    const int C = class_count(m);
    std::vector<double> out(static_cast<std::size_t>(N));
    for (std::int64_t i = 0; i < N; i += kChunk) {
        const std::int64_t n = std::min(kChunk, N - i);
        const TensorT<S>& z = forward_batch(m, slice_rows(batch, i, n));
        for (std::int64_t r = 0; r < n; ++r)
            out[static_cast<std::size_t>(i + r)] =
                row_target(z.data.data() + r * C, C, t, target);
    }
    return out;
}

// d(target)/d(input) for every row of `points`, same shape as `points`.
// Probability targets seed the softmax Jacobian row at the logits.
template <class S>
TensorT<S> batch_input_gradients(ModelRefT<S> m, const TensorT<S>& points, int t,
                                 GradMode mode, TargetScalar target) {
    TensorT<S> grads(points.shape);
    const std::int64_t N = points.shape[0];
    const std::int64_t D = points.numel() / N;
    const int C = class_count(m);
    for (std::int64_t i = 0; i < N; i += kChunk) {
        const std::int64_t n = std::min(kChunk, N - i);
        const TensorT<S>& z = forward_batch(m, slice_rows(points, i, n));
        TensorT<S> seed({n, C});
        for (std::int64_t r = 0; r < n; ++r) {
            if (target == TargetScalar::Logit) {
                seed.data[static_cast<std::size_t>(r * C + t)] = S(1);
            } else {
                const auto p = softmax_row(z.data.data() + r * C, C);
                const double pt = p[static_cast<std::size_t>(t)];
                for (int j = 0; j < C; ++j)
                    seed.data[static_cast<std::size_t>(r * C + j)] =
                        static_cast<S>(pt * ((j == t ? 1.0 : 0.0) -
                                             p[static_cast<std::size_t>(j)]));
            }
        }
        m.g->backward_from({{m.logits_node, seed}}, mode);
        const TensorT<S>& gin = m.g->node_grad(m.input_node);
        std::copy(gin.data.begin(), gin.data.begin() + n * D,
                  grads.data.begin() + i * D);
    }
    return grads;
}

// Collapse {C,H,W} to H*W values: sum of signed channel values, or max of
// channel magnitudes for magnitude-only maps.
std::vector<float> aggregate_channels(const Tensor& g, bool absolute) {
    const std::int64_t C = g.shape[0], HW = g.shape[1] * g.shape[2];
    std::vector<float> out(static_cast<std::size_t>(HW));
    for (std::int64_t i = 0; i < HW; ++i) {
        if (absolute) {
            double best = 0.0;
            for (std::int64_t c = 0; c < C; ++c)
                best = std::max(best, std::abs(static_cast<double>(g.data[c * HW + i])));
            out[static_cast<std::size_t>(i)] = static_cast<float>(best);
        } else {
            double sum = 0.0;
            for (std::int64_t c = 0; c < C; ++c)
                sum += static_cast<double>(g.data[c * HW + i]);
            out[static_cast<std::size_t>(i)] = static_cast<float>(sum);
        }
    }
    return out;
}

HeatmapRecord make_record(Method method, std::uint32_t image_id, int target_class,
                          const Tensor& image, bool absolute, std::vector<float> values) {
    HeatmapRecord rec;
    rec.image_id = image_id;
    rec.source_kind = HeatmapRecord::Source::Method;
    rec.source_id = static_cast<std::uint32_t>(method);
    rec.target_class = target_class;
    rec.height = static_cast<std::uint32_t>(image.shape[1]);
    rec.width = static_cast<std::uint32_t>(image.shape[2]);
    rec.is_absolute = absolute;
    rec.values = std::move(values);
    return rec;
}

double value_range(const Tensor& image) {
    float lo = image.data[0], hi = image.data[0];
    for (float v : image.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    return static_cast<double>(hi) - static_cast<double>(lo);
}

Tensor as_batch_of_one(const Tensor& image) {
    std::vector<std::int64_t> shp = image.shape;
    shp.insert(shp.begin(), 1);
    TensorT<float> b(std::move(shp));
    b.data = image.data;
    return b;
}

HeatmapRecord gradient_map(ModelRef m, const Tensor& image, std::uint32_t image_id,
                           int target_class, const MethodConfig& cfg, Method method,
                           GradMode mode, bool absolute) {
    Tensor g = input_gradient(m, image, target_class, mode, cfg.gradient_target);
    return make_record(method, image_id, target_class, image, absolute,
                       aggregate_channels(g, absolute));
}

// Central-difference gradient of the target at `point`, forward passes only.
// Divides by the realized float step, not the nominal one.
Tensor fd_gradient(ModelRef m, const Tensor& point, int t, TargetScalar target, double h) {
    const std::int64_t D = point.numel();
    Tensor grad(point.shape);
    std::vector<std::int64_t> shp = point.shape;
    const std::int64_t per = kChunk / 2;
    for (std::int64_t d0 = 0; d0 < D; d0 += per) {
        const std::int64_t nd = std::min(per, D - d0);
        shp.insert(shp.begin(), 2 * nd);
        Tensor batch(shp);
        shp.erase(shp.begin());
        std::vector<double> steps(static_cast<std::size_t>(nd));
        for (std::int64_t k = 0; k < nd; ++k) {
            float* up = batch.data.data() + (2 * k) * D;
            float* dn = batch.data.data() + (2 * k + 1) * D;
            std::copy(point.data.begin(), point.data.end(), up);
            std::copy(point.data.begin(), point.data.end(), dn);
            const double v = static_cast<double>(point.data[static_cast<std::size_t>(d0 + k)]);
            up[d0 + k] = static_cast<float>(v + h);
            dn[d0 + k] = static_cast<float>(v - h);
            steps[static_cast<std::size_t>(k)] =
                static_cast<double>(up[d0 + k]) - static_cast<double>(dn[d0 + k]);
        }
        const std::vector<double> targets = batch_targets(m, batch, t, target);
        for (std::int64_t k = 0; k < nd; ++k)
            grad.data[static_cast<std::size_t>(d0 + k)] = static_cast<float>(
                (targets[static_cast<std::size_t>(2 * k)] -
                 targets[static_cast<std::size_t>(2 * k + 1)]) /
                steps[static_cast<std::size_t>(k)]);
    }
    return grad;
}

}  // namespace

const char* method_name(Method m) {
    const int i = static_cast<int>(m);
    if (i < 0 || i >= kMethodCount) throw ConfigError("unknown method id " + std::to_string(i));
    return kMethodNames[i];
}

Method method_by_name(const std::string& name) {
    for (int i = 0; i < kMethodCount; ++i)
        if (name == kMethodNames[i]) return static_cast<Method>(i);
    std::string all;
    for (int i = 0; i < kMethodCount; ++i) all += std::string(i ? ", " : "") + kMethodNames[i];
    throw ConfigError("unknown saliency method '" + name + "' (expected one of: " + all + ")");
}

template <class S>
TensorT<S> input_gradient(ModelRefT<S> m, const TensorT<S>& image, int target_class,
                          GradMode mode, TargetScalar target) {
    check_ref(m);
    check_image(m, image, target_class);
    std::vector<std::int64_t> shp = image.shape;
    shp.insert(shp.begin(), 1);
    TensorT<S> batch(std::move(shp));
    batch.data = image.data;
    TensorT<S> g = batch_input_gradients(m, batch, target_class, mode, target);
    TensorT<S> out(image.shape);
    out.data = std::move(g.data);
    return out;
}

template TensorT<float> input_gradient<float>(ModelRefT<float>, const TensorT<float>&, int,
                                              GradMode, TargetScalar);
template TensorT<double> input_gradient<double>(ModelRefT<double>, const TensorT<double>&,
                                                int, GradMode, TargetScalar);

HeatmapRecord saliency_gradient(ModelRef m, const Tensor& image, std::uint32_t image_id,
                                int target_class, const MethodConfig& cfg) {
    return gradient_map(m, image, image_id, target_class, cfg, Method::Saliency,
                        GradMode::Standard, /*absolute=*/true);
}

HeatmapRecord deconvolution(ModelRef m, const Tensor& image, std::uint32_t image_id,
                            int target_class, const MethodConfig& cfg) {
    return gradient_map(m, image, image_id, target_class, cfg, Method::Deconvolution,
                        GradMode::DeconvReLU, /*absolute=*/false);
}

HeatmapRecord guided_backprop(ModelRef m, const Tensor& image, std::uint32_t image_id,
                              int target_class, const MethodConfig& cfg) {
    return gradient_map(m, image, image_id, target_class, cfg, Method::GuidedBackprop,
                        GradMode::GuidedReLU, /*absolute=*/false);
}

HeatmapRecord smoothgrad(ModelRef m, const Tensor& image, std::uint32_t image_id,
                         int target_class, const MethodConfig& cfg) {
    check_ref(m);
    check_image(m, image, target_class);
    const auto& sc = cfg.smoothgrad;
    if (sc.n_samples < 1)
        throw ConfigError("smoothgrad: n_samples must be >= 1, got " +
                          std::to_string(sc.n_samples));
    if (sc.noise_sigma < 0.0)
        throw ConfigError("smoothgrad: noise_sigma must be >= 0");
    if (sc.noise_sigma == 0.0) {
        // All copies coincide with the input; the mean is the plain map.
        HeatmapRecord rec = saliency_gradient(m, image, image_id, target_class, cfg);
        rec.source_id = static_cast<std::uint32_t>(Method::SmoothGrad);
        return rec;
    }
    const double sigma = sc.noise_sigma * value_range(image);
    Rng rng = Rng::derive(cfg.seed, image_id,
                          static_cast<std::uint64_t>(Method::SmoothGrad));
    const std::int64_t D = image.numel();
    std::vector<std::int64_t> shp = image.shape;
    shp.insert(shp.begin(), sc.n_samples);
    Tensor points(std::move(shp));
    for (std::int64_t s = 0; s < sc.n_samples; ++s)
        for (std::int64_t j = 0; j < D; ++j)
            points.data[static_cast<std::size_t>(s * D + j)] = static_cast<float>(
                static_cast<double>(image.data[static_cast<std::size_t>(j)]) +
                sigma * rng.normal());
    const Tensor grads =
        batch_input_gradients(m, points, target_class, GradMode::Standard, cfg.gradient_target);
    const std::int64_t C = image.shape[0], HW = image.shape[1] * image.shape[2];
    std::vector<double> acc(static_cast<std::size_t>(HW), 0.0);
    for (std::int64_t s = 0; s < sc.n_samples; ++s)
        for (std::int64_t i = 0; i < HW; ++i) {
            double best = 0.0;
            for (std::int64_t c = 0; c < C; ++c)
                best = std::max(best, std::abs(static_cast<double>(
                                          grads.data[(s * C + c) * HW + i])));
            acc[static_cast<std::size_t>(i)] += best;
        }
    std::vector<float> values(static_cast<std::size_t>(HW));
    for (std::int64_t i = 0; i < HW; ++i)
        values[static_cast<std::size_t>(i)] =
            static_cast<float>(acc[static_cast<std::size_t>(i)] / sc.n_samples);
    return make_record(Method::SmoothGrad, image_id, target_class, image, true,
                       std::move(values));
}

HeatmapRecord integrated_gradients(ModelRef m, const Tensor& image, std::uint32_t image_id,
                                   int target_class, const MethodConfig& cfg) {
    check_ref(m);
    check_image(m, image, target_class);
    const int n = cfg.integrated_gradients.n_steps;
    if (n < 1)
        throw ConfigError("integrated_gradients: n_steps must be >= 1, got " +
                          std::to_string(n));
    const std::int64_t D = image.numel();
    std::vector<std::int64_t> shp = image.shape;
    shp.insert(shp.begin(), n);
    Tensor points(std::move(shp));
    for (std::int64_t s = 0; s < n; ++s) {
        const double alpha = (static_cast<double>(s) + 0.5) / n;
        for (std::int64_t j = 0; j < D; ++j)
            points.data[static_cast<std::size_t>(s * D + j)] = static_cast<float>(
                alpha * static_cast<double>(image.data[static_cast<std::size_t>(j)]));
    }
    const Tensor grads =
        batch_input_gradients(m, points, target_class, GradMode::Standard, cfg.gradient_target);
    const std::int64_t C = image.shape[0], HW = image.shape[1] * image.shape[2];
    std::vector<float> values(static_cast<std::size_t>(HW));
    for (std::int64_t i = 0; i < HW; ++i) {
        double sum = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
            double mean = 0.0;
            for (std::int64_t s = 0; s < n; ++s)
                mean += static_cast<double>(grads.data[(s * C + c) * HW + i]);
            mean /= n;
            sum += static_cast<double>(image.data[c * HW + i]) * mean;
        }
        values[static_cast<std::size_t>(i)] = static_cast<float>(sum);
    }
    return make_record(Method::IntegratedGradients, image_id, target_class, image, false,
                       std::move(values));
}

HeatmapRecord occlusion(ModelRef m, const Tensor& image, std::uint32_t image_id,
                        int target_class, const MethodConfig& cfg) {
    check_ref(m);
    check_image(m, image, target_class);
    const auto& oc = cfg.occlusion;
    const std::int64_t C = image.shape[0], H = image.shape[1], W = image.shape[2];
    if (oc.window_h < 1 || oc.window_w < 1 || oc.stride < 1)
        throw ConfigError("occlusion: window and stride must be positive");
    if (oc.window_h > H || oc.window_w > W)
        throw ConfigError("occlusion: window " + std::to_string(oc.window_h) + "x" +
                          std::to_string(oc.window_w) + " exceeds image " +
                          std::to_string(H) + "x" + std::to_string(W));
    if (oc.fill_value < 0.0f || oc.fill_value > 1.0f)
        throw ConfigError("occlusion: fill_value must lie in [0,1]");
    if (oc.stride > oc.window_h || oc.stride > oc.window_w ||
        (H - oc.window_h) % oc.stride != 0 || (W - oc.window_w) % oc.stride != 0)
        throw ConfigError("occlusion: stride " + std::to_string(oc.stride) +
                          " leaves pixels uncovered by any window placement");

    const double f0 =
        batch_targets(m, as_batch_of_one(image), target_class, cfg.perturbation_target)[0];

    std::vector<std::int64_t> ys, xs;
    for (std::int64_t y = 0; y + oc.window_h <= H; y += oc.stride) ys.push_back(y);
    for (std::int64_t x = 0; x + oc.window_w <= W; x += oc.stride) xs.push_back(x);
    const std::int64_t P = static_cast<std::int64_t>(ys.size() * xs.size());
    const std::int64_t D = image.numel();

    Tensor batch({P, C, H, W});
    std::int64_t p = 0;
    for (std::int64_t y0 : ys)
        for (std::int64_t x0 : xs) {
            float* dst = batch.data.data() + p * D;
            std::copy(image.data.begin(), image.data.end(), dst);
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t dy = 0; dy < oc.window_h; ++dy)
                    for (std::int64_t dx = 0; dx < oc.window_w; ++dx)
                        dst[(c * H + y0 + dy) * W + x0 + dx] = oc.fill_value;
            ++p;
        }
    const std::vector<double> occluded =
        batch_targets(m, batch, target_class, cfg.perturbation_target);

    std::vector<double> acc(static_cast<std::size_t>(H * W), 0.0);
    std::vector<std::int32_t> cnt(static_cast<std::size_t>(H * W), 0);
    p = 0;
    for (std::int64_t y0 : ys)
        for (std::int64_t x0 : xs) {
            const double drop = f0 - occluded[static_cast<std::size_t>(p)];
            for (std::int64_t dy = 0; dy < oc.window_h; ++dy)
                for (std::int64_t dx = 0; dx < oc.window_w; ++dx) {
                    const std::size_t at =
                        static_cast<std::size_t>((y0 + dy) * W + x0 + dx);
                    acc[at] += drop;
                    ++cnt[at];
                }
            ++p;
        }
    std::vector<float> values(static_cast<std::size_t>(H * W));
    for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = static_cast<float>(acc[i] / cnt[i]);
    return make_record(Method::Occlusion, image_id, target_class, image, false,
                       std::move(values));
}

HeatmapRecord gradient_shap(ModelRef m, const Tensor& image, std::uint32_t image_id,
                            int target_class, const MethodConfig& cfg) {
    check_ref(m);
    check_image(m, image, target_class);
    const auto& gs = cfg.gradient_shap;
    if (gs.n_samples < 1)
        throw ConfigError("gradient_shap: n_samples must be >= 1, got " +
                          std::to_string(gs.n_samples));
    if (gs.noise_sigma < 0.0) throw ConfigError("gradient_shap: noise_sigma must be >= 0");
    if (gs.finite_differences && gs.fd_step <= 0.0)
        throw ConfigError("gradient_shap: fd_step must be positive");
    const bool drawn = gs.baselines && !gs.baselines->empty();
    if (drawn)
        for (const Tensor& b : *gs.baselines)
            if (b.shape != image.shape)
                throw ConfigError("gradient_shap: baseline shape " + b.shape_str() +
                                  " does not match image " + image.shape_str());

    const double sigma = gs.noise_sigma * value_range(image);
    Rng rng = Rng::derive(cfg.seed, image_id,
                          static_cast<std::uint64_t>(Method::GradientShap));
    const std::int64_t D = image.numel();
    std::vector<std::int64_t> shp = image.shape;
    shp.insert(shp.begin(), gs.n_samples);
    Tensor points(std::move(shp));
    std::vector<const Tensor*> chosen(static_cast<std::size_t>(gs.n_samples), nullptr);

    // Draw order per sample: baseline index (when a distribution is given),
    // interpolation coefficient, then per-element noise (when sigma > 0).
    for (std::int64_t s = 0; s < gs.n_samples; ++s) {
        const Tensor* b = nullptr;
        if (drawn)
            b = &(*gs.baselines)[static_cast<std::size_t>(
                rng.uniform_int(gs.baselines->size()))];
        chosen[static_cast<std::size_t>(s)] = b;
        const double alpha = rng.uniform();
        for (std::int64_t j = 0; j < D; ++j) {
            const double bj =
                b ? static_cast<double>(b->data[static_cast<std::size_t>(j)]) : 0.0;
            double xj = static_cast<double>(image.data[static_cast<std::size_t>(j)]);
            if (sigma > 0.0) xj += sigma * rng.normal();
            points.data[static_cast<std::size_t>(s * D + j)] =
                static_cast<float>(bj + alpha * (xj - bj));
        }
    }

    Tensor grads;
    if (gs.finite_differences) {
        grads = Tensor(points.shape);
        for (std::int64_t s = 0; s < gs.n_samples; ++s) {
            Tensor point(image.shape);
            std::copy(points.data.begin() + s * D, points.data.begin() + (s + 1) * D,
                      point.data.begin());
            const Tensor g =
                fd_gradient(m, point, target_class, cfg.gradient_target, gs.fd_step);
            std::copy(g.data.begin(), g.data.end(), grads.data.begin() + s * D);
        }
    } else {
        grads = batch_input_gradients(m, points, target_class, GradMode::Standard,
                                      cfg.gradient_target);
    }

    const std::int64_t C = image.shape[0], HW = image.shape[1] * image.shape[2];
    std::vector<float> values(static_cast<std::size_t>(HW));
    for (std::int64_t i = 0; i < HW; ++i) {
        double sum = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
            double mean = 0.0;
            for (std::int64_t s = 0; s < gs.n_samples; ++s) {
                const Tensor* b = chosen[static_cast<std::size_t>(s)];
                const double bj =
                    b ? static_cast<double>(b->data[static_cast<std::size_t>(c * HW + i)])
                      : 0.0;
                mean += static_cast<double>(grads.data[(s * C + c) * HW + i]) *
                        (static_cast<double>(image.data[c * HW + i]) - bj);
            }
            sum += mean / gs.n_samples;
        }
        values[static_cast<std::size_t>(i)] = static_cast<float>(sum);
    }
    return make_record(Method::GradientShap, image_id, target_class, image, false,
                       std::move(values));
}

HeatmapRecord lime(ModelRef m, const Tensor& image, std::uint32_t image_id,
                   int target_class, const MethodConfig& cfg) {
    check_ref(m);
    check_image(m, image, target_class);
    const auto& lc = cfg.lime;
    if (lc.n_superpixels < 1) throw ConfigError("lime: n_superpixels must be >= 1");
    if (lc.kernel_width <= 0.0) throw ConfigError("lime: kernel_width must be positive");
    if (lc.ridge < 0.0) throw ConfigError("lime: ridge must be >= 0");
    if (lc.fill_value < 0.0f || lc.fill_value > 1.0f)
        throw ConfigError("lime: fill_value must lie in [0,1]");
    const std::int64_t C = image.shape[0], H = image.shape[1], W = image.shape[2];
    const std::int64_t g = std::max<std::int64_t>(
        1, std::llround(std::sqrt(static_cast<double>(lc.n_superpixels))));
    const std::int64_t S = g * g;
    if (lc.n_samples < S)
        throw ConfigError("lime: " + std::to_string(lc.n_samples) +
                          " samples cannot identify " + std::to_string(S) +
                          " superpixel coefficients");

    Rng rng = Rng::derive(cfg.seed, image_id, static_cast<std::uint64_t>(Method::Lime));
    const std::int64_t n = lc.n_samples;
    std::vector<char> masks(static_cast<std::size_t>(n * S));
    for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t j = 0; j < S; ++j)
            masks[static_cast<std::size_t>(s * S + j)] = rng.uniform() < 0.5 ? 1 : 0;

    bool any_distinct = false;
    for (std::int64_t s = 1; s < n && !any_distinct; ++s)
        any_distinct = !std::equal(masks.begin() + s * S, masks.begin() + (s + 1) * S,
                                   masks.begin());
    if (!any_distinct)
        throw NumericError("lime: singular regression, all " + std::to_string(n) +
                           " perturbation masks are identical");

    // Cell of pixel (y,x) under the g-by-g grid.
    std::vector<std::int32_t> cell(static_cast<std::size_t>(H * W));
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x)
            cell[static_cast<std::size_t>(y * W + x)] =
                static_cast<std::int32_t>((y * g / H) * g + (x * g / W));

    const std::int64_t D = image.numel();
    Tensor batch({n, C, H, W});
    for (std::int64_t s = 0; s < n; ++s) {
        float* dst = batch.data.data() + s * D;
        std::copy(image.data.begin(), image.data.end(), dst);
        const char* mk = masks.data() + s * S;
        for (std::int64_t i = 0; i < H * W; ++i)
            if (!mk[cell[static_cast<std::size_t>(i)]])
                for (std::int64_t c = 0; c < C; ++c) dst[c * H * W + i] = lc.fill_value;
    }
    const std::vector<double> y = batch_targets(m, batch, target_class, cfg.perturbation_target);

    // Weighted ridge regression of the target on the mask bits plus an
    // unpenalized intercept (last column).
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(S + 1, S + 1);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(S + 1);
    Eigen::VectorXd row(S + 1);
    for (std::int64_t s = 0; s < n; ++s) {
        std::int64_t off = 0;
        for (std::int64_t j = 0; j < S; ++j) {
            row[j] = masks[static_cast<std::size_t>(s * S + j)];
            off += masks[static_cast<std::size_t>(s * S + j)] ? 0 : 1;
        }
        row[S] = 1.0;
        const double frac = static_cast<double>(off) / static_cast<double>(S);
        const double w = std::exp(-(frac * frac) / (lc.kernel_width * lc.kernel_width));
        G.noalias() += w * row * row.transpose();
        rhs.noalias() += (w * y[static_cast<std::size_t>(s)]) * row;
    }
    for (std::int64_t j = 0; j < S; ++j) G(j, j) += lc.ridge;
    const Eigen::VectorXd beta = G.ldlt().solve(rhs);
    if (!beta.allFinite())
        throw NumericError("lime: singular regression, normal equations unsolvable");

    std::vector<float> values(static_cast<std::size_t>(H * W));
    for (std::int64_t i = 0; i < H * W; ++i)
        values[static_cast<std::size_t>(i)] =
            static_cast<float>(beta[cell[static_cast<std::size_t>(i)]]);
    return make_record(Method::Lime, image_id, target_class, image, false,
                       std::move(values));
}

HeatmapRecord compute_saliency(ModelRef m, Method method, const Tensor& image,
                               std::uint32_t image_id, int target_class,
                               const MethodConfig& cfg) {
    switch (method) {
        case Method::Deconvolution:
            return deconvolution(m, image, image_id, target_class, cfg);
        case Method::GuidedBackprop:
            return guided_backprop(m, image, image_id, target_class, cfg);
        case Method::Saliency:
            return saliency_gradient(m, image, image_id, target_class, cfg);
        case Method::GradientShap:
            return gradient_shap(m, image, image_id, target_class, cfg);
        case Method::IntegratedGradients:
            return integrated_gradients(m, image, image_id, target_class, cfg);
        case Method::Lime:
            return lime(m, image, image_id, target_class, cfg);
        case Method::Occlusion:
            return occlusion(m, image, image_id, target_class, cfg);
        case Method::SmoothGrad:
            return smoothgrad(m, image, image_id, target_class, cfg);
    }
    throw ConfigError("unknown method id " + std::to_string(static_cast<int>(method)));
}

}  // namespace protosal
