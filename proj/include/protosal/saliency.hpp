#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protosal/graph.hpp"
#include "protosal/heatmap_store.hpp"
#include "protosal/tensor.hpp"

namespace protosal {

// Post-hoc attribution methods, in report row order.
enum class Method : int {
    Deconvolution = 0,
    GuidedBackprop = 1,
    Saliency = 2,
    GradientShap = 3,
    IntegratedGradients = 4,
    Lime = 5,
    Occlusion = 6,
    SmoothGrad = 7,
};

constexpr int kMethodCount = 8;

const char* method_name(Method m);
Method method_by_name(const std::string& name);  // throws ConfigError

// Non-owning view of any model that maps an image to class scores.
// loss_node >= 0 marks a graph ending in softmax cross-entropy, which
// needs (dummy) labels before every forward pass.
template <class S>
struct ModelRefT {
    GraphT<S>* g = nullptr;
    int input_node = 0;
    int logits_node = -1;
    int loss_node = -1;
};

using ModelRef = ModelRefT<float>;
using ModelRef64 = ModelRefT<double>;

// What scalar is differentiated / probed per image.
enum class TargetScalar { Logit, Probability };

struct SmoothGradConfig {
    double noise_sigma = 0.15;  // times (max - min) of the image; 0 disables noise
    int n_samples = 25;
};

struct IntegratedGradientsConfig {
    int n_steps = 64;  // midpoint Riemann steps; the baseline is the zero image
};

struct OcclusionConfig {
    int window_h = 8, window_w = 8;
    int stride = 4;
    float fill_value = 0.0f;  // must lie in the valid pixel range [0,1]
};

struct GradientShapConfig {
    int n_samples = 64;
    double noise_sigma = 0.0;  // times (max - min), as in SmoothGrad
    // Baselines are drawn uniformly from this set; null or empty means the
    // zero image.
    const std::vector<Tensor>* baselines = nullptr;
    // Estimate gradients by central differences instead of backward passes
    // (forward-only, so the method becomes black-box). The random draws are
    // identical in both modes.
    bool finite_differences = false;
    double fd_step = 1e-3;
};

struct LimeConfig {
    // Rounded to the nearest square grid: g = round(sqrt(n_superpixels))
    // cells per side, pixel (y,x) belongs to cell (floor(y*g/H), floor(x*g/W)).
    int n_superpixels = 32;
    int n_samples = 256;
    double kernel_width = 0.25;  // on the fraction of disabled superpixels
    double ridge = 1e-3;         // intercept unpenalized
    float fill_value = 0.0f;
};

struct MethodConfig {
    TargetScalar gradient_target = TargetScalar::Logit;
    TargetScalar perturbation_target = TargetScalar::Probability;
    SmoothGradConfig smoothgrad;
    IntegratedGradientsConfig integrated_gradients;
    OcclusionConfig occlusion;
    GradientShapConfig gradient_shap;
    LimeConfig lime;
    std::uint64_t seed = 1;
};

// d(target scalar)/d(input) for one {C,H,W} image, unaggregated. The
// channel-aggregated public methods are built on this; tests run it in
// 64 bits against finite differences.
template <class S>
TensorT<S> input_gradient(ModelRefT<S> m, const TensorT<S>& image, int target_class,
                          GradMode mode = GradMode::Standard,
                          TargetScalar target = TargetScalar::Logit);

// The eight extractors. Each is a pure function of (model parameters,
// image, target_class, cfg, cfg.seed, image_id): randomized methods draw
// from a stream derived from (seed, image_id, method id), so results do
// not depend on evaluation order. Signed maps aggregate channels by sum;
// magnitude-only maps (Saliency, SmoothGrad) by max of absolute values
// and set is_absolute.
HeatmapRecord saliency_gradient(ModelRef m, const Tensor& image, std::uint32_t image_id,
                                int target_class, const MethodConfig& cfg = {});
HeatmapRecord deconvolution(ModelRef m, const Tensor& image, std::uint32_t image_id,
                            int target_class, const MethodConfig& cfg = {});
HeatmapRecord guided_backprop(ModelRef m, const Tensor& image, std::uint32_t image_id,
                              int target_class, const MethodConfig& cfg = {});
HeatmapRecord smoothgrad(ModelRef m, const Tensor& image, std::uint32_t image_id,
                         int target_class, const MethodConfig& cfg = {});
HeatmapRecord integrated_gradients(ModelRef m, const Tensor& image, std::uint32_t image_id,
                                   int target_class, const MethodConfig& cfg = {});
HeatmapRecord occlusion(ModelRef m, const Tensor& image, std::uint32_t image_id,
                        int target_class, const MethodConfig& cfg = {});
HeatmapRecord gradient_shap(ModelRef m, const Tensor& image, std::uint32_t image_id,
                            int target_class, const MethodConfig& cfg = {});
HeatmapRecord lime(ModelRef m, const Tensor& image, std::uint32_t image_id,
                   int target_class, const MethodConfig& cfg = {});

HeatmapRecord compute_saliency(ModelRef m, Method method, const Tensor& image,
                               std::uint32_t image_id, int target_class,
                               const MethodConfig& cfg = {});

}  // namespace protosal
