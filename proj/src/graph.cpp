#include "protosal/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "protosal/common.hpp"

namespace protosal {

namespace {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapRM = Eigen::Map<MatRM<S>>;
template <class S>
using CMapRM = Eigen::Map<const MatRM<S>>;

int conv_out_dim(int in, int k, int stride, int pad) {
    int span = in + 2 * pad - k;
    if (span < 0) throw Error("kernel larger than padded input (" + std::to_string(k) +
                              " vs " + std::to_string(in + 2 * pad) + ")");
    return span / stride + 1;
}

// Gathers receptive fields of one sample into a row-major K x P matrix,
// K = Cin*kh*kw, P = outH*outW. Out-of-bounds taps read as zero.
template <class S>
void im2col(const S* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int oh, int ow, S* col) {
    const std::int64_t P = std::int64_t(oh) * ow;
    for (int c = 0; c < C; ++c) {
        const S* plane = x + std::int64_t(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                S* row = col + (std::int64_t(c) * kh * kw + ky * kw + kx) * P;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ky;
                    S* dst = row + std::int64_t(oy) * ow;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + ow, S(0));
                        continue;
                    }
                    const S* srow = plane + std::int64_t(iy) * W;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < W) ? srow[ix] : S(0);
                    }
                }
            }
        }
    }
}

// Scatter-add of im2col layout back onto the input plane.
template <class S>
void col2im(const S* col, int C, int H, int W, int kh, int kw, int stride, int pad,
            int oh, int ow, S* x) {
    const std::int64_t P = std::int64_t(oh) * ow;
    for (int c = 0; c < C; ++c) {
        S* plane = x + std::int64_t(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const S* row = col + (std::int64_t(c) * kh * kw + ky * kw + kx) * P;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    S* drow = plane + std::int64_t(iy) * W;
                    const S* srow = row + std::int64_t(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) drow[ix] += srow[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "input";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::BatchNorm2d: return "batchnorm2d";
        case OpKind::Relu: return "relu";
        case OpKind::MaxPool2d: return "maxpool2d";
        case OpKind::AvgPool2d: return "avgpool2d";
        case OpKind::GlobalAvgPool: return "globalavgpool";
        case OpKind::TopKAvgPool: return "topkavgpool";
        case OpKind::Dense: return "dense";
        case OpKind::Add: return "add";
        case OpKind::Softmax: return "softmax";
        case OpKind::CrossEntropySoftmax: return "crossentropy";
        case OpKind::L2DistanceMap: return "l2distancemap";
        case OpKind::SimilarityLog: return "similaritylog";
        case OpKind::UpsampleBilinear: return "upsamplebilinear";
        case OpKind::SumAll: return "sumall";
    }
    return "?";
}

// ---- construction -----------------------------------------------------

template <class S>
int GraphT<S>::add_node(Node n) {
    nodes_.push_back(std::move(n));
    forward_done_ = false;
    return static_cast<int>(nodes_.size()) - 1;
}

template <class S>
int GraphT<S>::new_param(const std::string& name, std::vector<std::int64_t> shape,
                         bool trainable, bool is_buffer) {
    if (find_param(name)) throw Error("duplicate parameter name: " + name);
    ParamT<S> p;
    p.name = name;
    p.value = TensorT<S>(std::move(shape));
    p.trainable = trainable;
    p.is_buffer = is_buffer;
    if (trainable) {
        p.value.requires_grad = true;
        p.value.ensure_grad();
    }
    params_.push_back(std::move(p));
    return static_cast<int>(params_.size()) - 1;
}

template <class S>
void GraphT<S>::check_node_id(int id, const char* what) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
        throw Error(std::string(what) + ": bad node id " + std::to_string(id));
}

template <class S>
const std::vector<std::int64_t>& GraphT<S>::sample_shape(int id) const {
    check_node_id(id, "sample_shape");
    return nodes_[id].sample_shape;
}

template <class S>
int GraphT<S>::add_input(std::vector<std::int64_t> shape) {
    if (input_node_ >= 0) throw Error("graph already has an input node");
    if (shape.empty()) throw Error("input shape must be non-empty");
    Node n;
    n.kind = OpKind::Input;
    n.sample_shape = std::move(shape);
    input_node_ = add_node(std::move(n));
    return input_node_;
}

template <class S>
int GraphT<S>::add_conv2d(int src, int out_channels, int kh, int kw, int stride, int pad,
                          const std::string& name) {
    check_node_id(src, "add_conv2d");
    const auto& s = sample_shape(src);
    if (s.size() != 3) throw Error("conv2d expects a CxHxW source, got " +
                                   nodes_[src].out.shape_str());
    if (out_channels <= 0 || kh <= 0 || kw <= 0 || stride <= 0 || pad < 0)
        throw Error("conv2d: bad attributes");
    int C = static_cast<int>(s[0]), H = static_cast<int>(s[1]), W = static_cast<int>(s[2]);
    Node n;
    n.kind = OpKind::Conv2d;
    n.inputs = {src};
    n.kh = kh; n.kw = kw; n.stride = stride; n.pad = pad;
    n.out_h = conv_out_dim(H, kh, stride, pad);
    n.out_w = conv_out_dim(W, kw, stride, pad);
    n.sample_shape = {out_channels, n.out_h, n.out_w};
    n.params = {new_param(name + ".weight", {out_channels, C, kh, kw}, true, false),
                new_param(name + ".bias", {out_channels}, true, false)};
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_batchnorm2d(int src, const std::string& name, double eps,
                               double momentum) {
    check_node_id(src, "add_batchnorm2d");
    const auto& s = sample_shape(src);
    if (s.size() != 3) throw Error("batchnorm2d expects a CxHxW source");
    std::int64_t C = s[0];
    Node n;
    n.kind = OpKind::BatchNorm2d;
    n.inputs = {src};
    n.sample_shape = s;
    n.eps = eps;
    n.momentum = momentum;
    int g = new_param(name + ".weight", {C}, true, false);
    int b = new_param(name + ".bias", {C}, true, false);
    int rm = new_param(name + ".running_mean", {C}, false, true);
    int rv = new_param(name + ".running_var", {C}, false, true);
    params_[g].value.fill(S(1));
    params_[rv].value.fill(S(1));
    n.params = {g, b, rm, rv};
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_relu(int src) {
    check_node_id(src, "add_relu");
    Node n;
    n.kind = OpKind::Relu;
    n.inputs = {src};
    n.sample_shape = sample_shape(src);
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_maxpool2d(int src, int k, int stride) {
    check_node_id(src, "add_maxpool2d");
    const auto& s = sample_shape(src);
    if (s.size() != 3) throw Error("maxpool2d expects a CxHxW source");
    if (k <= 0 || stride <= 0) throw Error("maxpool2d: bad attributes");
    Node n;
    n.kind = OpKind::MaxPool2d;
    n.inputs = {src};
    n.kh = n.kw = k;
    n.stride = stride;
    n.out_h = conv_out_dim(static_cast<int>(s[1]), k, stride, 0);
    n.out_w = conv_out_dim(static_cast<int>(s[2]), k, stride, 0);
    n.sample_shape = {s[0], n.out_h, n.out_w};
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_avgpool2d(int src, int k, int stride) {
    check_node_id(src, "add_avgpool2d");
    const auto& s = sample_shape(src);
    if (s.size() != 3) throw Error("avgpool2d expects a CxHxW source");
    if (k <= 0 || stride <= 0) throw Error("avgpool2d: bad attributes");
    Node n;
    n.kind = OpKind::AvgPool2d;
    n.inputs = {src};
    n.kh = n.kw = k;
    n.stride = stride;
    n.out_h = conv_out_dim(static_cast<int>(s[1]), k, stride, 0);
    n.out_w = conv_out_dim(static_cast<int>(s[2]), k, stride, 0);
    n.sample_shape = {s[0], n.out_h, n.out_w};
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_global_avg_pool(int src) {
    check_node_id(src, "add_global_avg_pool");
    const auto& s = sample_shape(src);
    if (s.size() != 3) throw Error("globalavgpool expects a CxHxW source");
    Node n;
    n.kind = OpKind::GlobalAvgPool;
    n.inputs = {src};
    n.sample_shape = {s[0]};
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_topk_avg_pool(int src, double fraction) {
    check_node_id(src, "add_topk_avg_pool");
    const auto& s = sample_shape(src);
    if (s.size() != 3) throw Error("topkavgpool expects a CxHxW source");
    if (!(fraction > 0.0) || fraction > 1.0)
        throw Error("topkavgpool: fraction must be in (0, 1]");
    Node n;
    n.kind = OpKind::TopKAvgPool;
    n.inputs = {src};
    n.fraction = fraction;
    n.sample_shape = {s[0]};
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_dense(int src, int out_features, bool with_bias,
                         const std::string& name) {
    check_node_id(src, "add_dense");
    const auto& s = sample_shape(src);
    if (s.size() != 1) throw Error("dense expects a flat source");
    if (out_features <= 0) throw Error("dense: bad out_features");
    Node n;
    n.kind = OpKind::Dense;
    n.inputs = {src};
    n.sample_shape = {out_features};
    n.params = {new_param(name + ".weight", {out_features, s[0]}, true, false)};
    if (with_bias)
        n.params.push_back(new_param(name + ".bias", {out_features}, true, false));
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_add(int a, int b) {
    check_node_id(a, "add_add");
    check_node_id(b, "add_add");
    if (sample_shape(a) != sample_shape(b))
        throw Error("add: operand shapes differ");
    Node n;
    n.kind = OpKind::Add;
    n.inputs = {a, b};
    n.sample_shape = sample_shape(a);
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_softmax(int src) {
    check_node_id(src, "add_softmax");
    const auto& s = sample_shape(src);
    if (s.size() != 1) throw Error("softmax expects a flat source");
    Node n;
    n.kind = OpKind::Softmax;
    n.inputs = {src};
    n.sample_shape = s;
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_cross_entropy_softmax(int logits) {
    check_node_id(logits, "add_cross_entropy_softmax");
    const auto& s = sample_shape(logits);
    if (s.size() != 1 || s[0] < 2) throw Error("crossentropy expects >= 2 logits");
    Node n;
    n.kind = OpKind::CrossEntropySoftmax;
    n.inputs = {logits};
    n.sample_shape = {1};
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_l2_distance_map(int src, int num_prototypes, int ph, int pw,
                                   const std::string& name) {
    check_node_id(src, "add_l2_distance_map");
    const auto& s = sample_shape(src);
    if (s.size() != 3) throw Error("l2distancemap expects a CxHxW source");
    if (ph != 1 || pw != 1) throw Error("l2distancemap: only 1x1 prototypes supported");
    if (num_prototypes <= 0) throw Error("l2distancemap: bad prototype count");
    Node n;
    n.kind = OpKind::L2DistanceMap;
    n.inputs = {src};
    n.kh = ph; n.kw = pw;
    n.sample_shape = {num_prototypes, s[1], s[2]};
    n.params = {new_param(name, {num_prototypes, s[0]}, true, false)};
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_similarity_log(int src, double eps) {
    check_node_id(src, "add_similarity_log");
    if (!(eps > 0.0)) throw Error("similaritylog: eps must be positive");
    Node n;
    n.kind = OpKind::SimilarityLog;
    n.inputs = {src};
    n.sample_shape = sample_shape(src);
    n.eps = eps;
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_upsample_bilinear(int src, int out_h, int out_w) {
    check_node_id(src, "add_upsample_bilinear");
    const auto& s = sample_shape(src);
    if (s.size() != 3) throw Error("upsamplebilinear expects a CxHxW source");
    if (out_h <= 0 || out_w <= 0) throw Error("upsamplebilinear: bad target size");
    Node n;
    n.kind = OpKind::UpsampleBilinear;
    n.inputs = {src};
    n.out_h = out_h;
    n.out_w = out_w;
    n.sample_shape = {s[0], out_h, out_w};
    return add_node(std::move(n));
}

template <class S>
int GraphT<S>::add_sum_all(int src) {
    check_node_id(src, "add_sum_all");
    Node n;
    n.kind = OpKind::SumAll;
    n.inputs = {src};
    n.sample_shape = {1};
    return add_node(std::move(n));
}

// ---- parameter access ---------------------------------------------------

template <class S>
ParamT<S>* GraphT<S>::find_param(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

template <class S>
ParamT<S>& GraphT<S>::param(const std::string& name) {
    if (auto* p = find_param(name)) return *p;
    throw Error("no such parameter: " + name);
}

// ---- forward ------------------------------------------------------------

template <class S>
const TensorT<S>& GraphT<S>::forward(const TensorT<S>& input, bool training) {
    if (input_node_ < 0) throw Error("graph has no input node");
    if (nodes_.empty()) throw Error("empty graph");
    const auto& ss = nodes_[input_node_].sample_shape;
    std::int64_t per = TensorT<S>::numel_of(ss);
    if (input.numel() == 0 || input.numel() % per != 0)
        throw Error("input numel " + std::to_string(input.numel()) +
                    " is not a multiple of the sample size " + std::to_string(per));
    // trailing dims must match the declared sample shape
    if (input.ndim() < ss.size() + 1 ||
        !std::equal(ss.begin(), ss.end(), input.shape.end() - ss.size()))
        throw Error("input shape " + input.shape_str() + " does not end with the " +
                    "declared sample shape");
    batch_n_ = static_cast<int>(input.numel() / per);
    training_forward_ = training;

    nodes_[input_node_].out = input;
    nodes_[input_node_].kink_margin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (static_cast<int>(i) == input_node_) continue;
        forward_node(nodes_[i], training);
    }
    forward_done_ = true;
    return nodes_.back().out;
}

template <class S>
void GraphT<S>::set_labels(std::vector<int> labels) {
    labels_ = std::move(labels);
}

template <class S>
void GraphT<S>::forward_node(Node& n, bool training) {
    n.kink_margin = std::numeric_limits<double>::infinity();
    const int N = batch_n_;
    auto batched = [&](const std::vector<std::int64_t>& ss) {
        std::vector<std::int64_t> full;
        full.reserve(ss.size() + 1);
        full.push_back(N);
        full.insert(full.end(), ss.begin(), ss.end());
        return full;
    };

    switch (n.kind) {
        case OpKind::Input:
            return;

        case OpKind::Conv2d: {
            const Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(src.sample_shape[0]);
            int H = static_cast<int>(src.sample_shape[1]);
            int W = static_cast<int>(src.sample_shape[2]);
            int Co = static_cast<int>(n.sample_shape[0]);
            int oh = n.out_h, ow = n.out_w;
            std::int64_t K = std::int64_t(C) * n.kh * n.kw;
            std::int64_t P = std::int64_t(oh) * ow;
            n.out = TensorT<S>(batched(n.sample_shape));
            std::vector<S> col(K * P);
            const TensorT<S>& wv = params_[n.params[0]].value;
            const TensorT<S>& bv = params_[n.params[1]].value;
            CMapRM<S> Wm(wv.data.data(), Co, K);
            for (int b = 0; b < N; ++b) {
                const S* x = src.out.data.data() + std::int64_t(b) * C * H * W;
                im2col(x, C, H, W, n.kh, n.kw, n.stride, n.pad, oh, ow, col.data());
                CMapRM<S> colM(col.data(), K, P);
                MapRM<S> outM(n.out.data.data() + std::int64_t(b) * Co * P, Co, P);
                outM.noalias() = Wm * colM;
                for (int c = 0; c < Co; ++c) outM.row(c).array() += bv.data[c];
            }
            return;
        }

        case OpKind::BatchNorm2d: {
            const Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(n.sample_shape[0]);
            std::int64_t HW = n.sample_shape[1] * n.sample_shape[2];
            std::int64_t plane = HW;
            std::int64_t per = std::int64_t(C) * HW;
            n.out = TensorT<S>(batched(n.sample_shape));
            n.aux = TensorT<S>(n.out.shape);
            n.aux2 = TensorT<S>({C});
            TensorT<S>& gamma = params_[n.params[0]].value;
            TensorT<S>& beta = params_[n.params[1]].value;
            TensorT<S>& rmean = params_[n.params[2]].value;
            TensorT<S>& rvar = params_[n.params[3]].value;
            const double m = double(N) * double(HW);
            for (int c = 0; c < C; ++c) {
                double mean, var;
                if (training) {
                    double sum = 0.0, sq = 0.0;
                    for (int b = 0; b < N; ++b) {
                        const S* x = src.out.data.data() + b * per + c * plane;
                        for (std::int64_t i = 0; i < HW; ++i) {
                            sum += x[i];
                            sq += double(x[i]) * x[i];
                        }
                    }
                    mean = sum / m;
                    var = sq / m - mean * mean;
                    if (var < 0) var = 0;
                    double unbiased = m > 1 ? var * m / (m - 1) : var;
                    rmean.data[c] = S((1.0 - n.momentum) * rmean.data[c] + n.momentum * mean);
                    rvar.data[c] = S((1.0 - n.momentum) * rvar.data[c] + n.momentum * unbiased);
                } else {
                    mean = rmean.data[c];
                    var = rvar.data[c];
                }
                double invstd = 1.0 / std::sqrt(var + n.eps);
                n.aux2.data[c] = S(invstd);
                const S g = gamma.data[c], bt = beta.data[c];
                for (int b = 0; b < N; ++b) {
                    const S* x = src.out.data.data() + b * per + c * plane;
                    S* xh = n.aux.data.data() + b * per + c * plane;
                    S* y = n.out.data.data() + b * per + c * plane;
                    for (std::int64_t i = 0; i < HW; ++i) {
                        S v = S((double(x[i]) - mean) * invstd);
                        xh[i] = v;
                        y[i] = g * v + bt;
                    }
                }
            }
            return;
        }

        case OpKind::Relu: {
            const Node& src = nodes_[n.inputs[0]];
            n.out = TensorT<S>(src.out.shape);
            double margin = std::numeric_limits<double>::infinity();
            for (std::int64_t i = 0; i < src.out.numel(); ++i) {
                S v = src.out.data[i];
                n.out.data[i] = v > S(0) ? v : S(0);
                double a = std::abs(double(v));
                if (a < margin) margin = a;
            }
            n.kink_margin = margin;
            return;
        }

        case OpKind::MaxPool2d: {
            const Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(src.sample_shape[0]);
            int H = static_cast<int>(src.sample_shape[1]);
            int W = static_cast<int>(src.sample_shape[2]);
            int oh = n.out_h, ow = n.out_w, k = n.kh, st = n.stride;
            n.out = TensorT<S>(batched(n.sample_shape));
            n.switches.assign(n.out.numel(), -1);
            double margin = std::numeric_limits<double>::infinity();
            std::int64_t oi = 0;
            for (int b = 0; b < N; ++b) {
                for (int c = 0; c < C; ++c) {
                    const S* plane = src.out.data.data() +
                                     (std::int64_t(b) * C + c) * H * W;
                    for (int oy = 0; oy < oh; ++oy) {
                        for (int ox = 0; ox < ow; ++ox, ++oi) {
                            S best = -std::numeric_limits<S>::infinity();
                            S second = best;
                            int arg = -1;
                            for (int ky = 0; ky < k; ++ky) {
                                int iy = oy * st + ky;
                                for (int kx = 0; kx < k; ++kx) {
                                    int ix = ox * st + kx;
                                    S v = plane[iy * W + ix];
                                    if (v > best) {
                                        second = best;
                                        best = v;
                                        arg = iy * W + ix;
                                    } else if (v > second) {
                                        second = v;
                                    }
                                }
                            }
                            n.out.data[oi] = best;
                            n.switches[oi] = arg;
                            // exact ties at zero are relu-clipped plateaus:
                            // locally constant, so no switching hazard
                            if (k > 1 && !(best == S(0) && second == S(0))) {
                                double gap = double(best) - double(second);
                                if (gap < margin) margin = gap;
                            }
                        }
                    }
                }
            }
            n.kink_margin = margin;
            return;
        }

        case OpKind::AvgPool2d: {
            const Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(src.sample_shape[0]);
            int H = static_cast<int>(src.sample_shape[1]);
            int W = static_cast<int>(src.sample_shape[2]);
            int oh = n.out_h, ow = n.out_w, k = n.kh, st = n.stride;
            n.out = TensorT<S>(batched(n.sample_shape));
            const S inv = S(1) / S(k * k);
            std::int64_t oi = 0;
            for (int b = 0; b < N; ++b)
                for (int c = 0; c < C; ++c) {
                    const S* plane = src.out.data.data() +
                                     (std::int64_t(b) * C + c) * H * W;
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox, ++oi) {
                            S acc = 0;
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx)
                                    acc += plane[(oy * st + ky) * W + (ox * st + kx)];
                            n.out.data[oi] = acc * inv;
                        }
                }
            return;
        }

        case OpKind::GlobalAvgPool: {
            const Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(src.sample_shape[0]);
            std::int64_t HW = src.sample_shape[1] * src.sample_shape[2];
            n.out = TensorT<S>(batched(n.sample_shape));
            for (int b = 0; b < N; ++b)
                for (int c = 0; c < C; ++c) {
                    const S* plane = src.out.data.data() + (std::int64_t(b) * C + c) * HW;
                    double acc = 0;
                    for (std::int64_t i = 0; i < HW; ++i) acc += plane[i];
                    n.out.data[std::int64_t(b) * C + c] = S(acc / double(HW));
                }
            return;
        }

        case OpKind::TopKAvgPool: {
            const Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(src.sample_shape[0]);
            std::int64_t HW = src.sample_shape[1] * src.sample_shape[2];
            int k = std::max(1, int(std::llround(n.fraction * double(HW))));
            if (k > HW) k = static_cast<int>(HW);
            n.out = TensorT<S>(batched(n.sample_shape));
            n.switches.assign(std::size_t(N) * C * k, -1);
            double margin = std::numeric_limits<double>::infinity();
            std::vector<int> idx(HW);
            for (int b = 0; b < N; ++b)
                for (int c = 0; c < C; ++c) {
                    const S* plane = src.out.data.data() + (std::int64_t(b) * C + c) * HW;
                    std::iota(idx.begin(), idx.end(), 0);
                    std::sort(idx.begin(), idx.end(), [&](int a, int bb) {
                        if (plane[a] != plane[bb]) return plane[a] > plane[bb];
                        return a < bb;
                    });
                    double acc = 0;
                    for (int j = 0; j < k; ++j) {
                        acc += plane[idx[j]];
                        n.switches[(std::size_t(b) * C + c) * k + j] = idx[j];
                    }
                    n.out.data[std::int64_t(b) * C + c] = S(acc / double(k));
                    if (k < HW && !(plane[idx[k - 1]] == S(0) && plane[idx[k]] == S(0))) {
                        double gap = double(plane[idx[k - 1]]) - double(plane[idx[k]]);
                        if (gap < margin) margin = gap;
                    }
                }
            n.kink_margin = margin;
            return;
        }

        case OpKind::Dense: {
            const Node& src = nodes_[n.inputs[0]];
            int F = static_cast<int>(src.sample_shape[0]);
            int O = static_cast<int>(n.sample_shape[0]);
            n.out = TensorT<S>(batched(n.sample_shape));
            const TensorT<S>& wv = params_[n.params[0]].value;
            CMapRM<S> X(src.out.data.data(), N, F);
            CMapRM<S> Wm(wv.data.data(), O, F);
            MapRM<S> Y(n.out.data.data(), N, O);
            Y.noalias() = X * Wm.transpose();
            if (n.params.size() > 1) {
                const TensorT<S>& bv = params_[n.params[1]].value;
                CMapRM<S> Bm(bv.data.data(), 1, O);
                Y.rowwise() += Bm.row(0);
            }
            return;
        }

        case OpKind::Add: {
            const Node& a = nodes_[n.inputs[0]];
            const Node& b = nodes_[n.inputs[1]];
            n.out = TensorT<S>(a.out.shape);
            for (std::int64_t i = 0; i < a.out.numel(); ++i)
                n.out.data[i] = a.out.data[i] + b.out.data[i];
            return;
        }

        case OpKind::Softmax: {
            const Node& src = nodes_[n.inputs[0]];
            int K = static_cast<int>(n.sample_shape[0]);
            n.out = TensorT<S>(src.out.shape);
            for (int b = 0; b < N; ++b) {
                const S* x = src.out.data.data() + std::int64_t(b) * K;
                S* y = n.out.data.data() + std::int64_t(b) * K;
                S mx = *std::max_element(x, x + K);
                double z = 0;
                for (int j = 0; j < K; ++j) z += std::exp(double(x[j] - mx));
                for (int j = 0; j < K; ++j) y[j] = S(std::exp(double(x[j] - mx)) / z);
            }
            return;
        }

        case OpKind::CrossEntropySoftmax: {
            const Node& src = nodes_[n.inputs[0]];
            int K = static_cast<int>(src.sample_shape[0]);
            if (static_cast<int>(labels_.size()) != N)
                throw Error("crossentropy: set_labels must provide one label per sample (" +
                            std::to_string(labels_.size()) + " vs batch " +
                            std::to_string(N) + ")");
            n.aux = TensorT<S>(src.out.shape);
            n.out = TensorT<S>({1});
            double loss = 0;
            for (int b = 0; b < N; ++b) {
                int y = labels_[b];
                if (y < 0 || y >= K) throw Error("crossentropy: label out of range");
                const S* x = src.out.data.data() + std::int64_t(b) * K;
                S* p = n.aux.data.data() + std::int64_t(b) * K;
                S mx = *std::max_element(x, x + K);
                double z = 0;
                for (int j = 0; j < K; ++j) z += std::exp(double(x[j] - mx));
                for (int j = 0; j < K; ++j) p[j] = S(std::exp(double(x[j] - mx)) / z);
                loss -= double(x[y] - mx) - std::log(z);
            }
            n.out.data[0] = S(loss / N);
            return;
        }

        case OpKind::L2DistanceMap: {
            const Node& src = nodes_[n.inputs[0]];
            int D = static_cast<int>(src.sample_shape[0]);
            std::int64_t HW = src.sample_shape[1] * src.sample_shape[2];
            int M = static_cast<int>(n.sample_shape[0]);
            n.out = TensorT<S>(batched(n.sample_shape));
            const TensorT<S>& P = params_[n.params[0]].value;
            for (int b = 0; b < N; ++b) {
                const S* z = src.out.data.data() + std::int64_t(b) * D * HW;
                S* o = n.out.data.data() + std::int64_t(b) * M * HW;
                for (int m = 0; m < M; ++m) {
                    const S* p = P.data.data() + std::int64_t(m) * D;
                    S* om = o + std::int64_t(m) * HW;
                    std::fill(om, om + HW, S(0));
                    for (int d = 0; d < D; ++d) {
                        const S* zd = z + std::int64_t(d) * HW;
                        const S pd = p[d];
                        for (std::int64_t i = 0; i < HW; ++i) {
                            S diff = zd[i] - pd;
                            om[i] += diff * diff;
                        }
                    }
                }
            }
            return;
        }

        case OpKind::SimilarityLog: {
            const Node& src = nodes_[n.inputs[0]];
            n.out = TensorT<S>(src.out.shape);
            const double eps = n.eps;
            for (std::int64_t i = 0; i < src.out.numel(); ++i) {
                double d = double(src.out.data[i]);
                n.out.data[i] = S(std::log((d + 1.0) / (d + eps)));
            }
            return;
        }

        case OpKind::UpsampleBilinear: {
            const Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(src.sample_shape[0]);
            int h = static_cast<int>(src.sample_shape[1]);
            int w = static_cast<int>(src.sample_shape[2]);
            int H = n.out_h, W = n.out_w;
            n.out = TensorT<S>(batched(n.sample_shape));
            double sy = H > 1 ? double(h - 1) / double(H - 1) : 0.0;
            double sx = W > 1 ? double(w - 1) / double(W - 1) : 0.0;
            for (int b = 0; b < N; ++b)
                for (int c = 0; c < C; ++c) {
                    const S* in = src.out.data.data() + (std::int64_t(b) * C + c) * h * w;
                    S* out = n.out.data.data() + (std::int64_t(b) * C + c) * H * W;
                    for (int y = 0; y < H; ++y) {
                        double fy = y * sy;
                        int y0 = static_cast<int>(fy);
                        int y1 = std::min(y0 + 1, h - 1);
                        double wy = fy - y0;
                        for (int x = 0; x < W; ++x) {
                            double fx = x * sx;
                            int x0 = static_cast<int>(fx);
                            int x1 = std::min(x0 + 1, w - 1);
                            double wx = fx - x0;
                            double v = (1 - wy) * ((1 - wx) * in[y0 * w + x0] +
                                                   wx * in[y0 * w + x1]) +
                                       wy * ((1 - wx) * in[y1 * w + x0] +
                                             wx * in[y1 * w + x1]);
                            out[y * W + x] = S(v);
                        }
                    }
                }
            return;
        }

        case OpKind::SumAll: {
            const Node& src = nodes_[n.inputs[0]];
            n.out = TensorT<S>({1});
            double acc = 0;
            for (std::int64_t i = 0; i < src.out.numel(); ++i) acc += src.out.data[i];
            n.out.data[0] = S(acc);
            return;
        }
    }
    throw Error("forward: unhandled op");
}

// ---- backward -------------------------------------------------------------

template <class S>
void GraphT<S>::backward(const TensorT<S>& output_grad, GradMode mode) {
    backward_from({{output_node(), output_grad}}, mode);
}

template <class S>
void GraphT<S>::backward_from(const std::vector<std::pair<int, TensorT<S>>>& seeds,
                              GradMode mode) {
    if (!forward_done_)
        throw StaleGraphError("backward called without a cached forward pass");
    if (seeds.empty()) throw Error("backward_from: no seeds");

    for (auto& nd : nodes_) {
        nd.grad = TensorT<S>(nd.out.shape);
    }
    std::vector<char> touched(nodes_.size(), 0);
    for (const auto& [id, g] : seeds) {
        check_node_id(id, "backward_from");
        if (!g.same_shape(nodes_[id].out))
            throw Error("seed shape " + g.shape_str() + " does not match activation " +
                        nodes_[id].out.shape_str());
        for (std::int64_t i = 0; i < g.numel(); ++i) nodes_[id].grad.data[i] += g.data[i];
        touched[id] = 1;
    }
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
        if (!touched[id]) continue;
        Node& n = nodes_[id];
        if (n.kind == OpKind::Input) continue;
        backward_node(n, mode);
        for (int s : n.inputs) touched[s] = 1;
    }
    ++backward_count_;
}

template <class S>
void GraphT<S>::backward_node(Node& n, GradMode mode) {
    const int N = batch_n_;
    switch (n.kind) {
        case OpKind::Input:
            return;

        case OpKind::Conv2d: {
            Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(src.sample_shape[0]);
            int H = static_cast<int>(src.sample_shape[1]);
            int W = static_cast<int>(src.sample_shape[2]);
            int Co = static_cast<int>(n.sample_shape[0]);
            int oh = n.out_h, ow = n.out_w;
            std::int64_t K = std::int64_t(C) * n.kh * n.kw;
            std::int64_t P = std::int64_t(oh) * ow;
            ParamT<S>& wp = params_[n.params[0]];
            ParamT<S>& bp = params_[n.params[1]];
            CMapRM<S> Wm(wp.value.data.data(), Co, K);
            MapRM<S> dW(wp.value.grad.data(), Co, K);
            std::vector<S> col(K * P), dcol(K * P);
            for (int b = 0; b < N; ++b) {
                const S* x = src.out.data.data() + std::int64_t(b) * C * H * W;
                CMapRM<S> dY(n.grad.data.data() + std::int64_t(b) * Co * P, Co, P);
                im2col(x, C, H, W, n.kh, n.kw, n.stride, n.pad, oh, ow, col.data());
                CMapRM<S> colM(col.data(), K, P);
                dW.noalias() += dY * colM.transpose();
                MapRM<S> dcolM(dcol.data(), K, P);
                dcolM.noalias() = Wm.transpose() * dY;
                col2im(dcol.data(), C, H, W, n.kh, n.kw, n.stride, n.pad, oh, ow,
                       src.grad.data.data() + std::int64_t(b) * C * H * W);
                // fixed-order scalar sum: Eigen's redux order depends on
                // buffer alignment, which would break bitwise reproducibility
                const S* dyb = n.grad.data.data() + std::int64_t(b) * Co * P;
                for (int c = 0; c < Co; ++c) {
                    S acc = S(0);
                    const S* row = dyb + std::int64_t(c) * P;
                    for (std::int64_t p = 0; p < P; ++p) acc += row[p];
                    bp.value.grad[c] += acc;
                }
            }
            return;
        }

        case OpKind::BatchNorm2d: {
            Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(n.sample_shape[0]);
            std::int64_t HW = n.sample_shape[1] * n.sample_shape[2];
            std::int64_t per = std::int64_t(C) * HW;
            ParamT<S>& gp = params_[n.params[0]];
            ParamT<S>& bp = params_[n.params[1]];
            const double m = double(N) * double(HW);
            for (int c = 0; c < C; ++c) {
                double sum_dy = 0, sum_dy_xh = 0;
                for (int b = 0; b < N; ++b) {
                    const S* dy = n.grad.data.data() + b * per + c * HW;
                    const S* xh = n.aux.data.data() + b * per + c * HW;
                    for (std::int64_t i = 0; i < HW; ++i) {
                        sum_dy += dy[i];
                        sum_dy_xh += double(dy[i]) * xh[i];
                    }
                }
                gp.value.grad[c] += S(sum_dy_xh);
                bp.value.grad[c] += S(sum_dy);
                const double g = gp.value.data[c];
                const double invstd = n.aux2.data[c];
                if (training_forward_) {
                    for (int b = 0; b < N; ++b) {
                        const S* dy = n.grad.data.data() + b * per + c * HW;
                        const S* xh = n.aux.data.data() + b * per + c * HW;
                        S* dx = src.grad.data.data() + b * per + c * HW;
                        for (std::int64_t i = 0; i < HW; ++i) {
                            double v = g * invstd *
                                       (double(dy[i]) - sum_dy / m - double(xh[i]) * sum_dy_xh / m);
                            dx[i] += S(v);
                        }
                    }
                } else {
                    const double scale = g * invstd;
                    for (int b = 0; b < N; ++b) {
                        const S* dy = n.grad.data.data() + b * per + c * HW;
                        S* dx = src.grad.data.data() + b * per + c * HW;
                        for (std::int64_t i = 0; i < HW; ++i) dx[i] += S(scale * dy[i]);
                    }
                }
            }
            return;
        }

        case OpKind::Relu: {
            Node& src = nodes_[n.inputs[0]];
            const std::int64_t M = src.out.numel();
            switch (mode) {
                case GradMode::Standard:
                    for (std::int64_t i = 0; i < M; ++i)
                        if (src.out.data[i] > S(0)) src.grad.data[i] += n.grad.data[i];
                    break;
                case GradMode::DeconvReLU:
                    for (std::int64_t i = 0; i < M; ++i)
                        if (n.grad.data[i] > S(0)) src.grad.data[i] += n.grad.data[i];
                    break;
                case GradMode::GuidedReLU:
                    for (std::int64_t i = 0; i < M; ++i)
                        if (src.out.data[i] > S(0) && n.grad.data[i] > S(0))
                            src.grad.data[i] += n.grad.data[i];
                    break;
            }
            return;
        }

        case OpKind::MaxPool2d: {
            Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(src.sample_shape[0]);
            std::int64_t HW = src.sample_shape[1] * src.sample_shape[2];
            std::int64_t oHW = std::int64_t(n.out_h) * n.out_w;
            std::int64_t oi = 0;
            for (int b = 0; b < N; ++b)
                for (int c = 0; c < C; ++c) {
                    S* gplane = src.grad.data.data() + (std::int64_t(b) * C + c) * HW;
                    for (std::int64_t j = 0; j < oHW; ++j, ++oi)
                        gplane[n.switches[oi]] += n.grad.data[oi];
                }
            return;
        }

        case OpKind::AvgPool2d: {
            Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(src.sample_shape[0]);
            int H = static_cast<int>(src.sample_shape[1]);
            int W = static_cast<int>(src.sample_shape[2]);
            int oh = n.out_h, ow = n.out_w, k = n.kh, st = n.stride;
            const S inv = S(1) / S(k * k);
            std::int64_t oi = 0;
            for (int b = 0; b < N; ++b)
                for (int c = 0; c < C; ++c) {
                    S* gplane = src.grad.data.data() + (std::int64_t(b) * C + c) * H * W;
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox, ++oi) {
                            S g = n.grad.data[oi] * inv;
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx)
                                    gplane[(oy * st + ky) * W + (ox * st + kx)] += g;
                        }
                }
            return;
        }

        case OpKind::GlobalAvgPool: {
            Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(src.sample_shape[0]);
            std::int64_t HW = src.sample_shape[1] * src.sample_shape[2];
            for (int b = 0; b < N; ++b)
                for (int c = 0; c < C; ++c) {
                    S g = n.grad.data[std::int64_t(b) * C + c] / S(HW);
                    S* gplane = src.grad.data.data() + (std::int64_t(b) * C + c) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) gplane[i] += g;
                }
            return;
        }

        case OpKind::TopKAvgPool: {
            Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(src.sample_shape[0]);
            std::int64_t HW = src.sample_shape[1] * src.sample_shape[2];
            int k = static_cast<int>(n.switches.size() / (std::size_t(N) * C));
            for (int b = 0; b < N; ++b)
                for (int c = 0; c < C; ++c) {
                    S g = n.grad.data[std::int64_t(b) * C + c] / S(k);
                    S* gplane = src.grad.data.data() + (std::int64_t(b) * C + c) * HW;
                    const std::int32_t* sel = n.switches.data() + (std::size_t(b) * C + c) * k;
                    for (int j = 0; j < k; ++j) gplane[sel[j]] += g;
                }
            return;
        }

        case OpKind::Dense: {
            Node& src = nodes_[n.inputs[0]];
            int F = static_cast<int>(src.sample_shape[0]);
            int O = static_cast<int>(n.sample_shape[0]);
            ParamT<S>& wp = params_[n.params[0]];
            CMapRM<S> X(src.out.data.data(), N, F);
            CMapRM<S> Wm(wp.value.data.data(), O, F);
            CMapRM<S> dY(n.grad.data.data(), N, O);
            MapRM<S> dX(src.grad.data.data(), N, F);
            MapRM<S> dW(wp.value.grad.data(), O, F);
            dX.noalias() += dY * Wm;
            dW.noalias() += dY.transpose() * X;
            if (n.params.size() > 1) {
                ParamT<S>& bp = params_[n.params[1]];
                for (int o = 0; o < O; ++o) {
                    S acc = S(0);
                    for (int b = 0; b < N; ++b) acc += n.grad.data[std::int64_t(b) * O + o];
                    bp.value.grad[o] += acc;
                }
            }
            return;
        }

        case OpKind::Add: {
            Node& a = nodes_[n.inputs[0]];
            Node& b = nodes_[n.inputs[1]];
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
                a.grad.data[i] += n.grad.data[i];
                b.grad.data[i] += n.grad.data[i];
            }
            return;
        }

        case OpKind::Softmax: {
            Node& src = nodes_[n.inputs[0]];
            int K = static_cast<int>(n.sample_shape[0]);
            for (int b = 0; b < N; ++b) {
                const S* y = n.out.data.data() + std::int64_t(b) * K;
                const S* dy = n.grad.data.data() + std::int64_t(b) * K;
                S* dx = src.grad.data.data() + std::int64_t(b) * K;
                double dot = 0;
                for (int j = 0; j < K; ++j) dot += double(dy[j]) * y[j];
                for (int j = 0; j < K; ++j)
                    dx[j] += S(double(y[j]) * (double(dy[j]) - dot));
            }
            return;
        }

        case OpKind::CrossEntropySoftmax: {
            Node& src = nodes_[n.inputs[0]];
            int K = static_cast<int>(src.sample_shape[0]);
            const S seed = n.grad.data[0];
            for (int b = 0; b < N; ++b) {
                const S* p = n.aux.data.data() + std::int64_t(b) * K;
                S* dx = src.grad.data.data() + std::int64_t(b) * K;
                int y = labels_[b];
                for (int j = 0; j < K; ++j) {
                    S delta = (j == y) ? S(1) : S(0);
                    dx[j] += seed * (p[j] - delta) / S(N);
                }
            }
            return;
        }

        case OpKind::L2DistanceMap: {
            Node& src = nodes_[n.inputs[0]];
            int D = static_cast<int>(src.sample_shape[0]);
            std::int64_t HW = src.sample_shape[1] * src.sample_shape[2];
            int M = static_cast<int>(n.sample_shape[0]);
            ParamT<S>& pp = params_[n.params[0]];
            for (int b = 0; b < N; ++b) {
                const S* z = src.out.data.data() + std::int64_t(b) * D * HW;
                S* dz = src.grad.data.data() + std::int64_t(b) * D * HW;
                const S* go = n.grad.data.data() + std::int64_t(b) * M * HW;
                for (int m = 0; m < M; ++m) {
                    const S* p = pp.value.data.data() + std::int64_t(m) * D;
                    S* dp = pp.value.grad.data() + std::int64_t(m) * D;
                    const S* gm = go + std::int64_t(m) * HW;
                    for (int d = 0; d < D; ++d) {
                        const S* zd = z + std::int64_t(d) * HW;
                        S* dzd = dz + std::int64_t(d) * HW;
                        const S pd = p[d];
                        double dpacc = 0;
                        for (std::int64_t i = 0; i < HW; ++i) {
                            S diff = zd[i] - pd;
                            S t = S(2) * gm[i] * diff;
                            dzd[i] += t;
                            dpacc -= double(t);
                        }
                        dp[d] += S(dpacc);
                    }
                }
            }
            return;
        }

        case OpKind::SimilarityLog: {
            Node& src = nodes_[n.inputs[0]];
            const double eps = n.eps;
            for (std::int64_t i = 0; i < src.out.numel(); ++i) {
                double d = double(src.out.data[i]);
                double dd = 1.0 / (d + 1.0) - 1.0 / (d + eps);
                src.grad.data[i] += S(double(n.grad.data[i]) * dd);
            }
            return;
        }

        case OpKind::UpsampleBilinear: {
            Node& src = nodes_[n.inputs[0]];
            int C = static_cast<int>(src.sample_shape[0]);
            int h = static_cast<int>(src.sample_shape[1]);
            int w = static_cast<int>(src.sample_shape[2]);
            int H = n.out_h, W = n.out_w;
            double sy = H > 1 ? double(h - 1) / double(H - 1) : 0.0;
            double sx = W > 1 ? double(w - 1) / double(W - 1) : 0.0;
            for (int b = 0; b < N; ++b)
                for (int c = 0; c < C; ++c) {
                    S* din = src.grad.data.data() + (std::int64_t(b) * C + c) * h * w;
                    const S* dout = n.grad.data.data() + (std::int64_t(b) * C + c) * H * W;
                    for (int y = 0; y < H; ++y) {
                        double fy = y * sy;
                        int y0 = static_cast<int>(fy);
                        int y1 = std::min(y0 + 1, h - 1);
                        double wy = fy - y0;
                        for (int x = 0; x < W; ++x) {
                            double fx = x * sx;
                            int x0 = static_cast<int>(fx);
                            int x1 = std::min(x0 + 1, w - 1);
                            double wx = fx - x0;
                            double g = dout[y * W + x];
                            din[y0 * w + x0] += S((1 - wy) * (1 - wx) * g);
                            din[y0 * w + x1] += S((1 - wy) * wx * g);
                            din[y1 * w + x0] += S(wy * (1 - wx) * g);
                            din[y1 * w + x1] += S(wy * wx * g);
                        }
                    }
                }
            return;
        }

        case OpKind::SumAll: {
            Node& src = nodes_[n.inputs[0]];
            const S g = n.grad.data[0];
            for (std::int64_t i = 0; i < src.grad.numel(); ++i) src.grad.data[i] += g;
            return;
        }
    }
    throw Error("backward: unhandled op");
}

// ---- misc -----------------------------------------------------------------

template <class S>
void GraphT<S>::zero_grad() {
    for (auto& p : params_)
        if (p.trainable) p.value.zero_grad();
}

template <class S>
const TensorT<S>& GraphT<S>::activation(int id) const {
    check_node_id(id, "activation");
    if (!forward_done_) throw StaleGraphError("no cached forward pass");
    return nodes_[id].out;
}

template <class S>
const TensorT<S>& GraphT<S>::node_grad(int id) const {
    check_node_id(id, "node_grad");
    if (nodes_[id].grad.data.empty())
        throw StaleGraphError("no cached backward pass for node " + std::to_string(id));
    return nodes_[id].grad;
}

template <class S>
double GraphT<S>::min_kink_margin() const {
    if (!forward_done_) throw StaleGraphError("no cached forward pass");
    double m = std::numeric_limits<double>::infinity();
    for (const auto& n : nodes_) m = std::min(m, n.kink_margin);
    return m;
}

template <class S>
void init_params(GraphT<S>& g, Rng rng) {
    auto ends_with = [](const std::string& s, const char* suf) {
        std::size_t n = std::strlen(suf);
        return s.size() >= n && s.compare(s.size() - n, n, suf) == 0;
    };
    for (auto& p : g.params()) {
        if (p.is_buffer) continue;
        const auto& sh = p.value.shape;
        if (ends_with(p.name, ".bias")) {
            p.value.fill(S(0));
        } else if (ends_with(p.name, ".weight") && sh.size() == 1) {
            p.value.fill(S(1));
        } else if (ends_with(p.name, ".weight")) {
            std::int64_t fan_in = 1;
            for (std::size_t i = 1; i < sh.size(); ++i) fan_in *= sh[i];
            double std = std::sqrt(2.0 / double(fan_in));
            for (auto& v : p.value.data) v = S(rng.normal() * std);
        } else {
            for (auto& v : p.value.data) v = S(rng.uniform());
        }
    }
    g.invalidate();
}

template class GraphT<float>;
template class GraphT<double>;
template void init_params<float>(GraphT<float>&, Rng);
template void init_params<double>(GraphT<double>&, Rng);

}  // namespace protosal
