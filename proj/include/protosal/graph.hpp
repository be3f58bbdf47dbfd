#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "protosal/rng.hpp"
#include "protosal/tensor.hpp"

namespace protosal {

// Backward rule applied at ReLU nodes. Standard is the exact chain rule;
// the other two reproduce the deconvolution and guided-backpropagation
// signal-routing rules. Forward outputs are identical in all modes.
enum class GradMode { Standard, DeconvReLU, GuidedReLU };

enum class OpKind {
    Input,
    Conv2d,
    BatchNorm2d,
    Relu,
    MaxPool2d,
    AvgPool2d,
    GlobalAvgPool,
    TopKAvgPool,
    Dense,
    Add,
    Softmax,
    CrossEntropySoftmax,
    L2DistanceMap,
    SimilarityLog,
    UpsampleBilinear,
    SumAll,
};

const char* op_kind_name(OpKind k);

// Learnable tensor or persistent buffer owned by a graph. Buffers
// (batch-norm running statistics) are checkpointed but never updated by
// optimizers and receive no gradient.
template <class S>
struct ParamT {
    std::string name;
    TensorT<S> value;
    bool trainable = true;
    bool is_buffer = false;
};

// Static computation graph over batched tensors. Per-sample shapes are fixed
// at build time; the batch dimension is free and taken from the input at
// forward time. Nodes are evaluated in insertion order (inputs must precede
// consumers), all activations are cached, and backward() can be seeded at
// any subset of nodes.
template <class S>
class GraphT {
public:
    struct Node {
        OpKind kind = OpKind::Input;
        std::vector<int> inputs;                // node ids
        std::vector<std::int64_t> sample_shape; // shape without the batch dim
        std::vector<int> params;                // indices into params_

        // op attributes (meaning depends on kind)
        int kh = 0, kw = 0, stride = 1, pad = 0;
        double fraction = 0.0;  // top-k pooling fraction
        double eps = 0.0;       // similarity regulariser / batch-norm epsilon
        double momentum = 0.1;  // batch-norm running-stat update rate
        int out_h = 0, out_w = 0;

        // forward/backward caches
        TensorT<S> out;
        TensorT<S> grad;
        std::vector<std::int32_t> switches;  // argmax / top-k selections
        TensorT<S> aux;                      // softmax probs, batch-norm x-hat, ...
        TensorT<S> aux2;                     // batch-norm inverse stddev
        double kink_margin = std::numeric_limits<double>::infinity();
    };

    // ---- construction -------------------------------------------------
    int add_input(std::vector<std::int64_t> sample_shape);
    int add_conv2d(int src, int out_channels, int kh, int kw, int stride, int pad,
                   const std::string& name);
    int add_batchnorm2d(int src, const std::string& name, double eps = 1e-5,
                        double momentum = 0.1);
    int add_relu(int src);
    int add_maxpool2d(int src, int k, int stride);
    int add_avgpool2d(int src, int k, int stride);
    int add_global_avg_pool(int src);
    int add_topk_avg_pool(int src, double fraction);
    int add_dense(int src, int out_features, bool with_bias, const std::string& name);
    int add_add(int a, int b);
    int add_softmax(int src);
    int add_cross_entropy_softmax(int logits);
    int add_l2_distance_map(int src, int num_prototypes, int ph, int pw,
                            const std::string& name);
    int add_similarity_log(int src, double eps);
    int add_upsample_bilinear(int src, int out_h, int out_w);
    int add_sum_all(int src);

    // ---- execution ----------------------------------------------------
    // Runs the whole graph on a batch whose trailing dims must equal the
    // input node's sample shape. Returns the last node's activation.
    const TensorT<S>& forward(const TensorT<S>& input, bool training = false);

    // Integer class targets for the cross-entropy node, set per batch.
    void set_labels(std::vector<int> labels);

    // Seeds the gradient at the last node and propagates. Throws
    // StaleGraphError if no forward pass has run since the last mutation.
    void backward(const TensorT<S>& output_grad, GradMode mode = GradMode::Standard);

    // Seeds gradients at arbitrary nodes (shapes must match their cached
    // activations) and propagates all of them in one reverse sweep.
    void backward_from(const std::vector<std::pair<int, TensorT<S>>>& seeds,
                       GradMode mode = GradMode::Standard);

    void zero_grad();

    // ---- inspection ---------------------------------------------------
    int output_node() const { return static_cast<int>(nodes_.size()) - 1; }
    int input_node() const { return input_node_; }
    std::size_t node_count() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_.at(id); }
    const TensorT<S>& activation(int id) const;
    const TensorT<S>& node_grad(int id) const;
    const TensorT<S>& input_gradient() const { return node_grad(input_node_); }

    std::vector<ParamT<S>>& params() { return params_; }
    const std::vector<ParamT<S>>& params() const { return params_; }
    ParamT<S>& param(const std::string& name);
    ParamT<S>* find_param(const std::string& name);

    std::int64_t backward_count() const { return backward_count_; }
    bool has_forward() const { return forward_done_; }
    int batch_size() const { return batch_n_; }

    // Smallest distance of any cached pre-activation to a point where a
    // piecewise rule switches (ReLU zero crossings, pooling/top-k ties).
    // Finite-difference harnesses resample inputs when this is too small.
    double min_kink_margin() const;

    // Invalidate cached activations (after loading parameters, etc.).
    void invalidate() { forward_done_ = false; }

private:
    int add_node(Node n);
    int new_param(const std::string& name, std::vector<std::int64_t> shape, bool trainable,
                  bool is_buffer);
    const std::vector<std::int64_t>& sample_shape(int id) const;
    void check_node_id(int id, const char* what) const;

    void forward_node(Node& n, bool training);
    void backward_node(Node& n, GradMode mode);

    std::vector<Node> nodes_;
    std::vector<ParamT<S>> params_;
    std::vector<int> labels_;
    int input_node_ = -1;
    int batch_n_ = 0;
    bool forward_done_ = false;
    bool training_forward_ = false;
    std::int64_t backward_count_ = 0;
};

using Graph = GraphT<float>;
using Graph64 = GraphT<double>;

// He-normal initialisation for conv/dense weights; zero for biases.
// Deterministic under the supplied stream.
template <class S>
void init_params(GraphT<S>& g, Rng rng);

}  // namespace protosal
