#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// Every op builds a node that records its inputs and a backward rule; the
// graph is rebuilt on each forward pass. backward() orders the reachable
// nodes by creation sequence (a valid topological order, since inputs are
// always created before the ops that consume them) and runs each rule once
// in reverse.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cilia/errors.hpp"
#include "cilia/rng.hpp"

namespace cilia::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node;

using BackwardFn = std::function<void(Node&)>;

struct Node {
    Shape shape;
    Eigen::VectorXd value;
    Eigen::VectorXd grad;  // empty until first accumulation
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;

    /// Gradient buffer, allocated as zeros on first use.
    Eigen::VectorXd& grad_buffer();
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::span<const double> values, bool requires_grad = false);
    static Tensor from(Shape shape, Eigen::VectorXd values, bool requires_grad = false);
    static Tensor from(Shape shape, std::initializer_list<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    /// Uniform in [-bound, bound).
    static Tensor uniform(Shape shape, double bound, Rng& rng, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;

    const Eigen::VectorXd& value() const;
    double item() const;
    double at(std::size_t flat_index) const { return value()[static_cast<Eigen::Index>(flat_index)]; }

    bool requires_grad() const;
    bool has_grad() const;
    /// ∂loss/∂this after backward(); zeros if nothing flowed back.
    Eigen::VectorXd grad() const;
    void zero_grad();

    /// Writable storage for leaves (parameter initialisation and optimiser
    /// updates). Throws for interior nodes.
    Eigen::VectorXd& mutable_value();

    /// Same values, cut from the graph.
    Tensor detach() const;
    /// Same storage order, new extents; the gradient flows through.
    Tensor reshape(Shape shape) const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    friend Tensor make_op(Shape, Eigen::VectorXd, std::vector<Tensor>, BackwardFn);
    std::shared_ptr<Node> node_;
};

/// Creates a result node; attaches inputs and the backward rule only when
/// gradient recording is enabled and some input requires a gradient.
Tensor make_op(Shape shape, Eigen::VectorXd value, std::vector<Tensor> inputs, BackwardFn backward);

/// Disables graph construction on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// The ordered list of operations reachable from a root.
class Tape {
public:
    static Tape record(const Tensor& root);

    /// Seeds the root gradient with `seed` and runs every backward rule once,
    /// latest operation first.
    void backward(const Eigen::VectorXd& seed);

    std::size_t size() const { return nodes_.size(); }
    /// Creation-ordered nodes (inputs before consumers).
    const std::vector<Node*>& nodes() const { return nodes_; }

private:
    std::vector<Node*> nodes_;
    std::shared_ptr<Node> root_;
};

/// Populates grad() of every requires_grad leaf reachable from `loss`.
/// Leaf gradients accumulate across calls until zero_grad().
void backward(const Tensor& loss);

// ---- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);

enum class Pointwise { sigmoid, tanh, relu };
Tensor pointwise(Pointwise fn, const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }

/// x[N, ...] ∘ w[...]: the same weights applied to every sample of a batch.
Tensor mul_shared(const Tensor& x, const Tensor& w);
/// x[N, C, ...] + b[C] per channel.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

// ---- reductions ----------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- layers --------------------------------------------------------------

/// Cross-correlation of x[N,C,H,W] with k[F,C,kH,kW], zero padding.
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride = 1, int padding = 0);

/// Softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Mean negative log-likelihood of `labels` under `probs`, where the class
/// axis is 1 (probs[N,C] or probs[N,C,H,W]; labels hold one class index per
/// N·H·W position in row-major order). With class weights the mean is
/// Σ w_y·(−log p_y) / Σ w_y.
Tensor cross_entropy(const Tensor& probs, std::span<const int> labels,
                     std::span<const double> class_weights = {});

/// x[N,C,H,W] -> [N,C].
Tensor global_avg_pool(const Tensor& x);
/// x[N,D]·W[D,K] + b[K] -> [N,K].
Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Inverted dropout; identity when !training or rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);
/// Non-overlapping window·window max pooling of x[N,C,H,W].
Tensor max_pool2d(const Tensor& x, int window = 2);
/// Nearest-neighbour upsampling of x[N,C,H,W] by an integer factor.
Tensor nearest_upsample2d(const Tensor& x, int factor = 2);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
/// Contiguous range [start, start+length) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

}  // namespace cilia::ad
