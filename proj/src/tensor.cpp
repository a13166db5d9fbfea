#include "cilia/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace cilia::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

std::atomic<std::uint64_t> g_sequence{0};
thread_local bool t_grad_enabled = true;

std::uint64_t next_sequence() { return g_sequence.fetch_add(1, std::memory_order_relaxed) + 1; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
    if (x.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(x.shape()));
    }
}

bool needs(const Node& n, std::size_t i) { return n.inputs[i]->requires_grad; }

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Eigen::VectorXd& Node::grad_buffer() {
    if (grad.size() != value.size()) grad = Eigen::VectorXd::Zero(value.size());
    return grad;
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::from(Shape shape, Eigen::VectorXd values, bool requires_grad) {
    if (numel(shape) != static_cast<std::size_t>(values.size())) {
        throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                         std::to_string(numel(shape)) + " elements, got " +
                         std::to_string(values.size()));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    node->seq = next_sequence();
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::span<const double> values, bool requires_grad) {
    Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(values.data(), idx(values.size()));
    return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, bool requires_grad) {
    return from(std::move(shape), std::span<const double>(values.begin(), values.size()), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = numel(shape);
    return from(std::move(shape), Eigen::VectorXd::Constant(idx(n), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({}, value, requires_grad); }

Tensor Tensor::uniform(Shape shape, double bound, Rng& rng, bool requires_grad) {
    Eigen::VectorXd v(idx(numel(shape)));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return from(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw Error("tensor: use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
    return shape()[axis];
}

std::size_t Tensor::size() const { return numel(shape()); }

const Eigen::VectorXd& Tensor::value() const {
    if (!node_) throw Error("tensor: use of undefined tensor");
    return node_->value;
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("tensor: item() on non-scalar " + to_string(shape()));
    return value()[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

Eigen::VectorXd Tensor::grad() const {
    if (!node_) throw Error("tensor: use of undefined tensor");
    if (!has_grad()) return Eigen::VectorXd::Zero(node_->value.size());
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.setZero();
}

Eigen::VectorXd& Tensor::mutable_value() {
    if (!node_) throw Error("tensor: use of undefined tensor");
    if (node_->backward) throw Error("tensor: mutable_value() on a non-leaf tensor");
    return node_->value;
}

Tensor Tensor::detach() const { return from(shape(), value(), false); }

Tensor Tensor::reshape(Shape new_shape) const {
    if (numel(new_shape) != size()) {
        throw ShapeError("reshape: cannot view " + to_string(shape()) + " as " + to_string(new_shape));
    }
    return make_op(std::move(new_shape), value(), {*this}, [](Node& n) {
        if (needs(n, 0)) n.inputs[0]->grad_buffer() += n.grad;
    });
}

Tensor make_op(Shape shape, Eigen::VectorXd value, std::vector<Tensor> inputs, BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->seq = next_sequence();
    assert(node->value.allFinite() && "non-finite forward result");
    if (t_grad_enabled) {
        const bool any = std::any_of(inputs.begin(), inputs.end(),
                                     [](const Tensor& t) { return t.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            node->inputs.reserve(inputs.size());
            for (auto& t : inputs) node->inputs.push_back(t.node());
            node->backward = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

// ---- Tape ------------------------------------------------------------------

Tape Tape::record(const Tensor& root) {
    Tape tape;
    tape.root_ = root.node();
    if (!tape.root_) throw Error("backward: undefined tensor");
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{tape.root_.get()};
    seen.insert(tape.root_.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        tape.nodes_.push_back(n);
        for (auto& in : n->inputs) {
            if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
        }
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(), [](const Node* a, const Node* b) { return a->seq < b->seq; });
    return tape;
}

void Tape::backward(const Eigen::VectorXd& seed) {
    for (Node* n : nodes_) {
        if (n->backward) n->grad = Eigen::VectorXd::Zero(n->value.size());
    }
    root_->grad_buffer() += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* n = *it;
        if (n->backward) n->backward(*n);
    }
}

void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + to_string(loss.shape()));
    if (!loss.requires_grad()) return;
    Tape::record(loss).backward(Eigen::VectorXd::Ones(1));
}

// ---- elementwise -----------------------------------------------------------

namespace {

// A scalar (one-element) operand is applied to every element.
bool is_scalar_pair(const Tensor& a, const Tensor& b) { return a.size() == 1 || b.size() == 1; }

Tensor binary(const Tensor& a, const Tensor& b, bool multiply, double b_sign, const char* op) {
    if (a.shape() != b.shape() && !is_scalar_pair(a, b)) require_same_shape(a, b, op);
    const bool a_scalar = a.size() == 1 && b.size() != 1;
    const bool b_scalar = b.size() == 1 && a.size() != 1;
    const Shape out_shape = a_scalar ? b.shape() : a.shape();
    const auto n = idx(numel(out_shape));
    auto expand = [n](const Tensor& t, bool scalar) -> Eigen::VectorXd {
        return scalar ? Eigen::VectorXd::Constant(n, t.value()[0]) : t.value();
    };
    const Eigen::VectorXd av = expand(a, a_scalar);
    const Eigen::VectorXd bv = expand(b, b_scalar);
    Eigen::VectorXd out = multiply ? Eigen::VectorXd(av.cwiseProduct(bv)) : Eigen::VectorXd(av + b_sign * bv);
    return make_op(out_shape, std::move(out), {a, b}, [=](Node& node) {
        auto reduce = [](Eigen::VectorXd& dst, const Eigen::VectorXd& g, bool scalar) {
            if (scalar) dst[0] += g.sum();
            else dst += g;
        };
        if (needs(node, 0)) {
            Eigen::VectorXd g = multiply ? Eigen::VectorXd(node.grad.cwiseProduct(bv)) : node.grad;
            reduce(node.inputs[0]->grad_buffer(), g, a_scalar);
        }
        if (needs(node, 1)) {
            Eigen::VectorXd g = multiply ? Eigen::VectorXd(node.grad.cwiseProduct(av)) : Eigen::VectorXd(b_sign * node.grad);
            reduce(node.inputs[1]->grad_buffer(), g, b_scalar);
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, false, 1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, false, -1.0, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, true, 1.0, "mul"); }

Tensor add_scalar(const Tensor& a, double s) {
    Eigen::VectorXd out = a.value().array() + s;
    return make_op(a.shape(), std::move(out), {a}, [](Node& n) {
        if (needs(n, 0)) n.inputs[0]->grad_buffer() += n.grad;
    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    Eigen::VectorXd out = a.value() * s;
    return make_op(a.shape(), std::move(out), {a}, [s](Node& n) {
        if (needs(n, 0)) n.inputs[0]->grad_buffer() += s * n.grad;
    });
}

Tensor sigmoid(const Tensor& x) {
    Eigen::VectorXd out = x.value().unaryExpr(&stable_sigmoid);
    return make_op(x.shape(), std::move(out), {x}, [](Node& n) {
        if (!needs(n, 0)) return;
        const auto& y = n.value.array();
        n.inputs[0]->grad_buffer().array() += n.grad.array() * y * (1.0 - y);
    });
}

Tensor tanh(const Tensor& x) {
    Eigen::VectorXd out = x.value().array().tanh();
    return make_op(x.shape(), std::move(out), {x}, [](Node& n) {
        if (!needs(n, 0)) return;
        const auto& y = n.value.array();
        n.inputs[0]->grad_buffer().array() += n.grad.array() * (1.0 - y * y);
    });
}

Tensor relu(const Tensor& x) {
    Eigen::VectorXd out = x.value().cwiseMax(0.0);
    return make_op(x.shape(), std::move(out), {x}, [](Node& n) {
        if (!needs(n, 0)) return;
        const auto& in = n.inputs[0]->value.array();
        n.inputs[0]->grad_buffer().array() += (in > 0.0).select(n.grad.array(), 0.0);
    });
}

Tensor pointwise(Pointwise fn, const Tensor& x) {
    switch (fn) {
        case Pointwise::sigmoid: return sigmoid(x);
        case Pointwise::tanh: return tanh(x);
        case Pointwise::relu: return relu(x);
    }
    throw Error("pointwise: unknown function");
}

Tensor mul_shared(const Tensor& x, const Tensor& w) {
    if (x.rank() != w.rank() + 1 || !std::equal(w.shape().begin(), w.shape().end(), x.shape().begin() + 1)) {
        throw ShapeError("mul_shared: weights " + to_string(w.shape()) + " do not match per-sample shape of " +
                         to_string(x.shape()));
    }
    const auto batch = idx(x.dim(0));
    const auto per = idx(w.size());
    Eigen::VectorXd out(x.value().size());
    for (Eigen::Index b = 0; b < batch; ++b) {
        out.segment(b * per, per) = x.value().segment(b * per, per).cwiseProduct(w.value());
    }
    return make_op(x.shape(), std::move(out), {x, w}, [batch, per](Node& n) {
        const auto& xv = n.inputs[0]->value;
        const auto& wv = n.inputs[1]->value;
        if (needs(n, 0)) {
            auto& gx = n.inputs[0]->grad_buffer();
            for (Eigen::Index b = 0; b < batch; ++b) gx.segment(b * per, per) += n.grad.segment(b * per, per).cwiseProduct(wv);
        }
        if (needs(n, 1)) {
            auto& gw = n.inputs[1]->grad_buffer();
            for (Eigen::Index b = 0; b < batch; ++b) gw += n.grad.segment(b * per, per).cwiseProduct(xv.segment(b * per, per));
        }
    });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
        throw ShapeError("add_channel_bias: bias " + to_string(bias.shape()) + " does not match channels of " +
                         to_string(x.shape()));
    }
    const auto s = split_at(x.shape(), 1);
    Eigen::VectorXd out = x.value();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.extent; ++c)
            out.segment(idx((o * s.extent + c) * s.inner), idx(s.inner)).array() += bias.value()[idx(c)];
    return make_op(x.shape(), std::move(out), {x, bias}, [s](Node& n) {
        if (needs(n, 0)) n.inputs[0]->grad_buffer() += n.grad;
        if (needs(n, 1)) {
            auto& gb = n.inputs[1]->grad_buffer();
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t c = 0; c < s.extent; ++c)
                    gb[idx(c)] += n.grad.segment(idx((o * s.extent + c) * s.inner), idx(s.inner)).sum();
        }
    });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
    Eigen::VectorXd out = Eigen::VectorXd::Constant(1, x.value().sum());
    return make_op({}, std::move(out), {x}, [](Node& n) {
        if (needs(n, 0)) n.inputs[0]->grad_buffer().array() += n.grad[0];
    });
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.size())); }

// ---- conv2d ----------------------------------------------------------------

namespace {

struct ConvGeometry {
    std::size_t N, C, H, W, F, kH, kW, Ho, Wo;
    int stride, padding;
    std::size_t rows() const { return C * kH * kW; }
    std::size_t cols() const { return Ho * Wo; }
};

void im2col(const double* x, const ConvGeometry& g, RowMatrix& cols) {
    cols.resize(idx(g.rows()), idx(g.cols()));
    const long pad = g.padding, stride = g.stride;
    for (std::size_t c = 0; c < g.C; ++c)
        for (std::size_t i = 0; i < g.kH; ++i)
            for (std::size_t j = 0; j < g.kW; ++j) {
                double* row = cols.row(idx((c * g.kH + i) * g.kW + j)).data();
                for (std::size_t oy = 0; oy < g.Ho; ++oy) {
                    const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(i);
                    for (std::size_t ox = 0; ox < g.Wo; ++ox) {
                        const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(j);
                        const bool inside = iy >= 0 && iy < static_cast<long>(g.H) && ix >= 0 && ix < static_cast<long>(g.W);
                        row[oy * g.Wo + ox] = inside ? x[(c * g.H + static_cast<std::size_t>(iy)) * g.W + static_cast<std::size_t>(ix)] : 0.0;
                    }
                }
            }
}

void col2im_add(const RowMatrix& cols, const ConvGeometry& g, double* dx) {
    const long pad = g.padding, stride = g.stride;
    for (std::size_t c = 0; c < g.C; ++c)
        for (std::size_t i = 0; i < g.kH; ++i)
            for (std::size_t j = 0; j < g.kW; ++j) {
                const double* row = cols.row(idx((c * g.kH + i) * g.kW + j)).data();
                for (std::size_t oy = 0; oy < g.Ho; ++oy) {
                    const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(i);
                    if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
                    for (std::size_t ox = 0; ox < g.Wo; ++ox) {
                        const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(j);
                        if (ix < 0 || ix >= static_cast<long>(g.W)) continue;
                        dx[(c * g.H + static_cast<std::size_t>(iy)) * g.W + static_cast<std::size_t>(ix)] += row[oy * g.Wo + ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int padding) {
    require_rank(x, 4, "conv2d input");
    require_rank(kernel, 4, "conv2d kernel");
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1, got " + std::to_string(stride));
    if (padding < 0) throw ShapeError("conv2d: padding must be >= 0, got " + std::to_string(padding));
    ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2), kernel.dim(3), 0, 0, stride, padding};
    if (kernel.dim(1) != g.C) {
        throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input " +
                         to_string(x.shape()) + " has " + std::to_string(g.C));
    }
    const std::size_t Hp = g.H + 2 * static_cast<std::size_t>(padding), Wp = g.W + 2 * static_cast<std::size_t>(padding);
    if (g.kH > Hp || g.kW > Wp) {
        throw ShapeError("conv2d: kernel " + std::to_string(g.kH) + "x" + std::to_string(g.kW) +
                         " exceeds padded input " + std::to_string(Hp) + "x" + std::to_string(Wp));
    }
    g.Ho = (Hp - g.kH) / static_cast<std::size_t>(stride) + 1;
    g.Wo = (Wp - g.kW) / static_cast<std::size_t>(stride) + 1;

    const bool record = grad_enabled() && (x.requires_grad() || kernel.requires_grad());
    auto saved = std::make_shared<std::vector<RowMatrix>>();
    if (record) saved->resize(g.N);

    const ConstRowMap K(kernel.value().data(), idx(g.F), idx(g.rows()));
    Eigen::VectorXd out(idx(g.N * g.F * g.cols()));
    RowMatrix scratch;
    for (std::size_t n = 0; n < g.N; ++n) {
        RowMatrix& cols = record ? (*saved)[n] : scratch;
        im2col(x.value().data() + n * g.C * g.H * g.W, g, cols);
        RowMap(out.data() + n * g.F * g.cols(), idx(g.F), idx(g.cols())).noalias() = K * cols;
    }
    return make_op({g.N, g.F, g.Ho, g.Wo}, std::move(out), {x, kernel}, [g, saved](Node& node) {
        const ConstRowMap Kv(node.inputs[1]->value.data(), idx(g.F), idx(g.rows()));
        RowMatrix dcols;
        for (std::size_t n = 0; n < g.N; ++n) {
            const ConstRowMap G(node.grad.data() + n * g.F * g.cols(), idx(g.F), idx(g.cols()));
            if (needs(node, 1)) {
                RowMap dK(node.inputs[1]->grad_buffer().data(), idx(g.F), idx(g.rows()));
                dK.noalias() += G * (*saved)[n].transpose();
            }
            if (needs(node, 0)) {
                dcols.noalias() = Kv.transpose() * G;
                col2im_add(dcols, g, node.inputs[0]->grad_buffer().data() + n * g.C * g.H * g.W);
            }
        }
    });
}

// ---- softmax / cross entropy -----------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
    }
    const auto s = split_at(x.shape(), axis);
    Eigen::VectorXd out(x.value().size());
    const auto& in = x.value();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, in[idx(base + k * s.inner)]);
            double z = 0.0;
            for (std::size_t k = 0; k < s.extent; ++k) {
                const double e = std::exp(in[idx(base + k * s.inner)] - mx);
                out[idx(base + k * s.inner)] = e;
                z += e;
            }
            for (std::size_t k = 0; k < s.extent; ++k) out[idx(base + k * s.inner)] /= z;
        }
    return make_op(x.shape(), std::move(out), {x}, [s](Node& n) {
        if (!needs(n, 0)) return;
        auto& gx = n.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.extent * s.inner + i;
                double dot = 0.0;
                for (std::size_t k = 0; k < s.extent; ++k) dot += n.grad[idx(base + k * s.inner)] * n.value[idx(base + k * s.inner)];
                for (std::size_t k = 0; k < s.extent; ++k) {
                    const auto j = idx(base + k * s.inner);
                    gx[j] += n.value[j] * (n.grad[j] - dot);
                }
            }
    });
}

Tensor cross_entropy(const Tensor& probs, std::span<const int> labels, std::span<const double> class_weights) {
    if (probs.rank() < 2) throw ShapeError("cross_entropy: probs need a class axis, got " + to_string(probs.shape()));
    const auto s = split_at(probs.shape(), 1);
    const std::size_t positions = s.outer * s.inner;
    if (labels.size() != positions) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(positions) +
                         " positions of " + to_string(probs.shape()));
    }
    if (!class_weights.empty() && class_weights.size() != s.extent) {
        throw ShapeError("cross_entropy: " + std::to_string(class_weights.size()) + " class weights for " +
                         std::to_string(s.extent) + " classes");
    }
    static constexpr double kFloor = 1e-300;
    std::vector<std::size_t> where(positions);
    std::vector<double> weight(positions, 1.0);
    double loss = 0.0, total_weight = 0.0;
    for (std::size_t p = 0; p < positions; ++p) {
        const int y = labels[p];
        if (y < 0 || static_cast<std::size_t>(y) >= s.extent) {
            throw DataError("cross_entropy: label " + std::to_string(y) + " out of range [0," + std::to_string(s.extent) + ")");
        }
        const std::size_t o = p / s.inner, i = p % s.inner;
        where[p] = (o * s.extent + static_cast<std::size_t>(y)) * s.inner + i;
        if (!class_weights.empty()) weight[p] = class_weights[static_cast<std::size_t>(y)];
        loss -= weight[p] * std::log(std::max(probs.value()[idx(where[p])], kFloor));
        total_weight += weight[p];
    }
    if (!(total_weight > 0.0)) throw DataError("cross_entropy: total label weight is zero");
    Eigen::VectorXd out = Eigen::VectorXd::Constant(1, loss / total_weight);
    return make_op({}, std::move(out), {probs},
                   [where = std::move(where), weight = std::move(weight), total_weight](Node& n) {
                       if (!needs(n, 0)) return;
                       auto& gp = n.inputs[0]->grad_buffer();
                       const auto& pv = n.inputs[0]->value;
                       for (std::size_t p = 0; p < where.size(); ++p) {
                           const auto j = idx(where[p]);
                           gp[j] -= n.grad[0] * weight[p] / (std::max(pv[j], kFloor) * total_weight);
                       }
                   });
}

// ---- pooling / dense / dropout ---------------------------------------------

Tensor global_avg_pool(const Tensor& x) {
    require_rank(x, 4, "global_avg_pool");
    const std::size_t N = x.dim(0), C = x.dim(1), area = x.dim(2) * x.dim(3);
    Eigen::VectorXd out(idx(N * C));
    for (std::size_t k = 0; k < N * C; ++k) out[idx(k)] = x.value().segment(idx(k * area), idx(area)).mean();
    return make_op({N, C}, std::move(out), {x}, [N, C, area](Node& n) {
        if (!needs(n, 0)) return;
        auto& gx = n.inputs[0]->grad_buffer();
        for (std::size_t k = 0; k < N * C; ++k) gx.segment(idx(k * area), idx(area)).array() += n.grad[idx(k)] / static_cast<double>(area);
    });
}

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank(x, 2, "dense input");
    require_rank(weight, 2, "dense weight");
    require_rank(bias, 1, "dense bias");
    const std::size_t N = x.dim(0), D = x.dim(1), K = weight.dim(1);
    if (weight.dim(0) != D || bias.dim(0) != K) {
        throw ShapeError("dense: input " + to_string(x.shape()) + ", weight " + to_string(weight.shape()) + ", bias " +
                         to_string(bias.shape()) + " do not chain");
    }
    Eigen::VectorXd out(idx(N * K));
    RowMap Y(out.data(), idx(N), idx(K));
    const ConstRowMap X(x.value().data(), idx(N), idx(D));
    const ConstRowMap Wm(weight.value().data(), idx(D), idx(K));
    Y.noalias() = X * Wm;
    Y.rowwise() += bias.value().transpose();
    return make_op({N, K}, std::move(out), {x, weight, bias}, [N, D, K](Node& n) {
        const ConstRowMap G(n.grad.data(), idx(N), idx(K));
        if (needs(n, 0)) {
            RowMap(n.inputs[0]->grad_buffer().data(), idx(N), idx(D)).noalias() +=
                G * ConstRowMap(n.inputs[1]->value.data(), idx(D), idx(K)).transpose();
        }
        if (needs(n, 1)) {
            RowMap(n.inputs[1]->grad_buffer().data(), idx(D), idx(K)).noalias() +=
                ConstRowMap(n.inputs[0]->value.data(), idx(N), idx(D)).transpose() * G;
        }
        if (needs(n, 2)) n.inputs[2]->grad_buffer() += G.colwise().sum().transpose();
    });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;
    const double scale = 1.0 / (1.0 - rate);
    Eigen::VectorXd mask(x.value().size());
    for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : scale;
    Eigen::VectorXd out = x.value().cwiseProduct(mask);
    return make_op(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& n) {
        if (needs(n, 0)) n.inputs[0]->grad_buffer() += n.grad.cwiseProduct(mask);
    });
}

Tensor max_pool2d(const Tensor& x, int window) {
    require_rank(x, 4, "max_pool2d");
    if (window < 1) throw ShapeError("max_pool2d: window must be >= 1");
    const auto k = static_cast<std::size_t>(window);
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % k != 0 || W % k != 0) {
        throw ShapeError("max_pool2d: spatial extents " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by window " + std::to_string(k));
    }
    const std::size_t Ho = H / k, Wo = W / k;
    Eigen::VectorXd out(idx(N * C * Ho * Wo));
    std::vector<std::size_t> arg(N * C * Ho * Wo);
    const auto& in = x.value();
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                std::size_t best = nc * H * W + oy * k * W + ox * k;
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const std::size_t j = nc * H * W + (oy * k + dy) * W + ox * k + dx;
                        if (in[idx(j)] > in[idx(best)]) best = j;
                    }
                const std::size_t o = (nc * Ho + oy) * Wo + ox;
                out[idx(o)] = in[idx(best)];
                arg[o] = best;
            }
    return make_op({N, C, Ho, Wo}, std::move(out), {x}, [arg = std::move(arg)](Node& n) {
        if (!needs(n, 0)) return;
        auto& gx = n.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < arg.size(); ++o) gx[idx(arg[o])] += n.grad[idx(o)];
    });
}

Tensor nearest_upsample2d(const Tensor& x, int factor) {
    require_rank(x, 4, "nearest_upsample2d");
    if (factor < 1) throw ShapeError("nearest_upsample2d: factor must be >= 1");
    const auto f = static_cast<std::size_t>(factor);
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), Ho = H * f, Wo = W * f;
    Eigen::VectorXd out(idx(N * C * Ho * Wo));
    const auto& in = x.value();
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox)
                out[idx((nc * Ho + oy) * Wo + ox)] = in[idx(nc * H * W + (oy / f) * W + ox / f)];
    return make_op({N, C, Ho, Wo}, std::move(out), {x}, [N, C, H, W, f](Node& n) {
        if (!needs(n, 0)) return;
        auto& gx = n.inputs[0]->grad_buffer();
        const std::size_t Ho = H * f, Wo = W * f;
        for (std::size_t nc = 0; nc < N * C; ++nc)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox)
                    gx[idx(nc * H * W + (oy / f) * W + ox / f)] += n.grad[idx((nc * Ho + oy) * Wo + ox)];
    });
}

// ---- concat / slice --------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + to_string(ref));
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
        if (!ok) throw ShapeError("concat: " + to_string(s) + " incompatible with " + to_string(ref) + " along axis " + std::to_string(axis));
        out_shape[axis] += s[axis];
    }
    const auto s = split_at(out_shape, axis);
    std::vector<std::size_t> extents, offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        extents.push_back(p.dim(axis));
        offsets.push_back(offset);
        offset += p.dim(axis);
    }
    Eigen::VectorXd out(idx(numel(out_shape)));
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const std::size_t block = extents[k] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o)
            out.segment(idx(o * s.extent * s.inner + offsets[k] * s.inner), idx(block)) =
                parts[k].value().segment(idx(o * block), idx(block));
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return make_op(out_shape, std::move(out), std::move(inputs), [s, extents, offsets](Node& n) {
        for (std::size_t k = 0; k < extents.size(); ++k) {
            if (!needs(n, k)) continue;
            auto& g = n.inputs[k]->grad_buffer();
            const std::size_t block = extents[k] * s.inner;
            for (std::size_t o = 0; o < s.outer; ++o)
                g.segment(idx(o * block), idx(block)) += n.grad.segment(idx(o * s.extent * s.inner + offsets[k] * s.inner), idx(block));
        }
    });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    if (axis >= x.rank()) throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
    if (length == 0 || start + length > x.dim(axis)) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") outside axis " + std::to_string(axis) + " of " + to_string(x.shape()));
    }
    const auto s = split_at(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    const std::size_t block = length * s.inner;
    Eigen::VectorXd out(idx(s.outer * block));
    for (std::size_t o = 0; o < s.outer; ++o)
        out.segment(idx(o * block), idx(block)) = x.value().segment(idx((o * s.extent + start) * s.inner), idx(block));
    return make_op(out_shape, std::move(out), {x}, [s, start, block](Node& n) {
        if (!needs(n, 0)) return;
        auto& g = n.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o)
            g.segment(idx((o * s.extent + start) * s.inner), idx(block)) += n.grad.segment(idx(o * block), idx(block));
    });
}

}  // namespace cilia::ad
