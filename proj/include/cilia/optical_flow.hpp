#pragma once

#include <functional>

#include "cilia/types.hpp"

namespace cilia::flow {

/// Per-pixel displacement between two frames: u along x (columns), v along
/// y (rows), in pixels per frame.
template <typename Scalar>
struct FlowField {
    Image<Scalar> u;
    Image<Scalar> v;
};

template <typename Scalar>
struct Invariants {
    Image<Scalar> rotation;
    Image<Scalar> divergence;
    Image<Scalar> deformation;
};

/// ∂f/∂x by central differences, one-sided in the first and last column.
template <typename Scalar>
Image<Scalar> diff_x(const Image<Scalar>& f) {
    const Eigen::Index rows = f.rows(), cols = f.cols();
    Image<Scalar> d = Image<Scalar>::Zero(rows, cols);
    if (cols < 2) return d;
    if (cols > 2) d.middleCols(1, cols - 2) = (f.rightCols(cols - 2) - f.leftCols(cols - 2)) / Scalar(2);
    d.col(0) = f.col(1) - f.col(0);
    d.col(cols - 1) = f.col(cols - 1) - f.col(cols - 2);
    return d;
}

/// ∂f/∂y by central differences, one-sided in the first and last row.
template <typename Scalar>
Image<Scalar> diff_y(const Image<Scalar>& f) {
    const Eigen::Index rows = f.rows(), cols = f.cols();
    Image<Scalar> d = Image<Scalar>::Zero(rows, cols);
    if (rows < 2) return d;
    if (rows > 2) d.middleRows(1, rows - 2) = (f.bottomRows(rows - 2) - f.topRows(rows - 2)) / Scalar(2);
    d.row(0) = f.row(1) - f.row(0);
    d.row(rows - 1) = f.row(rows - 1) - f.row(rows - 2);
    return d;
}

/// Horn–Schunck neighbourhood mean: 1/6 on edge neighbours, 1/12 on
/// diagonals, replicated borders.
template <typename Scalar>
Image<Scalar> neighbourhood_mean(const Image<Scalar>& f) {
    const Eigen::Index rows = f.rows(), cols = f.cols();
    Image<Scalar> p(rows + 2, cols + 2);
    p.block(1, 1, rows, cols) = f;
    p.block(0, 1, 1, cols) = f.row(0);
    p.block(rows + 1, 1, 1, cols) = f.row(rows - 1);
    p.col(0) = p.col(1);
    p.col(cols + 1) = p.col(cols);
    const Scalar edge = Scalar(1) / Scalar(6), diag = Scalar(1) / Scalar(12);
    return edge * (p.block(0, 1, rows, cols) + p.block(2, 1, rows, cols) + p.block(1, 0, rows, cols) +
                   p.block(1, 2, rows, cols)) +
           diag * (p.block(0, 0, rows, cols) + p.block(0, 2, rows, cols) + p.block(2, 0, rows, cols) +
                   p.block(2, 2, rows, cols));
}

/// Classical Horn–Schunck. Spatial gradients are taken from the mean of the
/// two frames and the temporal derivative is b − a, so swapping the frames
/// negates the flow exactly.
template <typename Scalar>
FlowField<Scalar> horn_schunck(const Image<Scalar>& a, const Image<Scalar>& b, Scalar alpha, int iters) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("horn_schunck: frame shapes differ (" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
    }
    if (iters < 1) throw ConfigError("horn_schunck: iters must be >= 1");
    if (!(alpha > Scalar(0))) throw ConfigError("horn_schunck: alpha must be > 0");

    const Image<Scalar> mid = (a + b) / Scalar(2);
    const Image<Scalar> ix = diff_x(mid);
    const Image<Scalar> iy = diff_y(mid);
    const Image<Scalar> it = b - a;
    const Image<Scalar> denom = alpha * alpha + ix.square() + iy.square();

    FlowField<Scalar> flow{Image<Scalar>::Zero(a.rows(), a.cols()), Image<Scalar>::Zero(a.rows(), a.cols())};
    for (int k = 0; k < iters; ++k) {
        const Image<Scalar> ubar = neighbourhood_mean(flow.u);
        const Image<Scalar> vbar = neighbourhood_mean(flow.v);
        const Image<Scalar> t = (ix * ubar + iy * vbar + it) / denom;
        flow.u = ubar - ix * t;
        flow.v = vbar - iy * t;
    }
    return flow;
}

/// Differential invariants of a flow field:
///   rotation    = ½(∂v/∂x − ∂u/∂y)
///   divergence  = ∂u/∂x + ∂v/∂y
///   deformation = √((∂u/∂x − ∂v/∂y)² + (∂u/∂y + ∂v/∂x)²)
template <typename Scalar>
Invariants<Scalar> invariants(const FlowField<Scalar>& flow) {
    const Image<Scalar> ux = diff_x(flow.u), uy = diff_y(flow.u);
    const Image<Scalar> vx = diff_x(flow.v), vy = diff_y(flow.v);
    return {Scalar(0.5) * (vx - uy), ux + vy, ((ux - vy).square() + (uy + vx).square()).sqrt()};
}

struct FlowParams {
    double alpha = 0.1;
    int iters = 500;
};

/// Any dense two-frame flow estimator.
using FlowEstimator = std::function<FlowField<double>(const ImageD&, const ImageD&)>;

FlowEstimator horn_schunck_estimator(FlowParams params);

/// Invariant stacks over the T−1 consecutive frame pairs.
struct InvariantField {
    FrameStack rotation;
    FrameStack divergence;
    FrameStack deformation;
};

/// Frame pairs are processed on up to `threads` workers; each pair's result
/// lands in its own slot, so output does not depend on scheduling.
InvariantField compute_invariants(const FrameStack& frames, const FlowEstimator& estimator, int threads = 1);
InvariantField compute_invariants(const FrameStack& frames, FlowParams params, int threads = 1);

/// Rotation channel only: (T−1)×H×W, the classifier's input signal.
FrameStack rotation_sequence(const FrameStack& frames, FlowParams params, int threads = 1);

}  // namespace cilia::flow
