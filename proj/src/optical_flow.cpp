#include "cilia/optical_flow.hpp"

#include "cilia/parallel.hpp"

namespace cilia::flow {

FlowEstimator horn_schunck_estimator(FlowParams params) {
    return [params](const ImageD& a, const ImageD& b) { return horn_schunck<double>(a, b, params.alpha, params.iters); };
}

InvariantField compute_invariants(const FrameStack& frames, const FlowEstimator& estimator, int threads) {
    if (frames.frames() < 2) throw DataError("optical flow needs at least 2 frames, got " + std::to_string(frames.frames()));
    const std::size_t pairs = frames.frames() - 1, rows = frames.rows(), cols = frames.cols();
    InvariantField out{FrameStack(pairs, rows, cols), FrameStack(pairs, rows, cols), FrameStack(pairs, rows, cols)};
    parallel_for(pairs, threads, [&](std::size_t t) {
        const ImageD a = frames.frame(t);
        const ImageD b = frames.frame(t + 1);
        const auto inv = invariants(estimator(a, b));
        out.rotation.frame(t) = inv.rotation;
        out.divergence.frame(t) = inv.divergence;
        out.deformation.frame(t) = inv.deformation;
    });
    return out;
}

InvariantField compute_invariants(const FrameStack& frames, FlowParams params, int threads) {
    return compute_invariants(frames, horn_schunck_estimator(params), threads);
}

FrameStack rotation_sequence(const FrameStack& frames, FlowParams params, int threads) {
    return compute_invariants(frames, params, threads).rotation;
}

}  // namespace cilia::flow
