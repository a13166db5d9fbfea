#pragma once

// Central finite-difference oracle for the autodiff engine. Only the
// forward values of the ops are used here, never their backward rules.

#include <functional>
#include <vector>

#include "cilia/tensor.hpp"

namespace cilia::testing {

using ad::Tensor;
using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Norm-wise relative error ‖a−n‖ / (‖a‖+‖n‖); falls back to the absolute
/// error when both gradients vanish.
inline double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
    const double diff = (analytic - numeric).norm();
    const double scale = analytic.norm() + numeric.norm();
    return scale < 1e-12 ? diff : diff / scale;
}

inline Eigen::VectorXd numeric_gradient(const LossFn& f, std::vector<Tensor>& inputs, std::size_t which, double h) {
    ad::NoGradGuard guard;
    auto& values = inputs[which].mutable_value();
    Eigen::VectorXd g(values.size());
    for (Eigen::Index j = 0; j < values.size(); ++j) {
        const double saved = values[j];
        values[j] = saved + h;
        const double up = f(inputs).item();
        values[j] = saved - h;
        const double down = f(inputs).item();
        values[j] = saved;
        g[j] = (up - down) / (2.0 * h);
    }
    return g;
}

/// Largest relative error over all inputs between backward() and central
/// differences with step h.
inline double gradcheck(const LossFn& f, std::vector<Tensor> inputs, double h = 1e-5) {
    for (auto& t : inputs) t.zero_grad();
    ad::backward(f(inputs));
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad()) continue;
        const Eigen::VectorXd analytic = inputs[i].grad();
        const Eigen::VectorXd numeric = numeric_gradient(f, inputs, i, h);
        worst = std::max(worst, relative_error(analytic, numeric));
    }
    return worst;
}

/// Random projection turning any output into a scalar with non-uniform
/// upstream gradients.
inline Tensor project(const Tensor& out, std::uint64_t seed) {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    return ad::sum(ad::mul(out, Tensor::uniform(out.shape(), 1.0, rng)));
}

}  // namespace cilia::testing
