#pragma once

#include <functional>

#include "vd/tensor.hpp"

namespace vd {

// Central-difference gradient verification. float64 only; float32 FD is too
// noisy to be a trustworthy oracle.
//
// `loss` evaluates the objective from the current values of `params` and,
// when `with_grad` is true, must also leave analytic gradients in each
// parameter's grad buffer (typically by recording a graph and calling
// backward). Returns the max relative error across all coordinates, with an
// absolute floor in the denominator so near-zero gradients do not blow up
// the ratio.
inline double finite_diff_check(const std::function<double(bool with_grad)>& loss,
                                std::vector<Tensor<double>*> params,
                                double eps = 1e-5,
                                double floor = 1e-3) {
    if (params.empty()) return 0.0;  // zero-parameter function: exact by convention
    for (auto* p : params) p->zero_grad();
    const double base = loss(true);
    if (!std::isfinite(base)) throw NumericError("finite_diff_check: loss is not finite");
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto* p : params) analytic.push_back(p->grad);

    double max_rel = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<double>& p = *params[pi];
        for (size_t i = 0; i < p.data.size(); ++i) {
            const double keep = p.data[i];
            p.data[i] = keep + eps;
            const double up = loss(false);
            p.data[i] = keep - eps;
            const double down = loss(false);
            p.data[i] = keep;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericError("finite_diff_check: perturbed loss is not finite");
            const double numeric = (up - down) / (2.0 * eps);
            const double ana = analytic[pi][i];
            const double denom = std::max({std::abs(numeric), std::abs(ana), floor});
            max_rel = std::max(max_rel, std::abs(numeric - ana) / denom);
        }
    }
    return max_rel;
}

}  // namespace vd
