#pragma once

// Central finite-difference gradient check. Independent of the backward
// rules: it only evaluates the forward pass at perturbed parameter values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "stgl/nn/tensor.hpp"

namespace stgl::test {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;          // "<param>[index]" of the worst component
    std::size_t checked = 0;
    std::size_t kink_skipped = 0;
    std::size_t total = 0;

    bool passed(double tol) const { return checked > 0 && max_rel_error <= tol; }
};

// Components whose perturbation flips any recorded non-differentiable branch
// (ReLU sign, |x| sign, max-pool winner, hinge activity) are resampled away.
// Errors are relative to max(|analytic|, |numeric|, floor), where
// floor = max(abs_floor, rel_floor * largest analytic component). A nonzero
// rel_floor stops near-zero components of a large gradient from reporting the
// O(step^2) truncation term as a huge relative error.
//
// `numeric_fn`, when given, is differenced instead of `loss_fn`. Backward
// passes that are not gradients of their forward value (gradient reversal)
// are checked against the objective they actually descend.
inline GradCheckResult grad_check(const std::vector<std::pair<std::string, nn::Tensor>>& params,
                                  const std::function<nn::Tensor()>& loss_fn, double step = 1e-3,
                                  double abs_floor = 1e-8, double rel_floor = 0.0,
                                  std::function<nn::Tensor()> numeric_fn = {}) {
    if (!numeric_fn) numeric_fn = loss_fn;
    for (auto [name, p] : params) p.zero_grad();
    loss_fn().backward();
    std::uint64_t base_sig = 0;
    {
        nn::NoGradGuard guard;
        nn::kink::begin();
        numeric_fn();
        base_sig = nn::kink::end();
    }

    GradCheckResult res;
    double grad_max = 0.0;
    for (const auto& [name, p] : params)
        for (double g : p.grad()) grad_max = std::max(grad_max, std::fabs(g));
    const double floor = std::max(abs_floor, rel_floor * grad_max);
    auto eval = [&](std::uint64_t& sig) {
        nn::NoGradGuard guard;
        nn::kink::begin();
        const double v = numeric_fn().item();
        sig = nn::kink::end();
        return v;
    };
    for (auto [name, p] : params) {
        const std::vector<double> analytic(p.grad().begin(), p.grad().end());
        auto vals = p.mutable_values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            ++res.total;
            const double orig = vals[i];
            std::uint64_t sp = 0, sm = 0;
            vals[i] = orig + step;
            const double fp = eval(sp);
            vals[i] = orig - step;
            const double fm = eval(sm);
            vals[i] = orig;
            if (sp != base_sig || sm != base_sig) {
                ++res.kink_skipped;
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            const double err = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), floor});
            ++res.checked;
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                            " numeric=" + std::to_string(numeric);
            }
        }
    }
    return res;
}

} // namespace stgl::test
