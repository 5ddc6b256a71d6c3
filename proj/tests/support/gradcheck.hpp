#pragma once

// Central-difference gradient checking used across the unit and acceptance
// suites. Compares the analytic reverse-mode gradient of a scalar-valued
// function against (f(x+h) - f(x-h)) / 2h, element by element.

#include <cmath>
#include <functional>
#include <string>

#include "alden/autodiff.hpp"
#include "alden/tensor.hpp"

namespace gradcheck {

struct Result {
    double max_rel_err = 0.0;
    std::int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// fn must rebuild the graph from the leaf each call and return a scalar Var.
inline Result check(const std::function<alden::nn::Var(const alden::nn::Var&)>& fn,
                    alden::Tensor x0, double h = 1e-6, double floor_denom = 1e-8) {
    using alden::nn::Var;
    Var leaf(x0, true);
    Var loss = fn(leaf);
    loss.backward();
    alden::Tensor analytic = leaf.grad();

    Result res;
    for (std::int64_t i = 0; i < x0.numel(); ++i) {
        const double orig = x0[i];
        const double step = h * std::max(1.0, std::fabs(orig));
        alden::Tensor xp = x0;
        xp[i] = orig + step;
        alden::Tensor xm = x0;
        xm[i] = orig - step;
        const double fp = fn(Var(std::move(xp), false)).scalar();
        const double fm = fn(Var(std::move(xm), false)).scalar();
        const double numeric = (fp - fm) / (2.0 * step);
        const double denom = std::max({std::fabs(numeric), std::fabs(analytic[i]), floor_denom});
        const double rel = std::fabs(numeric - analytic[i]) / denom;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_index = i;
            res.analytic = analytic[i];
            res.numeric = numeric;
        }
    }
    return res;
}

} // namespace gradcheck
