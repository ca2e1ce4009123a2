#pragma once

// Central finite-difference oracle for gradient checks. Lives in test code
// only: it re-runs the forward closure with perturbed leaf data and never
// touches tape internals.

#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "cmt/tensor.hpp"

namespace cmt::test {

inline double rel_err(double a, double b, double denom_floor = 1e-8) {
    double denom = std::max({std::fabs(a), std::fabs(b), denom_floor});
    return std::fabs(a - b) / denom;
}

/// `loss` must rebuild the graph from the leaves' current data and return a
/// scalar tensor. Returns the worst relative error between the analytic
/// gradient and central differences over all leaf coordinates (or the index
/// subset per leaf in `sample`, when given). `denom_floor` sets the absolute
/// scale below which both gradients count as zero; raise it for losses with
/// exactly-degenerate directions (e.g. attention key biases) where both
/// sides are pure cancellation noise.
inline double max_grad_error(const std::function<cmt::Tensor<double>()>& loss,
                             std::vector<cmt::Tensor<double>> leaves,
                             std::vector<double> hs = {1e-5},
                             const std::vector<std::vector<int>>* sample = nullptr,
                             double denom_floor = 1e-8) {
    for (auto& l : leaves) l.zero_grad();
    cmt::Tensor<double> out = loss();
    out.backward();
    std::vector<std::vector<double>> analytic;
    for (auto& l : leaves) analytic.push_back(l.grad());

    double worst = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        std::vector<int> coords;
        if (sample) {
            coords = (*sample)[li];
        } else {
            coords.resize(static_cast<size_t>(leaf.size()));
            for (size_t i = 0; i < coords.size(); ++i) coords[i] = static_cast<int>(i);
        }
        for (int i : coords) {
            // a coordinate passes if it agrees at any of the step sizes:
            // kinks need a small h, roundoff-limited tiny gradients a larger
            // one; no single h serves both
            double best = std::numeric_limits<double>::infinity();
            for (double h : hs) {
                double orig = leaf.data()[i];
                leaf.data()[i] = orig + h;
                double fp = loss().item();
                leaf.data()[i] = orig - h;
                double fm = loss().item();
                leaf.data()[i] = orig;
                double numeric = (fp - fm) / (2 * h);
                best = std::min(best, rel_err(analytic[li][i], numeric, denom_floor));
            }
            worst = std::max(worst, best);
        }
    }
    return worst;
}

inline double max_grad_error(const std::function<cmt::Tensor<double>()>& loss,
                             std::vector<cmt::Tensor<double>> leaves, double h,
                             const std::vector<std::vector<int>>* sample = nullptr,
                             double denom_floor = 1e-8) {
    return max_grad_error(loss, std::move(leaves), std::vector<double>{h}, sample, denom_floor);
}

}  // namespace cmt::test
