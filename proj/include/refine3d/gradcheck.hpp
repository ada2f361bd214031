#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "refine3d/rng.hpp"
#include "refine3d/tensor.hpp"

namespace refine3d {

// Central-difference verification of reverse-mode gradients, 64-bit only.
// f must be re-runnable: each call performs a fresh forward pass over the
// given inputs and returns a scalar. Relative error is
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

struct GradCoord {
    size_t input_index;
    int64_t flat_index;
};

inline std::vector<GradCoord> sample_grad_coords(const std::vector<Tensor64*>& inputs,
                                                 int64_t max_coords, Rng& rng) {
    int64_t total = 0;
    for (Tensor64* t : inputs) total += t->numel();
    std::vector<GradCoord> coords;
    if (max_coords >= total) {
        for (size_t ti = 0; ti < inputs.size(); ++ti)
            for (int64_t i = 0; i < inputs[ti]->numel(); ++i) coords.push_back({ti, i});
        return coords;
    }
    for (int64_t c = 0; c < max_coords; ++c) {
        int64_t flat = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(total)));
        for (size_t ti = 0; ti < inputs.size(); ++ti) {
            if (flat < inputs[ti]->numel()) {
                coords.push_back({ti, flat});
                break;
            }
            flat -= inputs[ti]->numel();
        }
    }
    return coords;
}

// Per-coordinate relative errors at one finite-difference step size.
template <typename F>
std::vector<double> grad_check_errors(F&& f, const std::vector<Tensor64*>& inputs,
                                      const std::vector<GradCoord>& coords, double eps = 1e-4) {
    for (Tensor64* t : inputs) {
        if (!t->requires_grad()) throw StateError("grad_check input must track gradients");
        t->zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Graph64 graph;
        Tensor64 y = f();
        if (y.numel() != 1) throw DimensionError("grad_check: f must return a scalar");
        graph.backward(y);
    }
    for (Tensor64* t : inputs) analytic.push_back(t->grad());

    std::vector<double> errors;
    errors.reserve(coords.size());
    for (const GradCoord& c : coords) {
        double& slot = inputs[c.input_index]->data()[static_cast<size_t>(c.flat_index)];
        const double saved = slot;
        slot = saved + eps;
        const double y_plus = f().item();
        slot = saved - eps;
        const double y_minus = f().item();
        slot = saved;
        const double numeric = (y_plus - y_minus) / (2.0 * eps);
        const double a = analytic[c.input_index][static_cast<size_t>(c.flat_index)];
        errors.push_back(std::abs(a - numeric) /
                         std::max(1e-8, std::abs(a) + std::abs(numeric)));
    }
    return errors;
}

template <typename F>
double grad_check_sampled(F&& f, const std::vector<Tensor64*>& inputs, int64_t max_coords,
                          Rng& rng, double eps = 1e-4) {
    auto coords = sample_grad_coords(inputs, max_coords, rng);
    auto errors = grad_check_errors(std::forward<F>(f), inputs, coords, eps);
    double m = 0.0;
    for (double e : errors) m = std::max(m, e);
    return m;
}

template <typename F>
double grad_check(F&& f, const std::vector<Tensor64*>& inputs, double eps = 1e-4) {
    Rng unused(0);
    int64_t total = 0;
    for (Tensor64* t : inputs) total += t->numel();
    return grad_check_sampled(std::forward<F>(f), inputs, total, unused, eps);
}

// Central differences sit on the wrong side of a kink (max-pool argmax flip,
// piecewise activation) for some step sizes; a coordinate is accepted if any
// step size agrees. A genuinely wrong gradient disagrees at every step size.
template <typename F>
double grad_check_multi_eps(F&& f, const std::vector<Tensor64*>& inputs,
                            const std::vector<GradCoord>& coords,
                            const std::vector<double>& step_sizes) {
    std::vector<double> best(coords.size(), std::numeric_limits<double>::infinity());
    for (double eps : step_sizes) {
        auto errors = grad_check_errors(f, inputs, coords, eps);
        for (size_t i = 0; i < errors.size(); ++i) best[i] = std::min(best[i], errors[i]);
    }
    double m = 0.0;
    for (double e : best) m = std::max(m, e);
    return m;
}

}  // namespace refine3d
