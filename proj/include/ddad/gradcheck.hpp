#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ddad/rng.hpp"
#include "ddad/tensor.hpp"

namespace ddad {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coordinates_checked = 0;
    bool passed = true;
};

struct GradCheckOptions {
    double step = 1e-5;
    double tol = 1e-6;
    // Per-input cap on checked coordinates; 0 checks every coordinate.
    // When capped, coordinates are drawn with `sample_seed`.
    std::size_t max_coordinates = 0;
    std::uint64_t sample_seed = 0;
};

/// Compares backward() against central differences (f(x+h) - f(x-h)) / 2h.
///
/// `f` must rebuild its graph from the current values of `inputs` on every
/// call and return a single-element tensor. The error measure is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, std::span<Tensor<T>> inputs,
                           const GradCheckOptions& options = {}) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    const Tensor<T> loss = f();
    loss.backward();

    std::vector<std::vector<T>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs) {
        if (in.has_grad()) {
            analytic.emplace_back(in.grad().begin(), in.grad().end());
        } else {
            analytic.emplace_back(in.numel(), T(0));
        }
    }

    GradCheckReport report;
    Rng rng(options.sample_seed);
    NoGradGuard no_grad;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto values = inputs[t].mutable_data();
        std::vector<std::size_t> coords(values.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (options.max_coordinates != 0 && coords.size() > options.max_coordinates) {
            rng.shuffle(std::span<std::size_t>(coords));
            coords.resize(options.max_coordinates);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t i : coords) {
            const T original = values[i];
            values[i] = original + static_cast<T>(options.step);
            const double plus = static_cast<double>(f().item());
            values[i] = original - static_cast<T>(options.step);
            const double minus = static_cast<double>(f().item());
            values[i] = original;

            const double numeric = (plus - minus) / (2.0 * options.step);
            const double exact = static_cast<double>(analytic[t][i]);
            const double denom = std::max({1.0, std::abs(exact), std::abs(numeric)});
            double rel = std::abs(exact - numeric) / denom;
            if (std::isnan(rel)) rel = INFINITY;
            ++report.coordinates_checked;
            if (report.coordinates_checked == 1 || rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_input = t;
                report.worst_index = i;
                report.worst_analytic = exact;
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= options.tol;
    return report;
}

template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x,
                           const GradCheckOptions& options = {}) {
    std::vector<Tensor<T>> inputs{x};
    return grad_check<T>([&] { return f(x); }, std::span<Tensor<T>>(inputs), options);
}

} // namespace ddad
