#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "protodensity/tensor.hpp"

namespace protodensity {

using ScalarFn = std::function<double(const Tensor&)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.
/// Throws NumericError if f is non-finite at any probe point.
Tensor finite_diff_grad(const ScalarFn& fn, const Tensor& at, double h = 1e-6);

/// max|a - b| / max(max|a|, max|b|, floor). Zero when both are zero.
double relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-10);

struct GradcheckOptions {
    std::size_t instances = 20;
    std::uint64_t seed = 0;
    double h = 1e-6;
};

struct GradcheckResult {
    std::string component;
    std::size_t instances = 0;
    double max_relative_error = 0.0;
};

/// Names accepted by run_gradcheck_suite, ops first, then losses and the
/// end-to-end count.
std::vector<std::string> gradcheck_components();

/// Analytic tape gradients against finite_diff_grad on random instances
/// (B = 2, K = 4, d = 8, 6x6 maps for the losses and the model). An empty
/// selection runs every component.
std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& options = {},
                                                 std::span<const std::string> components = {});

} // namespace protodensity
