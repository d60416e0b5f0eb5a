#pragma once

// Shared fixtures for the test suites: the Ornstein-Uhlenbeck problem with a
// quadratic terminal cost (closed-form free energy) and small statistics
// helpers.

#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "fbsde/model.hpp"

namespace testsupport {

// dX = -X dt + dB on the whole line (no stopping), g(x) = x^2.
inline fbsde::ProblemSpec ou_quadratic(double horizon) {
    fbsde::ProblemSpec s;
    s.dim = 1;
    s.noise_dim = 1;
    s.drift = [](std::span<const double> x, double, std::span<double> o) { o[0] = -x[0]; };
    s.diffusion = [](std::span<const double>, std::span<double> o) { o[0] = 1.0; };
    s.running_cost = [](std::span<const double>, double) { return 0.0; };
    s.terminal_cost = [](std::span<const double> x) { return x[0] * x[0]; };
    s.terminal_cost_grad = [](std::span<const double> x, std::span<double> o) {
        o[0] = 2.0 * x[0];
    };
    s.domain_indicator = [](std::span<const double>) { return true; };
    s.horizon = horizon;
    return s;
}

// gamma = -log E[exp(-X_T^2)] for X_T ~ N(x0 e^{-T}, (1 - e^{-2T})/2):
// 0.5 log(1 + 2v) + m^2 / (1 + 2v).
inline double ou_quadratic_free_energy(double x0, double horizon) {
    const double m = x0 * std::exp(-horizon);
    const double v = (1.0 - std::exp(-2.0 * horizon)) / 2.0;
    return 0.5 * std::log(1.0 + 2.0 * v) + m * m / (1.0 + 2.0 * v);
}

inline double mean(std::span<const double> xs) {
    return std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
}

inline double sample_variance(std::span<const double> xs) {
    const double m = mean(xs);
    double ss = 0.0;
    for (double v : xs) ss += (v - m) * (v - m);
    return xs.size() > 1 ? ss / (xs.size() - 1) : 0.0;
}

inline double standard_error(std::span<const double> xs) {
    return std::sqrt(sample_variance(xs) / xs.size());
}

}  // namespace testsupport
