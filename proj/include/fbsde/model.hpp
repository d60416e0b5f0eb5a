#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>

namespace fbsde {

using DriftFn = std::function<void(std::span<const double> x, double t, std::span<double> out)>;
using DiffusionFn = std::function<void(std::span<const double> x, std::span<double> out)>;
using ScalarFieldFn = std::function<double(std::span<const double> x, double t)>;
using TerminalCostFn = std::function<double(std::span<const double> x)>;
using GradientFn = std::function<void(std::span<const double> x, std::span<double> out)>;
using IndicatorFn = std::function<bool(std::span<const double> x)>;

/// Full definition of a stopped-diffusion control problem: coefficients,
/// path costs, the open set whose first exit stops the clock, and the
/// horizon. Immutable once built; all evaluation functions must be pure so
/// instances can be shared across trajectory workers.
struct ProblemSpec {
    int dim = 0;        // state dimension d
    int noise_dim = 0;  // Brownian dimension m <= d

    DriftFn drift;                    // b(x, t), d components
    DiffusionFn diffusion;            // sigma(x), d x m row-major
    ScalarFieldFn running_cost;       // f(x, t)
    TerminalCostFn terminal_cost;     // g(x)
    GradientFn terminal_cost_grad;    // analytic grad g, optional (may be null)
    IndicatorFn domain_indicator;     // membership in the open set O

    double horizon = 0.0;  // T

    void validate() const {
        if (dim < 1) throw std::invalid_argument("ProblemSpec: dim must be >= 1");
        if (noise_dim < 1 || noise_dim > dim)
            throw std::invalid_argument("ProblemSpec: noise_dim must be in [1, dim]");
        if (!(horizon > 0.0)) throw std::invalid_argument("ProblemSpec: horizon must be positive");
        if (!drift || !diffusion || !running_cost || !terminal_cost || !domain_indicator)
            throw std::invalid_argument("ProblemSpec: drift/diffusion/costs/domain must all be set");
    }

    bool in_domain(std::span<const double> x) const { return domain_indicator(x); }
};

/// 1D diffusion in U(x) = (x^2 - 1)^2 with the left well O = {x < 0} and the
/// regularised exit cost g_eps(x) = -log(1_{x on or past the boundary} + eps).
struct DoubleWell {
    double sigma;
    double epsilon;

    static double potential(double x) {
        const double w = x * x - 1.0;
        return w * w;
    }
    static double drift(double x) { return -4.0 * x * (x * x - 1.0); }

    // The discretised process overshoots the boundary, so "on the boundary"
    // is realised as x >= 0: the stopped state is the first grid point at or
    // past 0 and g is evaluated there.
    static bool in_left_well(double x) { return x < 0.0; }

    double terminal_cost(double x) const {
        return in_left_well(x) ? -std::log(epsilon) : -std::log1p(epsilon);
    }
};

inline ProblemSpec make_double_well(double sigma, double epsilon, double horizon = 1.0) {
    if (!(sigma > 0.0)) throw std::invalid_argument("make_double_well: sigma must be positive");
    if (!(epsilon > 0.0) || !(epsilon < 1.0))
        throw std::invalid_argument("make_double_well: epsilon must be in (0, 1)");
    if (!(horizon > 0.0)) throw std::invalid_argument("make_double_well: horizon must be positive");

    const DoubleWell well{sigma, epsilon};
    ProblemSpec spec;
    spec.dim = 1;
    spec.noise_dim = 1;
    spec.drift = [](std::span<const double> x, double, std::span<double> out) {
        out[0] = DoubleWell::drift(x[0]);
    };
    spec.diffusion = [sigma](std::span<const double>, std::span<double> out) { out[0] = sigma; };
    spec.running_cost = [](std::span<const double>, double) { return 0.0; };
    spec.terminal_cost = [well](std::span<const double> x) { return well.terminal_cost(x[0]); };
    // g_eps is piecewise constant, so its a.e. gradient is zero.
    spec.terminal_cost_grad = [](std::span<const double>, std::span<double> out) { out[0] = 0.0; };
    spec.domain_indicator = [](std::span<const double> x) { return DoubleWell::in_left_well(x[0]); };
    spec.horizon = horizon;
    return spec;
}

/// Exit probability recovered from the regularised free energy through
/// P(tau_O < T) = exp(-gamma_eps) - eps. A statistically overestimated
/// gamma_eps can push the formula marginally negative; that case is reported
/// as a flagged zero rather than a negative probability.
struct ExitProbability {
    double value = 0.0;
    bool clamped = false;  // gamma_eps exceeded the regularisation floor
};

inline ExitProbability exit_probability_from_value(double gamma_eps, double epsilon) {
    const double p = std::exp(-gamma_eps) - epsilon;
    if (p < 0.0) return {0.0, true};
    return {p, false};
}

}  // namespace fbsde
