#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "fbsde/model.hpp"

namespace fbsde {

/// Grid for the 1D exit-probability reference solve on (x_min, 0):
/// absorbing boundary psi = 1 at x = 0, reflecting wall at x_min.
struct PdeGrid {
    double x_min = -3.5;
    double x_max = 0.0;
    int n_x = 701;       // node spacing 0.005 with the defaults
    double dt = 1e-3;

    void validate() const {
        if (!(x_min < x_max)) throw std::invalid_argument("PdeGrid: x_min must be below x_max");
        if (n_x < 3) throw std::invalid_argument("PdeGrid: need at least 3 spatial points");
        if (!(dt > 0.0)) throw std::invalid_argument("PdeGrid: dt must be positive");
    }
    double dx() const { return (x_max - x_min) / (n_x - 1); }
    double node(int i) const { return x_min + i * dx(); }
};

/// psi(., T) on the grid nodes with linear interpolation in between.
struct PdeSolution {
    std::vector<double> x;
    std::vector<double> psi;
    double min_seen = 0.0;  // extremes over every time slice, for the
    double max_seen = 0.0;  // maximum-principle check

    double operator()(double xq) const {
        if (xq <= x.front()) return psi.front();
        if (xq >= x.back()) return psi.back();
        const double dx = x[1] - x[0];
        const auto i = static_cast<std::size_t>((xq - x.front()) / dx);
        const std::size_t j = std::min(i, x.size() - 2);
        const double w = (xq - x[j]) / dx;
        return (1.0 - w) * psi[j] + w * psi[j + 1];
    }
};

namespace detail {

// Thomas algorithm; diagonals are overwritten.
inline void solve_tridiagonal(std::vector<double>& lower, std::vector<double>& diag,
                              std::vector<double>& upper, std::vector<double>& rhs,
                              std::vector<double>& out) {
    const std::size_t n = diag.size();
    for (std::size_t i = 1; i < n; ++i) {
        const double w = lower[i] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    out[n - 1] = rhs[n - 1] / diag[n - 1];
    for (std::size_t i = n - 1; i-- > 0;) {
        out[i] = (rhs[i] - upper[i] * out[i + 1]) / diag[i];
    }
}

}  // namespace detail

/// Crank-Nicolson solve of psi_t = 1/2 sigma^2 psi_xx + b(x) psi_x on
/// (x_min, 0) with psi(0, t) = 1, psi(x, 0) = 0 and a reflecting (zero-flux,
/// one-sided second-order) condition at x_min. Returns psi(., T), i.e. the
/// exit probability P(tau_O < T | X_0 = x). The first few steps use halved
/// implicit-Euler substeps to damp the corner discontinuity at (0, 0).
/// Only 1D problems with constant diffusion are supported.
inline PdeSolution solve_exit_probability(
    const ProblemSpec& spec, const PdeGrid& grid,
    const std::function<void(int, std::span<const double>)>& on_slice = nullptr) {
    spec.validate();
    grid.validate();
    if (spec.dim != 1) throw std::invalid_argument("solve_exit_probability: 1D problems only");

    const int n_t = static_cast<int>(std::floor(spec.horizon / grid.dt + 1e-9));
    if (n_t < 1) throw std::invalid_argument("solve_exit_probability: horizon under one step");

    const int nx = grid.n_x;
    const double dx = grid.dx();

    double sigma = 0.0;
    {
        const double probe = 0.5 * (grid.x_min + grid.x_max);
        std::span<const double> xs(&probe, 1);
        double s = 0.0;
        spec.diffusion(xs, {&s, 1});
        sigma = s;
    }
    const double diff = 0.5 * sigma * sigma;

    // drift at the nodes; the generator is autonomous here (t = 0 probe)
    std::vector<double> bx(nx);
    for (int i = 0; i < nx; ++i) {
        const double xi = grid.node(i);
        std::span<const double> xs(&xi, 1);
        double b = 0.0;
        spec.drift(xs, 0.0, {&b, 1});
        bx[i] = b;
    }

    // L psi at node i: lo_i psi_{i-1} + di_i psi_i + up_i psi_{i+1}
    std::vector<double> lo(nx), di(nx), up(nx);
    for (int i = 0; i < nx; ++i) {
        lo[i] = diff / (dx * dx) - bx[i] / (2.0 * dx);
        di[i] = -2.0 * diff / (dx * dx);
        up[i] = diff / (dx * dx) + bx[i] / (2.0 * dx);
    }

    std::vector<double> psi(nx, 0.0), psi_new(nx, 0.0);
    std::vector<double> tl(nx - 2), td(nx - 2), tu(nx - 2), rhs(nx - 2), sol(nx - 2);

    double min_seen = 0.0, max_seen = 0.0;
    const double tol = 1e-6;

    // reflecting wall: psi_0 = (4 psi_1 - psi_2) / 3 (second-order one-sided)
    auto apply_reflecting = [&](std::vector<double>& v) { v[0] = (4.0 * v[1] - v[2]) / 3.0; };

    auto step = [&](double theta, double dt_eff) {
        // unknowns are interior nodes i = 1..nx-2; Dirichlet psi = 1 at the
        // right end, reflecting relation eliminates node 0
        for (int i = 1; i <= nx - 2; ++i) {
            const int r = i - 1;
            tl[r] = -theta * dt_eff * lo[i];
            td[r] = 1.0 - theta * dt_eff * di[i];
            tu[r] = -theta * dt_eff * up[i];
            double lpsi = lo[i] * psi[i - 1] + di[i] * psi[i] + up[i] * psi[i + 1];
            rhs[r] = psi[i] + (1.0 - theta) * dt_eff * lpsi;
        }
        // fold the reflecting relation psi_0 = (4 psi_1 - psi_2)/3 into row 0
        td[0] += tl[0] * 4.0 / 3.0;
        tu[0] += tl[0] * (-1.0 / 3.0);
        tl[0] = 0.0;
        // fold the Dirichlet value psi = 1 into the last row
        rhs[nx - 3] -= tu[nx - 3] * 1.0;
        tu[nx - 3] = 0.0;

        detail::solve_tridiagonal(tl, td, tu, rhs, sol);
        for (int i = 1; i <= nx - 2; ++i) psi_new[i] = sol[i - 1];
        psi_new[nx - 1] = 1.0;
        apply_reflecting(psi_new);
        psi.swap(psi_new);
    };

    constexpr int kStartupSteps = 2;  // implicit-Euler half-steps per startup step
    int slice = 0;
    for (int k = 0; k < n_t; ++k) {
        if (k < kStartupSteps) {
            step(1.0, grid.dt / 2.0);
            step(1.0, grid.dt / 2.0);
        } else {
            step(0.5, grid.dt);
        }
        ++slice;
        for (double v : psi) {
            min_seen = std::min(min_seen, v);
            max_seen = std::max(max_seen, v);
        }
        if (min_seen < -tol || max_seen > 1.0 + tol)
            throw std::runtime_error(
                "solve_exit_probability: solution left [0, 1]; refine dt/dx");
        if (on_slice) on_slice(slice, psi);
    }

    PdeSolution out;
    out.x.resize(nx);
    for (int i = 0; i < nx; ++i) out.x[i] = grid.node(i);
    out.psi = psi;
    out.min_seen = min_seen;
    out.max_seen = max_seen;
    return out;
}

/// V_ref = -log(psi(x, T) + epsilon), the regularised reference value.
inline double reference_value(const ProblemSpec& spec, const PdeGrid& grid, double x,
                              double epsilon) {
    const auto psi = solve_exit_probability(spec, grid);
    return -std::log(psi(x) + epsilon);
}

}  // namespace fbsde
