#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fbsde/model.hpp"
#include "fbsde/rng.hpp"
#include "fbsde/simulate.hpp"
#include "fbsde/time_grid.hpp"

namespace fbsde {

enum class BasisKind { GaussianRbf };

/// Gaussian radial basis phi_k(x) = exp(-|mu_k(n) - x|^2 / (2 delta)) with
/// per-time-step centres, optionally augmented by a low-order polynomial tail
/// (constant, or constant plus linear). The tail lets the regression carry
/// flat profiles exactly, which pure Gaussians cannot. The time-indexed
/// interface is kept even for static centre sets so other basis families can
/// slot in behind it.
struct BasisSet {
    BasisKind kind = BasisKind::GaussianRbf;
    int dim = 0;
    int n_steps = 0;     // centres defined for n = 0..n_steps
    int n_centres = 0;   // K
    double width = 0.1;  // delta
    int poly_order = -1;  // -1 none, 0 constant, 1 constant + linear
    std::vector<double> centres;  // (n_steps + 1) x K x dim

    int tail_size() const {
        if (poly_order < 0) return 0;
        return 1 + (poly_order >= 1 ? dim : 0);
    }
    int size() const { return n_centres + tail_size(); }

    std::span<const double> centre(int n, int k) const {
        return {centres.data() + (static_cast<std::size_t>(n) * n_centres + k) * dim,
                static_cast<std::size_t>(dim)};
    }

    void check_step(int n) const {
        if (n < 0 || n > n_steps) throw std::invalid_argument("BasisSet: step outside the grid");
    }

    /// All basis values at step n; out needs size() entries. Gaussian entries
    /// come first, then the polynomial tail.
    void eval(int n, std::span<const double> x, std::span<double> out) const {
        check_step(n);
        for (int k = 0; k < n_centres; ++k) {
            auto mu = centre(n, k);
            double q = 0.0;
            for (int i = 0; i < dim; ++i) {
                const double r = mu[i] - x[i];
                q += r * r;
            }
            out[k] = std::exp(-q / (2.0 * width));
        }
        if (poly_order >= 0) out[n_centres] = 1.0;
        if (poly_order >= 1) {
            for (int i = 0; i < dim; ++i) out[n_centres + 1 + i] = x[i];
        }
    }

    /// grad phi_k(x) = phi_k(x) (mu_k - x) / delta plus the tail gradients,
    /// row-major size() x dim.
    void eval_grad(int n, std::span<const double> x, std::span<double> out) const {
        check_step(n);
        std::vector<double> phi(size());
        eval(n, x, phi);
        grad_from_values(n, x, phi, out);
    }

    // Gradient reusing already-computed basis values (no extra exp calls).
    void grad_from_values(int n, std::span<const double> x, std::span<const double> phi,
                          std::span<double> out) const {
        for (int k = 0; k < n_centres; ++k) {
            auto mu = centre(n, k);
            for (int i = 0; i < dim; ++i) out[k * dim + i] = phi[k] * (mu[i] - x[i]) / width;
        }
        if (poly_order >= 0) {
            for (int i = 0; i < dim; ++i) out[n_centres * dim + i] = 0.0;
        }
        if (poly_order >= 1) {
            for (int j = 0; j < dim; ++j)
                for (int i = 0; i < dim; ++i)
                    out[(n_centres + 1 + j) * dim + i] = (i == j) ? 1.0 : 0.0;
        }
    }
};

/// alpha_k(t_n) for all fitted steps of the backward recursion. Steps below
/// valid_from (and above last_fitted) were never fitted; reading them is a
/// staleness error.
struct CoefficientSchedule {
    int n_steps = 0;
    int width = 0;  // number of basis functions
    std::vector<double> alphas;  // (n_steps + 1) x width
    int valid_from = 0;
    int last_fitted = -1;

    CoefficientSchedule() = default;
    CoefficientSchedule(int n_steps_, int width_)
        : n_steps(n_steps_),
          width(width_),
          alphas(static_cast<std::size_t>(n_steps_ + 1) * width_, 0.0),
          valid_from(n_steps_ + 1),
          last_fitted(-1) {}

    bool fitted(int n) const { return n >= valid_from && n <= last_fitted; }

    std::span<double> row(int n) {
        return {alphas.data() + static_cast<std::size_t>(n) * width,
                static_cast<std::size_t>(width)};
    }
    std::span<const double> row(int n) const {
        return {alphas.data() + static_cast<std::size_t>(n) * width,
                static_cast<std::size_t>(width)};
    }

    std::span<const double> at(int n) const {
        if (!fitted(n))
            throw std::runtime_error("CoefficientSchedule: coefficients at step " +
                                     std::to_string(n) + " were never fitted");
        return row(n);
    }
};

inline double eval_value(const BasisSet& basis, const CoefficientSchedule& coeffs, int n,
                         std::span<const double> x) {
    auto alpha = coeffs.at(n);
    std::vector<double> phi(basis.size());
    basis.eval(n, x, phi);
    double v = 0.0;
    for (int k = 0; k < basis.size(); ++k) v += alpha[k] * phi[k];
    return v;
}

inline void eval_value_grad(const BasisSet& basis, const CoefficientSchedule& coeffs, int n,
                            std::span<const double> x, std::span<double> out) {
    auto alpha = coeffs.at(n);
    std::vector<double> phi(basis.size());
    std::vector<double> grad(static_cast<std::size_t>(basis.size()) * basis.dim);
    basis.eval(n, x, phi);
    basis.grad_from_values(n, x, phi, grad);
    for (int i = 0; i < basis.dim; ++i) out[i] = 0.0;
    for (int k = 0; k < basis.size(); ++k)
        for (int i = 0; i < basis.dim; ++i) out[i] += alpha[k] * grad[k * basis.dim + i];
}

/// Centres from K auxiliary forward trajectories, mu_k(n) = X^(k)_n, frozen
/// after exit like the regression ensemble. The paths come from a dedicated
/// substream of `seed`, so they are independent of any ensemble simulated
/// with the same seed.
inline std::vector<double> adaptive_centres(const ProblemSpec& spec, const TimeGrid& grid,
                                            std::span<const double> x0, int n_centres,
                                            std::uint64_t seed) {
    if (n_centres < 1) throw std::invalid_argument("adaptive_centres: need at least one centre");
    const auto batch = simulate_forward(spec, grid, x0, static_cast<std::size_t>(n_centres),
                                        derive_seed(seed, stream_tag::centres), /*freeze=*/true);
    std::vector<double> centres(static_cast<std::size_t>(grid.n_steps + 1) * n_centres * spec.dim);
    for (int n = 0; n <= grid.n_steps; ++n) {
        for (int k = 0; k < n_centres; ++k) {
            auto x = batch.state(k, n);
            for (int i = 0; i < spec.dim; ++i)
                centres[(static_cast<std::size_t>(n) * n_centres + k) * spec.dim + i] = x[i];
        }
    }
    return centres;
}

namespace detail {

// 1D only: drop centres closer than r_min to their left neighbour and
// re-place the freed ones halfway across the widest remaining gaps. Frozen
// centre paths pile up at the exit boundary; keeping near-duplicate Gaussian
// columns degrades the design-matrix rank while the region between the pile
// and the bulk goes uncovered.
inline std::vector<double> respace_1d(std::vector<double> c, double r_min) {
    std::sort(c.begin(), c.end());
    std::vector<double> kept;
    kept.reserve(c.size());
    int freed = 0;
    for (double v : c) {
        if (!kept.empty() && v - kept.back() < r_min) {
            ++freed;
            continue;
        }
        kept.push_back(v);
    }
    while (freed-- > 0) {
        if (kept.size() < 2) {
            kept.push_back(kept.empty() ? 0.0 : kept[0] + r_min);
            continue;
        }
        std::size_t gi = 0;
        double gap = -1.0;
        for (std::size_t i = 0; i + 1 < kept.size(); ++i) {
            if (kept[i + 1] - kept[i] > gap) {
                gap = kept[i + 1] - kept[i];
                gi = i;
            }
        }
        kept.insert(kept.begin() + gi + 1, kept[gi] + gap / 2.0);
    }
    return kept;
}

}  // namespace detail

/// Basis over adaptive centres with the affine tail. For 1D problems,
/// near-duplicate centres (within half a kernel width) are respaced into the
/// largest coverage gaps at each step; disable with respace_duplicates =
/// false to keep the raw path states.
inline BasisSet make_adaptive_basis(const ProblemSpec& spec, const TimeGrid& grid,
                                    std::span<const double> x0, int n_centres, double width,
                                    std::uint64_t seed, int poly_order = 1,
                                    bool respace_duplicates = true) {
    if (!(width > 0.0)) throw std::invalid_argument("make_adaptive_basis: width must be positive");
    if (poly_order > 1) throw std::invalid_argument("make_adaptive_basis: poly_order is at most 1");
    BasisSet basis;
    basis.dim = spec.dim;
    basis.n_steps = grid.n_steps;
    basis.n_centres = n_centres;
    basis.width = width;
    basis.poly_order = poly_order;
    basis.centres = adaptive_centres(spec, grid, x0, n_centres, seed);
    if (respace_duplicates && spec.dim == 1) {
        const double r_min = 0.5 * std::sqrt(width);
        std::vector<double> cn(n_centres);
        for (int n = 0; n <= grid.n_steps; ++n) {
            for (int k = 0; k < n_centres; ++k) cn[k] = basis.centres[(std::size_t)n * n_centres + k];
            auto spaced = detail::respace_1d(cn, r_min);
            for (int k = 0; k < n_centres; ++k) basis.centres[(std::size_t)n * n_centres + k] = spaced[k];
        }
    }
    return basis;
}

}  // namespace fbsde
