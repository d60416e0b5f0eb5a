#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fbsde/basis.hpp"
#include "fbsde/model.hpp"
#include "fbsde/trajectory.hpp"

namespace fbsde {

/// Nonlinearity h(t, x, y, z) of the backward equation dY = -h dt + Z.dB.
struct Driver {
    std::function<double(double t, std::span<const double> x, double y,
                         std::span<const double> z)>
        evaluate;
};

/// Free-energy driver h = -1/2 |z|^2 + f(x, t).
inline Driver free_energy_driver(const ProblemSpec& spec) {
    auto f = spec.running_cost;
    return Driver{[f](double t, std::span<const double> x, double, std::span<const double> z) {
        double z2 = 0.0;
        for (double v : z) z2 += v * v;
        return -0.5 * z2 + f(x, t);
    }};
}

/// Driver for a forward simulation whose drift was changed from b to b0:
/// h~(t, x, y, z) = h(t, x, y, z) + sigma(x)^{-1} (b(x,t) - b0(x,t)) . z.
/// Requires a square invertible diffusion. The forward ensemble passed to
/// backward_solve must have been simulated under b0.
inline Driver drift_changed_driver(const ProblemSpec& spec, DriftFn b0) {
    if (spec.dim != spec.noise_dim)
        throw std::invalid_argument("drift_changed_driver: requires square diffusion (d == m)");
    auto h = free_energy_driver(spec);
    auto b = spec.drift;
    auto sigma = spec.diffusion;
    const int d = spec.dim;
    return Driver{[h, b, b0, sigma, d](double t, std::span<const double> x, double y,
                                       std::span<const double> z) {
        std::vector<double> bx(d), b0x(d), sig(d * d);
        b(x, t, bx);
        b0(x, t, b0x);
        sigma(x, sig);
        double corr = 0.0;
        if (d == 1) {
            if (std::abs(sig[0]) < 1e-300)
                throw std::runtime_error("drift_changed_driver: singular diffusion");
            corr = (bx[0] - b0x[0]) / sig[0] * z[0];
        } else {
            Eigen::MatrixXd S(d, d);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) S(i, j) = sig[i * d + j];
            Eigen::VectorXd rhs(d);
            for (int i = 0; i < d; ++i) rhs[i] = bx[i] - b0x[i];
            Eigen::FullPivLU<Eigen::MatrixXd> lu(S);
            if (!lu.isInvertible())
                throw std::runtime_error("drift_changed_driver: singular diffusion");
            Eigen::VectorXd w = lu.solve(rhs);
            for (int i = 0; i < d; ++i) corr += w[i] * z[i];
        }
        return h.evaluate(t, x, y, z) + corr;
    }};
}

enum class ZScheme { GradientAnsatz, MartingaleIncrement };
enum class StoppingMode { FreezeAll, PerTrajectory };

struct LsmcConfig {
    ZScheme z_scheme = ZScheme::GradientAnsatz;
    StoppingMode stopping_mode = StoppingMode::FreezeAll;
    double rank_tolerance = 1e-8;  // relative singular-value cutoff
    double ridge = 0.0;            // optional Tikhonov term for rough data

    // Explicit quadratic drivers are only conditionally stable; the taming
    // factor 1/(1 + dt |z|^2) bounds the per-step increment and vanishes as
    // dt -> 0. Disable to run the raw scheme.
    bool tame_driver = true;

    // In freeze-all mode a stopped trajectory keeps its exact boundary value
    // as regression data for this long after its exit, then follows the
    // fitted surface (clamped to the data hull) like any other row. Pinning
    // forever lets the ever-growing boundary pile dominate the fit and bias
    // the interior down; floating immediately lets the boundary data creep.
    // When the stopped cohort is too small to support a local fit it stays
    // pinned regardless. Negative means the auto scale width / (4 sigma^2),
    // a quarter of the boundary-layer relaxation time.
    double boundary_pin_time = -1.0;

    // Per-trajectory mode shrinks the regression to the M_n paths still in
    // the domain, so late steps can be data-starved. The solve is then
    // capped at ceil(M_n / 2) principal directions and the fitted values
    // are clamped into the data hull (a property the exact conditional
    // expectation always has). Inactive in freeze-all mode.
    bool stabilise_sparse_steps = true;
};

struct StepDiagnostics {
    int step = 0;
    int active = 0;          // M_n, regression rows
    int rank = 0;            // effective rank of A_n
    double residual = 0.0;   // |A alpha - b|
    double condition = 0.0;  // sigma_max / sigma_min
    bool rank_deficient = false;
};

struct LsmcSolution {
    CoefficientSchedule coeffs;
    std::vector<double> y0_samples;
    double gamma_estimate = 0.0;
    std::vector<StepDiagnostics> step_diagnostics;  // index n = 0..N-1
    int max_rank = 0;
    int min_active = 0;
    // recommendation to the caller: rerun with K equal to the max observed rank
    int recommended_basis_size = 0;
    bool any_rank_deficient = false;
    std::size_t skipped_paths = 0;  // blown-up trajectories excluded throughout
};

namespace detail {

// Rank-revealing least squares on A (rows x K). With ridge = 0 this is the
// minimum-norm solution, which coincides with (A^T A)^{-1} A^T b on
// full-rank problems; with ridge > 0 singular values are Tikhonov-filtered.
struct LsqSolver {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd;
    int rank = 0;
    double condition = 0.0;
    double ridge = 0.0;

    LsqSolver(const Eigen::MatrixXd& A, double rank_tolerance, double ridge_, int rank_cap = 0)
        : svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV), ridge(ridge_) {
        const auto& s = svd.singularValues();
        const double cutoff = rank_tolerance * (s.size() > 0 ? s[0] : 0.0);
        for (int i = 0; i < s.size(); ++i)
            if (s[i] > cutoff) ++rank;
        if (rank_cap > 0) rank = std::min(rank, rank_cap);
        const double smin = s.size() > 0 ? s[s.size() - 1] : 0.0;
        condition = smin > 0.0 ? s[0] / smin : std::numeric_limits<double>::infinity();
    }

    Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
        const auto& s = svd.singularValues();
        Eigen::VectorXd c = svd.matrixU().transpose() * b;
        for (int i = 0; i < s.size(); ++i) {
            if (ridge > 0.0)
                c[i] *= s[i] / (s[i] * s[i] + ridge);
            else
                c[i] = (i < rank) ? c[i] / s[i] : 0.0;
        }
        return svd.matrixV() * c;
    }
};

}  // namespace detail

/// Backward least-squares Monte Carlo sweep: every path is initialised with
/// its terminal data Y = g, Z = sigma^T grad g at its own stop step, then
/// alpha(t_n) is fitted for n = N-1 .. 1 and gamma = mean of Y_0 is read out
/// (all paths share X_0, so the step-0 projection collapses to the average).
inline LsmcSolution backward_solve(const TrajectoryBatch& batch, const BasisSet& basis,
                                   const Driver& driver, const ProblemSpec& spec,
                                   const LsmcConfig& config) {
    spec.validate();
    if (!driver.evaluate) throw std::invalid_argument("backward_solve: driver not set");
    if (basis.n_steps != batch.grid.n_steps || basis.dim != batch.dim)
        throw std::invalid_argument("backward_solve: basis and batch use different grids");
    if (config.stopping_mode == StoppingMode::PerTrajectory && batch.frozen)
        throw std::invalid_argument(
            "backward_solve: per-trajectory stopping needs an unfrozen batch");
    if (!(config.rank_tolerance > 0.0))
        throw std::invalid_argument("backward_solve: rank_tolerance must be positive");
    if (config.ridge < 0.0) throw std::invalid_argument("backward_solve: ridge must be >= 0");

    const int N = batch.grid.n_steps;
    const std::size_t M = batch.n_paths;
    const int d = batch.dim;
    const int mn = batch.noise_dim;
    const int K = basis.size();
    const double dt = batch.grid.dt;
    const double sqrt_dt = std::sqrt(dt);
    const bool per_traj = config.stopping_mode == StoppingMode::PerTrajectory;

    LsmcSolution sol;
    sol.coeffs = CoefficientSchedule(N, K);
    sol.step_diagnostics.assign(N, {});

    std::vector<double> y(M, 0.0);
    std::vector<double> z(M * mn, 0.0);
    std::vector<double> grad_g(d), sig(d * mn), gbuf(static_cast<std::size_t>(K) * d);

    // noise scale for the pin-window default
    double sigma2 = 0.0;
    {
        spec.diffusion(batch.state(0, 0), sig);
        for (int i = 0; i < d * mn; ++i) sigma2 += sig[i] * sig[i];
        sigma2 /= mn;
        if (!(sigma2 > 0.0)) sigma2 = 1.0;
    }
    const double pin_time =
        config.boundary_pin_time < 0.0 ? basis.width / (4.0 * sigma2) : config.boundary_pin_time;
    const int pin_steps = static_cast<int>(std::lround(pin_time / dt));

    const double tame = config.tame_driver ? dt : 0.0;

    auto terminal_grad = [&](std::span<const double> x, std::span<double> out) {
        if (spec.terminal_cost_grad) {
            spec.terminal_cost_grad(x, out);
            return;
        }
        // central differences
        std::vector<double> xp(x.begin(), x.end()), xm(x.begin(), x.end());
        for (int i = 0; i < d; ++i) {
            const double h = 1e-6 * std::max(1.0, std::abs(x[i]));
            xp[i] = x[i] + h;
            xm[i] = x[i] - h;
            out[i] = (spec.terminal_cost(xp) - spec.terminal_cost(xm)) / (2.0 * h);
            xp[i] = x[i];
            xm[i] = x[i];
        }
    };

    // Terminal data at each path's own stop step. A stopped path's exact
    // continuation has constant Y and Z = 0, so its boundary value is held
    // as regression data for the pin window and never fed through the driver.
    std::vector<double> y_stop(M, 0.0);
    auto init_terminal = [&](std::size_t m) {
        const int n_stop = batch.stop_step(m);
        auto x = batch.state(m, n_stop);
        y[m] = y_stop[m] = spec.terminal_cost(x);
        terminal_grad(x, grad_g);
        spec.diffusion(x, sig);
        for (int j = 0; j < mn; ++j) {
            double v = 0.0;
            for (int i = 0; i < d; ++i) v += sig[i * mn + j] * grad_g[i];
            z[m * mn + j] = v;
        }
    };

    sol.skipped_paths = batch.failed_count();
    if (sol.skipped_paths == M) throw std::runtime_error("backward_solve: every path failed");
    for (std::size_t m = 0; m < M; ++m) {
        if (!batch.failed[m]) init_terminal(m);
    }

    std::vector<std::size_t> rows;
    rows.reserve(M);
    sol.min_active = static_cast<int>(M);

    std::vector<double> phi_rows;
    std::vector<std::size_t> reentering;
    // whether the path was inside the basis support at the previous sweep
    // step; paths rejoin the regression by adopting the fitted consensus
    // value at their state, never by dictating a stale value into the fit
    std::vector<char> was_supported(M, 1);
    for (int n = N - 1; n >= 1; --n) {
        // Regression rows: in per-trajectory mode the paths with stop step
        // >= n (the one exiting exactly at n enters carrying its boundary
        // value). In freeze-all mode a row additionally needs some Gaussian
        // to actually cover its state: a path on a rare excursion far from
        // the sampled bulk cannot be estimated by the ensemble, and forcing
        // its row into the least squares only bends the global tail
        // components. Such paths hold their value, and when they drift back
        // into the supported region they assimilate the fitted value there.
        rows.clear();
        reentering.clear();
        std::size_t n_alive = 0;
        std::size_t n_stopped = 0;
        std::vector<double> phi(K);
        constexpr double kSupport = 0.36787944117144233;  // exp(-1)
        // one basis evaluation per healthy row, cached for the assembly,
        // counting the rows outside the basis support as we go: one or two
        // are rare excursions whose rows only bend the global tail
        // components, but a populated region is genuine data even without a
        // centre on top
        phi_rows.assign(M * static_cast<std::size_t>(K), 0.0);
        std::vector<char> candidate(M, 0), lonely(M, 0);
        std::size_t n_lonely = 0;
        for (std::size_t m = 0; m < M; ++m) {
            if (batch.failed[m]) continue;
            if (per_traj && batch.stop_step(m) < n) continue;
            candidate[m] = 1;
            std::span<double> row(phi_rows.data() + m * K, static_cast<std::size_t>(K));
            basis.eval(n, batch.state(m, n), row);
            if (!per_traj) {
                double support = 0.0;
                for (int k = 0; k < basis.n_centres; ++k) support = std::max(support, row[k]);
                if (support < kSupport) {
                    lonely[m] = 1;
                    ++n_lonely;
                }
            }
        }
        const bool drop_lonely = n_lonely <= std::max<std::size_t>(2, M / 100);
        for (std::size_t m = 0; m < M; ++m) {
            if (!candidate[m]) continue;
            const bool alive_here = batch.stop_step(m) > n;
            if (drop_lonely && lonely[m]) {
                was_supported[m] = 0;
                continue;  // holds its value this step
            }
            if (alive_here && !was_supported[m]) {
                // back inside the support after an excursion: read-only
                was_supported[m] = 1;
                reentering.push_back(m);
                continue;
            }
            was_supported[m] = 1;
            if (alive_here)
                ++n_alive;
            else
                ++n_stopped;
            rows.push_back(m);
        }
        const int Ma = static_cast<int>(rows.size());
        if (per_traj && Ma < 1)
            throw std::runtime_error(
                "backward_solve: no active trajectories at step " + std::to_string(n) +
                "; consider freeze-all stopping or a drift change");
        if (n_alive == 0) {
            // nothing for the regression to update at this step
            sol.step_diagnostics[n].step = n;
            sol.step_diagnostics[n].active = Ma;
            continue;
        }
        // a handful of stopped rows cannot anchor a boundary fit; they stay
        // pinned at their exact value instead of floating on the surface
        const bool float_stopped =
            !per_traj && n_stopped >= static_cast<std::size_t>(std::max<int>(K, Ma / 20));

        Eigen::MatrixXd A(Ma, K);
        for (int r = 0; r < Ma; ++r)
            for (int k = 0; k < K; ++k) A(r, k) = phi_rows[rows[r] * static_cast<std::size_t>(K) + k];

        const bool sparse_guard = per_traj && config.stabilise_sparse_steps;
        detail::LsqSolver lsq(A, config.rank_tolerance, config.ridge,
                              sparse_guard ? (Ma + 1) / 2 : 0);

        auto alive = [&](std::size_t m) { return batch.stop_step(m) > n; };
        auto pinned = [&](std::size_t m) {
            if (alive(m)) return false;
            return !float_stopped || (n - batch.stop_step(m)) < pin_steps;
        };

        // martingale-increment scheme: Z_n = E[xi_{n+1} Y_{n+1} | F_n] / sqrt(dt),
        // realised as a componentwise regression of xi Y onto the same basis.
        // A stopped path has constant Y, so E[xi Y | F_n] = 0 exactly.
        if (config.z_scheme == ZScheme::MartingaleIncrement) {
            Eigen::VectorXd data(Ma);
            for (int j = 0; j < mn; ++j) {
                for (int r = 0; r < Ma; ++r) {
                    const std::size_t m = rows[r];
                    data[r] = alive(m) ? batch.increment(m, n)[j] * y[m] / sqrt_dt : 0.0;
                }
                Eigen::VectorXd beta = lsq.solve(data);
                Eigen::VectorXd pred = A * beta;
                for (int r = 0; r < Ma; ++r) {
                    if (alive(rows[r])) z[rows[r] * mn + j] = pred[r];
                }
            }
        }

        // data: dynamic-programming update for paths alive on [t_n, t_{n+1});
        // the pinned boundary value, then the carried value, for stopped ones
        Eigen::VectorXd b(Ma);
        const double t_n = batch.grid.time(n);
        double b_lo = std::numeric_limits<double>::infinity();
        double b_hi = -std::numeric_limits<double>::infinity();
        for (int r = 0; r < Ma; ++r) {
            const std::size_t m = rows[r];
            if (alive(m)) {
                std::span<const double> zm(z.data() + m * mn, static_cast<std::size_t>(mn));
                double z2 = 0.0;
                for (double v : zm) z2 += v * v;
                const double hval = driver.evaluate(t_n, batch.state(m, n), y[m], zm);
                b[r] = y[m] + dt * hval / (1.0 + tame * z2);
            } else {
                b[r] = pinned(m) ? y_stop[m] : y[m];
            }
            b_lo = std::min(b_lo, b[r]);
            b_hi = std::max(b_hi, b[r]);
        }

        Eigen::VectorXd alpha = lsq.solve(b);
        Eigen::VectorXd y_fit = A * alpha;
        if (!alpha.allFinite() || !y_fit.allFinite() ||
            y_fit.cwiseAbs().maxCoeff() > 1e8)
            throw std::runtime_error("backward_solve: regression output diverged at step " +
                                     std::to_string(n));
        if (sparse_guard) {
            // conditional expectations never leave the hull of their data
            for (int r = 0; r < Ma; ++r) y_fit[r] = std::clamp(y_fit[r], b_lo, b_hi);
        }

        auto arow = sol.coeffs.row(n);
        for (int k = 0; k < K; ++k) arow[k] = alpha[k];
        sol.coeffs.valid_from = n;
        if (sol.coeffs.last_fitted < 0) sol.coeffs.last_fitted = N - 1;

        // carry Y_n and, in the gradient scheme, Z_n = sigma^T grad V_K.
        // Floating stopped rows follow the fit but never an extrapolated
        // value (conditional expectations stay inside the data hull).
        for (int r = 0; r < Ma; ++r) {
            const std::size_t m = rows[r];
            if (pinned(m)) continue;
            y[m] = alive(m) ? y_fit[r] : std::clamp(y_fit[r], b_lo, b_hi);
            if (!alive(m)) continue;
            if (config.z_scheme == ZScheme::GradientAnsatz) {
                auto x = batch.state(m, n);
                for (int k = 0; k < K; ++k) phi[k] = A(r, k);
                basis.grad_from_values(n, x, phi, gbuf);
                spec.diffusion(x, sig);
                for (int i = 0; i < d; ++i) {
                    double dv = 0.0;
                    for (int k = 0; k < K; ++k) dv += alpha[k] * gbuf[k * d + i];
                    grad_g[i] = dv;  // grad V_K scratch
                }
                for (int j = 0; j < mn; ++j) {
                    double v = 0.0;
                    for (int i = 0; i < d; ++i) v += sig[i * mn + j] * grad_g[i];
                    z[m * mn + j] = v;
                }
            }
        }

        // paths re-entering the supported region adopt the fitted value and
        // control at their state
        for (std::size_t m : reentering) {
            auto x = batch.state(m, n);
            for (int k = 0; k < K; ++k) phi[k] = phi_rows[m * static_cast<std::size_t>(K) + k];
            double v = 0.0;
            for (int k = 0; k < K; ++k) v += alpha[k] * phi[k];
            y[m] = std::clamp(v, b_lo, b_hi);
            basis.grad_from_values(n, x, phi, gbuf);
            spec.diffusion(x, sig);
            for (int i = 0; i < d; ++i) {
                double dv = 0.0;
                for (int k = 0; k < K; ++k) dv += alpha[k] * gbuf[k * d + i];
                grad_g[i] = dv;
            }
            for (int j = 0; j < mn; ++j) {
                double v2 = 0.0;
                for (int i = 0; i < d; ++i) v2 += sig[i * mn + j] * grad_g[i];
                z[m * mn + j] = v2;
            }
        }

        auto& diag = sol.step_diagnostics[n];
        diag.step = n;
        diag.active = Ma;
        diag.rank = lsq.rank;
        diag.residual = (A * alpha - b).norm();
        diag.condition = lsq.condition;
        diag.rank_deficient = lsq.rank < std::min<int>(K, Ma);
        sol.max_rank = std::max(sol.max_rank, lsq.rank);
        sol.min_active = std::min(sol.min_active, Ma);
        sol.any_rank_deficient = sol.any_rank_deficient || diag.rank_deficient;
    }

    // read-out at n = 0: all paths share X_0, so the projection onto the
    // basis is the plain average of b_0
    const double t0 = batch.grid.time(0);
    std::vector<double> z0(mn, 0.0);
    if (config.z_scheme == ZScheme::MartingaleIncrement) {
        std::size_t alive_count = 0;
        for (std::size_t m = 0; m < M; ++m) {
            if (batch.failed[m]) continue;
            for (int j = 0; j < mn; ++j) z0[j] += batch.increment(m, 0)[j] * y[m] / sqrt_dt;
            ++alive_count;
        }
        for (int j = 0; j < mn; ++j) z0[j] /= static_cast<double>(alive_count);
    }
    sol.y0_samples.clear();
    double acc = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
        if (batch.failed[m]) continue;
        std::span<const double> zm = (config.z_scheme == ZScheme::MartingaleIncrement)
                                         ? std::span<const double>(z0)
                                         : std::span<const double>(z.data() + m * mn,
                                                                   static_cast<std::size_t>(mn));
        double z2 = 0.0;
        for (double v : zm) z2 += v * v;
        const double hval = driver.evaluate(t0, batch.state(m, 0), y[m], zm);
        const double b0 = y[m] + dt * hval / (1.0 + tame * z2);
        sol.y0_samples.push_back(b0);
        acc += b0;
    }
    if (sol.y0_samples.empty()) throw std::runtime_error("backward_solve: no usable paths");
    sol.gamma_estimate = acc / static_cast<double>(sol.y0_samples.size());
    if (!std::isfinite(sol.gamma_estimate))
        throw std::runtime_error("backward_solve: non-finite free-energy estimate");

    auto& d0 = sol.step_diagnostics[0];
    d0.step = 0;
    d0.active = static_cast<int>(sol.y0_samples.size());
    d0.rank = 1;
    double ss = 0.0;
    for (double v : sol.y0_samples) ss += (v - sol.gamma_estimate) * (v - sol.gamma_estimate);
    d0.residual = std::sqrt(ss);
    d0.condition = 1.0;

    sol.recommended_basis_size = sol.max_rank;
    return sol;
}

}  // namespace fbsde
