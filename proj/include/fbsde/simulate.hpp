#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "fbsde/model.hpp"
#include "fbsde/parallel.hpp"
#include "fbsde/rng.hpp"
#include "fbsde/time_grid.hpp"
#include "fbsde/trajectory.hpp"

namespace fbsde {

/// Control that leaves the dynamics untouched. Used to route the plain
/// forward simulation through the same stepping code as the controlled one,
/// so a zero policy reproduces the forward batch path-for-path.
struct ZeroControl {
    bool operator()(std::span<const double>, int, std::span<double> u) const {
        for (double& v : u) v = 0.0;
        return false;
    }
};

struct ControlledBatch {
    TrajectoryBatch batch;
    std::vector<double> log_likelihood;  // discrete Girsanov log dQ/dP per path
    std::vector<int> clipped_steps;      // steps where the policy clipped
};

namespace detail {

inline bool all_finite(std::span<const double> x) {
    for (double v : x) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

// One path of the drift-shifted Euler scheme
//   X_{n+1} = X_n + dt (b + sigma u)(X_n, t_n) + sqrt(dt) sigma(X_n) xi_{n+1}
// with the Girsanov log-likelihood
//   L = sum_n u_n . xi_{n+1} sqrt(dt) + 1/2 sum_n |u_n|^2 dt
// accumulated up to the stop step. All n_steps increments are drawn from the
// path's own substream even past exit, so frozen and unfrozen runs of the
// same seed share identical draws.
template <class Policy>
void simulate_path(const ProblemSpec& spec, const Policy& policy, std::span<const double> x0,
                   std::uint64_t seed, std::size_t m, bool freeze, TrajectoryBatch& batch,
                   double* log_likelihood, int* clipped_steps) {
    const int d = spec.dim;
    const int mn = spec.noise_dim;
    const int n_steps = batch.grid.n_steps;
    const double dt = batch.grid.dt;
    const double sqrt_dt = std::sqrt(dt);

    NormalStream rng(seed, m);
    std::vector<double> b(d), sig(d * mn), u(mn);

    auto x = batch.state(m, 0);
    for (int i = 0; i < d; ++i) x[i] = x0[i];

    double loglik = 0.0;
    int clipped = 0;
    int exit_at = TrajectoryBatch::kNoExit;
    bool blown_up = false;

    for (int n = 0; n < n_steps; ++n) {
        auto xi = batch.increment(m, n);
        rng.fill(xi);

        auto x_cur = batch.state(m, n);
        auto x_next = batch.state(m, n + 1);

        const bool stopped = (exit_at != TrajectoryBatch::kNoExit) || blown_up;
        if (blown_up || (stopped && freeze)) {
            for (int i = 0; i < d; ++i) x_next[i] = x_cur[i];
            continue;
        }

        const double t = batch.grid.time(n);
        spec.drift(x_cur, t, b);
        spec.diffusion(x_cur, sig);

        const bool clipped_here = policy(x_cur, n, u);

        if (!stopped) {
            if (clipped_here) ++clipped;
            double unorm2 = 0.0, udotxi = 0.0;
            for (int j = 0; j < mn; ++j) {
                unorm2 += u[j] * u[j];
                udotxi += u[j] * xi[j];
            }
            loglik += udotxi * sqrt_dt + 0.5 * unorm2 * dt;
        }

        for (int i = 0; i < d; ++i) {
            double drift_term = b[i];
            double noise_term = 0.0;
            for (int j = 0; j < mn; ++j) {
                drift_term += sig[i * mn + j] * u[j];
                noise_term += sig[i * mn + j] * xi[j];
            }
            x_next[i] = x_cur[i] + dt * drift_term + sqrt_dt * noise_term;
        }

        if (!all_finite(x_next)) {
            // abort this trajectory: hold the last finite state
            blown_up = true;
            for (int i = 0; i < d; ++i) x_next[i] = x_cur[i];
            continue;
        }
        if (exit_at == TrajectoryBatch::kNoExit && !spec.in_domain(x_next)) {
            exit_at = n + 1;
        }
    }

    batch.exit_step[m] = exit_at;
    // a blow-up after exit leaves the usable part of the path intact
    batch.failed[m] = (blown_up && exit_at == TrajectoryBatch::kNoExit) ? 1 : 0;
    if (log_likelihood) *log_likelihood = loglik;
    if (clipped_steps) *clipped_steps = clipped;
}

}  // namespace detail

/// M independent Euler-Maruyama paths from x0 with first-exit detection.
/// Deterministic in (seed, M, grid) for any worker count. Paths that blow up
/// to non-finite values are frozen at the last finite state and flagged.
inline TrajectoryBatch simulate_forward(const ProblemSpec& spec, const TimeGrid& grid,
                                        std::span<const double> x0, std::size_t n_paths,
                                        std::uint64_t seed, bool freeze, int workers = 1) {
    spec.validate();
    if (n_paths < 1) throw std::invalid_argument("simulate_forward: need at least one path");
    if (static_cast<int>(x0.size()) != spec.dim)
        throw std::invalid_argument("simulate_forward: x0 has wrong dimension");
    if (!spec.in_domain(x0))
        throw std::invalid_argument("simulate_forward: x0 must lie inside the domain");

    TrajectoryBatch batch(spec.dim, spec.noise_dim, grid, n_paths, freeze);
    parallel_for(n_paths, workers, [&](std::size_t m) {
        detail::simulate_path(spec, ZeroControl{}, x0, seed, m, freeze, batch, nullptr, nullptr);
    });
    return batch;
}

/// Controlled ensemble under the drift b + sigma u plus the per-path
/// discretised Girsanov log-likelihood, stopped at exit. With a zero policy
/// this coincides path-for-path with simulate_forward at the same seed.
template <class Policy>
ControlledBatch simulate_controlled(const ProblemSpec& spec, const TimeGrid& grid,
                                    std::span<const double> x0, std::size_t n_paths,
                                    std::uint64_t seed, const Policy& policy, int workers = 1) {
    spec.validate();
    if (n_paths < 1) throw std::invalid_argument("simulate_controlled: need at least one path");
    if (static_cast<int>(x0.size()) != spec.dim)
        throw std::invalid_argument("simulate_controlled: x0 has wrong dimension");
    if (!spec.in_domain(x0))
        throw std::invalid_argument("simulate_controlled: x0 must lie inside the domain");

    ControlledBatch out{TrajectoryBatch(spec.dim, spec.noise_dim, grid, n_paths, true),
                        std::vector<double>(n_paths, 0.0), std::vector<int>(n_paths, 0)};
    parallel_for(n_paths, workers, [&](std::size_t m) {
        detail::simulate_path(spec, policy, x0, seed, m, /*freeze=*/true, out.batch,
                              &out.log_likelihood[m], &out.clipped_steps[m]);
    });
    return out;
}

/// Re-runs the Euler recursion from the stored increments; used to check the
/// replay invariant and to validate stored batches.
inline TrajectoryBatch replay_from_increments(const ProblemSpec& spec, const TrajectoryBatch& src) {
    TrajectoryBatch batch(src.dim, src.noise_dim, src.grid, src.n_paths, src.frozen);
    batch.increments = src.increments;
    const double dt = src.grid.dt;
    const double sqrt_dt = std::sqrt(dt);
    std::vector<double> b(src.dim), sig(src.dim * src.noise_dim);
    for (std::size_t m = 0; m < src.n_paths; ++m) {
        auto x = batch.state(m, 0);
        auto x0 = src.state(m, 0);
        for (int i = 0; i < src.dim; ++i) x[i] = x0[i];
        int exit_at = TrajectoryBatch::kNoExit;
        for (int n = 0; n < src.grid.n_steps; ++n) {
            auto x_cur = batch.state(m, n);
            auto x_next = batch.state(m, n + 1);
            if (src.frozen && exit_at != TrajectoryBatch::kNoExit) {
                for (int i = 0; i < src.dim; ++i) x_next[i] = x_cur[i];
                continue;
            }
            spec.drift(x_cur, src.grid.time(n), b);
            spec.diffusion(x_cur, sig);
            auto xi = batch.increment(m, n);
            for (int i = 0; i < src.dim; ++i) {
                double noise_term = 0.0;
                for (int j = 0; j < src.noise_dim; ++j) noise_term += sig[i * src.noise_dim + j] * xi[j];
                x_next[i] = x_cur[i] + dt * b[i] + sqrt_dt * noise_term;
            }
            if (exit_at == TrajectoryBatch::kNoExit && !spec.in_domain(x_next)) exit_at = n + 1;
        }
        batch.exit_step[m] = exit_at;
        batch.failed[m] = src.failed[m];
    }
    return batch;
}

}  // namespace fbsde
