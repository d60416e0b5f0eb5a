#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "fbsde/time_grid.hpp"

namespace fbsde {

/// Ensemble of discretised forward paths together with the Gaussian draws
/// that generated them (so any path can be replayed bit-exactly) and the
/// first-exit bookkeeping. When `frozen` is set, states past the exit step
/// repeat the stopped state.
struct TrajectoryBatch {
    static constexpr int kNoExit = -1;

    int dim = 0;
    int noise_dim = 0;
    TimeGrid grid;
    std::size_t n_paths = 0;
    bool frozen = true;

    std::vector<double> states;      // n_paths x (n_steps + 1) x dim
    std::vector<double> increments;  // n_paths x n_steps x noise_dim
    std::vector<int> exit_step;      // first n with X_n outside O, or kNoExit
    std::vector<std::uint8_t> failed;  // non-finite blow-up flags

    TrajectoryBatch() = default;
    TrajectoryBatch(int dim_, int noise_dim_, const TimeGrid& grid_, std::size_t n_paths_,
                    bool frozen_)
        : dim(dim_),
          noise_dim(noise_dim_),
          grid(grid_),
          n_paths(n_paths_),
          frozen(frozen_),
          states(n_paths_ * static_cast<std::size_t>(grid_.n_steps + 1) * dim_),
          increments(n_paths_ * static_cast<std::size_t>(grid_.n_steps) * noise_dim_),
          exit_step(n_paths_, kNoExit),
          failed(n_paths_, 0) {}

    std::span<double> state(std::size_t m, int n) {
        return {states.data() + (m * (grid.n_steps + 1) + n) * dim, static_cast<std::size_t>(dim)};
    }
    std::span<const double> state(std::size_t m, int n) const {
        return {states.data() + (m * (grid.n_steps + 1) + n) * dim, static_cast<std::size_t>(dim)};
    }
    std::span<double> increment(std::size_t m, int n) {
        return {increments.data() + (m * grid.n_steps + n) * noise_dim,
                static_cast<std::size_t>(noise_dim)};
    }
    std::span<const double> increment(std::size_t m, int n) const {
        return {increments.data() + (m * grid.n_steps + n) * noise_dim,
                static_cast<std::size_t>(noise_dim)};
    }

    bool exited(std::size_t m) const { return exit_step[m] != kNoExit; }

    // Step at which the path's clock stops: exit step, or the horizon.
    int stop_step(std::size_t m) const { return exited(m) ? exit_step[m] : grid.n_steps; }
    double stop_time(std::size_t m) const { return grid.time(stop_step(m)); }

    std::size_t exit_count() const {
        std::size_t c = 0;
        for (std::size_t m = 0; m < n_paths; ++m) c += exited(m);
        return c;
    }
    double exit_fraction() const {
        return n_paths == 0 ? 0.0 : static_cast<double>(exit_count()) / n_paths;
    }
    std::size_t failed_count() const {
        std::size_t c = 0;
        for (auto f : failed) c += f;
        return c;
    }

    /// Copy of the batch cut at an earlier horizon; exit steps past the cut
    /// become "no exit at the truncated horizon".
    TrajectoryBatch truncated(int n_steps_new) const {
        TrajectoryBatch out(dim, noise_dim, grid.truncated(n_steps_new), n_paths, frozen);
        for (std::size_t m = 0; m < n_paths; ++m) {
            for (int n = 0; n <= n_steps_new; ++n) {
                auto src = state(m, n);
                auto dst = out.state(m, n);
                for (int i = 0; i < dim; ++i) dst[i] = src[i];
            }
            for (int n = 0; n < n_steps_new; ++n) {
                auto src = increment(m, n);
                auto dst = out.increment(m, n);
                for (int j = 0; j < noise_dim; ++j) dst[j] = src[j];
            }
            out.exit_step[m] =
                (exited(m) && exit_step[m] <= n_steps_new) ? exit_step[m] : kNoExit;
            out.failed[m] = failed[m];
        }
        return out;
    }
};

}  // namespace fbsde
