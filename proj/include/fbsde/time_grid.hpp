#pragma once

#include <cmath>
#include <stdexcept>

namespace fbsde {

/// Uniform grid t_n = n * dt, n = 0..n_steps, with n_steps * dt = T up to
/// rounding of T / dt.
struct TimeGrid {
    double dt = 0.0;
    int n_steps = 0;

    TimeGrid() = default;
    TimeGrid(double dt_, int n_steps_) : dt(dt_), n_steps(n_steps_) {
        if (!(dt > 0.0)) throw std::invalid_argument("TimeGrid: dt must be positive");
        if (n_steps < 1) throw std::invalid_argument("TimeGrid: n_steps must be >= 1");
    }

    static TimeGrid from_horizon(double horizon, double dt) {
        if (!(horizon > 0.0)) throw std::invalid_argument("TimeGrid: horizon must be positive");
        if (!(dt > 0.0)) throw std::invalid_argument("TimeGrid: dt must be positive");
        // floor, with a guard so 5.0 / 1e-3 does not land on 4999
        const int n = static_cast<int>(std::floor(horizon / dt + 1e-9));
        if (n < 1) throw std::invalid_argument("TimeGrid: horizon shorter than one step");
        return TimeGrid(dt, n);
    }

    double time(int n) const { return n * dt; }
    double horizon() const { return n_steps * dt; }

    TimeGrid truncated(int n_steps_new) const {
        if (n_steps_new < 1 || n_steps_new > n_steps)
            throw std::invalid_argument("TimeGrid: invalid truncation length");
        return TimeGrid(dt, n_steps_new);
    }
};

}  // namespace fbsde
