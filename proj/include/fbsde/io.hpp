#pragma once

#include <cstdio>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>

#include "fbsde/basis.hpp"
#include "fbsde/lsmc.hpp"
#include "fbsde/pde.hpp"
#include "fbsde/trajectory.hpp"

namespace fbsde {

namespace detail {

inline std::ofstream open_csv(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    return out;
}

// shortest round-trip formatting, locale-independent
inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline void write_batch_csv(const std::string& path, const TrajectoryBatch& batch) {
    auto out = detail::open_csv(path);
    out << "path,step,exited";
    for (int i = 0; i < batch.dim; ++i) out << ",x" << i;
    out << "\n";
    for (std::size_t m = 0; m < batch.n_paths; ++m) {
        for (int n = 0; n <= batch.grid.n_steps; ++n) {
            out << m << ',' << n << ',' << (batch.exited(m) && n >= batch.exit_step[m] ? 1 : 0);
            auto x = batch.state(m, n);
            for (int i = 0; i < batch.dim; ++i) out << ',' << detail::fmt(x[i]);
            out << "\n";
        }
    }
}

inline void write_coefficients_csv(const std::string& path, const CoefficientSchedule& coeffs) {
    auto out = detail::open_csv(path);
    out << "step,k,alpha\n";
    for (int n = coeffs.valid_from; n <= coeffs.last_fitted; ++n) {
        auto row = coeffs.row(n);
        for (int k = 0; k < coeffs.width; ++k)
            out << n << ',' << k << ',' << detail::fmt(row[k]) << "\n";
    }
}

inline void write_diagnostics_csv(const std::string& path, const LsmcSolution& sol) {
    auto out = detail::open_csv(path);
    out << "step,active,rank,residual,condition,rank_deficient\n";
    for (const auto& d : sol.step_diagnostics) {
        out << d.step << ',' << d.active << ',' << d.rank << ',' << detail::fmt(d.residual)
            << ',' << detail::fmt(d.condition) << ',' << (d.rank_deficient ? 1 : 0) << "\n";
    }
}

inline void write_psi_csv(const std::string& path, const PdeSolution& sol) {
    auto out = detail::open_csv(path);
    out << "x,psi\n";
    for (std::size_t i = 0; i < sol.x.size(); ++i)
        out << detail::fmt(sol.x[i]) << ',' << detail::fmt(sol.psi[i]) << "\n";
}

inline void write_weights_csv(const std::string& path, std::span<const double> log_weights) {
    auto out = detail::open_csv(path);
    out << "path,log_weight\n";
    for (std::size_t m = 0; m < log_weights.size(); ++m)
        out << m << ',' << detail::fmt(log_weights[m]) << "\n";
}

}  // namespace fbsde
