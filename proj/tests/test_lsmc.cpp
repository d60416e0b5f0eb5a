#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "fbsde/basis.hpp"
#include "fbsde/lsmc.hpp"
#include "fbsde/model.hpp"
#include "fbsde/simulate.hpp"
#include "support.hpp"

using namespace fbsde;

TEST_SUITE_BEGIN("lsmc");

TEST_CASE("free-energy driver formula") {
    auto spec = testsupport::ou_quadratic(1.0);
    auto h = free_energy_driver(spec);
    const double x = 2.0;
    const double z0[1] = {0.0};
    CHECK(h.evaluate(0.0, {&x, 1}, 0.0, z0) == 0.0);

    ProblemSpec spec2 = spec;
    spec2.noise_dim = 1;
    spec2.dim = 2;  // two-component z below uses a 2D spec
    spec2.noise_dim = 2;
    const double x2[2] = {0.0, 0.0};
    const double z11[2] = {1.0, 1.0};
    auto h2 = free_energy_driver(spec2);
    CHECK(h2.evaluate(0.0, x2, 0.0, z11) == -1.0);

    ProblemSpec spec3 = spec;
    spec3.running_cost = [](std::span<const double> x_, double) { return x_[0]; };
    auto h3 = free_energy_driver(spec3);
    CHECK(h3.evaluate(0.5, {&x, 1}, 0.0, z0) == 2.0);
}

TEST_CASE("drift-changed driver reduces to the plain one when b0 = b") {
    auto spec = testsupport::ou_quadratic(1.0);
    auto h = free_energy_driver(spec);
    auto ht = drift_changed_driver(spec, spec.drift);
    for (double x : {-1.0, 0.3, 2.0}) {
        for (double z : {-2.0, 0.0, 1.5}) {
            CHECK(ht.evaluate(0.2, {&x, 1}, 0.0, {&z, 1}) ==
                  doctest::Approx(h.evaluate(0.2, {&x, 1}, 0.0, {&z, 1})));
        }
    }
}

TEST_CASE("drift-changed correction term") {
    // d = 1, sigma = 2, b - b0 = 1, z = 3 -> correction 1.5 on top of h
    ProblemSpec spec = testsupport::ou_quadratic(1.0);
    spec.drift = [](std::span<const double>, double, std::span<double> o) { o[0] = 1.0; };
    spec.diffusion = [](std::span<const double>, std::span<double> o) { o[0] = 2.0; };
    DriftFn b0 = [](std::span<const double>, double, std::span<double> o) { o[0] = 0.0; };
    auto h = free_energy_driver(spec);
    auto ht = drift_changed_driver(spec, b0);
    const double x = 0.0, z = 3.0;
    CHECK(ht.evaluate(0.0, {&x, 1}, 0.0, {&z, 1}) -
              h.evaluate(0.0, {&x, 1}, 0.0, {&z, 1}) ==
          doctest::Approx(1.5));
}

TEST_CASE("constant terminal cost is reproduced exactly") {
    ProblemSpec spec = testsupport::ou_quadratic(1.0);
    spec.terminal_cost = [](std::span<const double>) { return 3.25; };
    spec.terminal_cost_grad = [](std::span<const double>, std::span<double> o) { o[0] = 0.0; };
    auto grid = TimeGrid::from_horizon(1.0, 1e-2);
    const double x0 = 1.0;
    auto basis = make_adaptive_basis(spec, grid, {&x0, 1}, 4, 0.5, 7);  // tail carries constants
    auto batch = simulate_forward(spec, grid, {&x0, 1}, 200, 7, true);
    auto sol = backward_solve(batch, basis, free_energy_driver(spec), spec, LsmcConfig{});
    CHECK(std::abs(sol.gamma_estimate - 3.25) < 1e-10);
    for (double y0 : sol.y0_samples) CHECK(std::abs(y0 - 3.25) < 1e-10);
}

TEST_CASE("OU quadratic-cost free energy matches the closed form") {
    auto spec = testsupport::ou_quadratic(1.0);
    auto grid = TimeGrid::from_horizon(1.0, 1e-2);
    const double x0 = 1.0;
    const double exact = testsupport::ou_quadratic_free_energy(1.0, 1.0);
    std::vector<double> gammas;
    for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
        auto basis = make_adaptive_basis(spec, grid, {&x0, 1}, 10, 0.5, seed);
        auto batch = simulate_forward(spec, grid, {&x0, 1}, 2000, seed, true);
        auto sol = backward_solve(batch, basis, free_energy_driver(spec), spec, LsmcConfig{});
        gammas.push_back(sol.gamma_estimate);
    }
    CHECK(std::abs(testsupport::mean(gammas) - exact) < 5e-2);
}

TEST_CASE("both z-schemes agree on a smooth problem") {
    // the schemes are distinct O(dt)-consistent discretisations, so they can
    // only be compared where neither finite-size artifact dominates: the
    // martingale variant carries a +O(dt) z-lag bias and a -O(K/(dt M))
    // regression-noise bias; this grid keeps both under the sampling noise
    auto spec = testsupport::ou_quadratic(1.0);
    auto grid = TimeGrid::from_horizon(1.0, 0.04);
    const double x0 = 1.0;
    std::vector<double> grad_g, mart_g;
    for (std::uint64_t seed = 40; seed < 46; ++seed) {
        auto basis = make_adaptive_basis(spec, grid, {&x0, 1}, 10, 0.5, seed);
        auto batch = simulate_forward(spec, grid, {&x0, 1}, 2000, seed, true);
        LsmcConfig cfg;
        cfg.z_scheme = ZScheme::GradientAnsatz;
        grad_g.push_back(
            backward_solve(batch, basis, free_energy_driver(spec), spec, cfg).gamma_estimate);
        cfg.z_scheme = ZScheme::MartingaleIncrement;
        mart_g.push_back(
            backward_solve(batch, basis, free_energy_driver(spec), spec, cfg).gamma_estimate);
    }
    const double diff = testsupport::mean(grad_g) - testsupport::mean(mart_g);
    const double se = std::sqrt(testsupport::sample_variance(grad_g) / grad_g.size() +
                                testsupport::sample_variance(mart_g) / mart_g.size());
    CHECK(std::abs(diff) < 3.0 * se + 1e-12);
}

TEST_CASE("drift change leaves the OU estimate invariant") {
    auto spec = testsupport::ou_quadratic(1.0);
    auto grid = TimeGrid::from_horizon(1.0, 1e-2);
    const double x0 = 1.0;
    DriftFn b0 = [](std::span<const double> x, double, std::span<double> o) {
        o[0] = -x[0] + 0.8;  // push away from the mean
    };
    ProblemSpec tilted = spec;
    tilted.drift = b0;

    std::vector<double> plain, changed;
    for (std::uint64_t seed = 60; seed < 66; ++seed) {
        {
            auto basis = make_adaptive_basis(spec, grid, {&x0, 1}, 10, 0.5, seed);
            auto batch = simulate_forward(spec, grid, {&x0, 1}, 3000, seed, true);
            plain.push_back(backward_solve(batch, basis, free_energy_driver(spec), spec,
                                           LsmcConfig{})
                                .gamma_estimate);
        }
        {
            auto basis = make_adaptive_basis(tilted, grid, {&x0, 1}, 10, 0.5, seed);
            auto batch = simulate_forward(tilted, grid, {&x0, 1}, 3000, seed, true);
            changed.push_back(backward_solve(batch, basis, drift_changed_driver(spec, b0), spec,
                                             LsmcConfig{})
                                  .gamma_estimate);
        }
    }
    const double diff = testsupport::mean(plain) - testsupport::mean(changed);
    const double se = std::sqrt(testsupport::sample_variance(plain) / plain.size() +
                                testsupport::sample_variance(changed) / changed.size());
    CHECK(std::abs(diff) < 3.0 * se + 1e-12);
}

TEST_CASE("regression satisfies the normal equations on full-rank steps") {
    // exit-free problem and a static basis covering every sampled state, so
    // each regression uses all rows and the data at step n is exactly
    // reconstructible from the fitted coefficients at step n + 1
    auto spec = testsupport::ou_quadratic(1.0);
    auto grid = TimeGrid::from_horizon(1.0, 1e-2);
    const double x0 = 1.0;
    BasisSet basis;
    basis.dim = 1;
    basis.n_steps = grid.n_steps;
    basis.n_centres = 9;
    basis.width = 1.5;
    basis.poly_order = 1;
    basis.centres.resize(static_cast<std::size_t>(grid.n_steps + 1) * 9);
    for (int n = 0; n <= grid.n_steps; ++n)
        for (int k = 0; k < 9; ++k) basis.centres[static_cast<std::size_t>(n) * 9 + k] = -4.0 + k;
    auto batch = simulate_forward(spec, grid, {&x0, 1}, 400, 3, true);
    auto sol = backward_solve(batch, basis, free_energy_driver(spec), spec, LsmcConfig{});

    for (int n : {grid.n_steps / 4, grid.n_steps / 2, grid.n_steps - 2}) {
        REQUIRE(sol.coeffs.fitted(n));
        REQUIRE(sol.coeffs.fitted(n + 1));
        const int K = basis.size();
        const std::size_t M = batch.n_paths;
        Eigen::MatrixXd A(M, K);
        Eigen::VectorXd b(M);
        std::vector<double> phi(K);
        const double dt = grid.dt;
        for (std::size_t m = 0; m < M; ++m) {
            basis.eval(n, batch.state(m, n), phi);
            for (int k = 0; k < K; ++k) A(m, k) = phi[k];
            const double y1 = eval_value(basis, sol.coeffs, n + 1, batch.state(m, n + 1));
            double zg = 0.0;
            eval_value_grad(basis, sol.coeffs, n + 1, batch.state(m, n + 1), {&zg, 1});
            const double h = -0.5 * zg * zg;
            b[m] = y1 + dt * h / (1.0 + dt * zg * zg);
        }
        Eigen::VectorXd alpha(K);
        auto arow = sol.coeffs.row(n);
        for (int k = 0; k < K; ++k) alpha[k] = arow[k];
        const Eigen::VectorXd resid = A.transpose() * (A * alpha - b);
        CHECK(resid.norm() < 1e-8 * std::max(1.0, b.norm()));
    }
}

TEST_CASE("per-trajectory mode rejects frozen batches") {
    auto spec = make_double_well(1.0, 0.01, 0.5);
    auto grid = TimeGrid::from_horizon(0.5, 1e-2);
    const double x0 = -1.0;
    auto basis = make_adaptive_basis(spec, grid, {&x0, 1}, 4, 0.1, 3);
    auto frozen = simulate_forward(spec, grid, {&x0, 1}, 50, 3, true);
    LsmcConfig cfg;
    cfg.stopping_mode = StoppingMode::PerTrajectory;
    CHECK_THROWS_AS(backward_solve(frozen, basis, free_energy_driver(spec), spec, cfg),
                    std::invalid_argument);
}

TEST_CASE("longer horizons make exit cheaper") {
    // benchmark rows 1 vs 2: gamma(T=5) < gamma(T=1) at matched seeds
    const double x0 = -1.0;
    auto run = [&](double T, int K) {
        auto spec = make_double_well(1.0, 0.01, T);
        auto grid = TimeGrid::from_horizon(T, 1e-3);
        auto basis = make_adaptive_basis(spec, grid, {&x0, 1}, K, 0.1, 9);
        auto batch = simulate_forward(spec, grid, {&x0, 1}, 300, 9, true);
        return backward_solve(batch, basis, free_energy_driver(spec), spec, LsmcConfig{})
            .gamma_estimate;
    };
    CHECK(run(5.0, 8) < run(1.0, 5));
}

TEST_CASE("diagnostics expose rank behaviour") {
    auto spec = make_double_well(1.0, 0.01, 0.5);
    auto grid = TimeGrid::from_horizon(0.5, 1e-2);
    const double x0 = -1.0;
    // raw centres (no respacing) with a large K force near-duplicate columns
    auto basis = make_adaptive_basis(spec, grid, {&x0, 1}, 12, 0.1, 31, 1,
                                     /*respace_duplicates=*/false);
    auto batch = simulate_forward(spec, grid, {&x0, 1}, 200, 31, true);
    LsmcConfig cfg;
    cfg.rank_tolerance = 1e-6;
    auto sol = backward_solve(batch, basis, free_energy_driver(spec), spec, cfg);
    CHECK(sol.max_rank <= basis.size());
    CHECK(sol.recommended_basis_size == sol.max_rank);
    CHECK(sol.step_diagnostics.size() == static_cast<std::size_t>(grid.n_steps));
    for (int n = 1; n < grid.n_steps; ++n) {
        // a couple of paths on excursions outside the support may sit out
        CHECK(sol.step_diagnostics[n].active >= 190);
        CHECK(sol.step_diagnostics[n].active <= 200);
        CHECK(sol.step_diagnostics[n].rank >= 1);
    }
}

TEST_SUITE_END();
