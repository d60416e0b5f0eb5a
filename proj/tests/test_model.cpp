#include <doctest.h>

#include <cmath>
#include <random>

#include "fbsde/model.hpp"

using namespace fbsde;

TEST_SUITE_BEGIN("model");

TEST_CASE("double-well potential shape") {
    CHECK(DoubleWell::potential(-1.0) == 0.0);
    CHECK(DoubleWell::potential(1.0) == 0.0);
    CHECK(DoubleWell::potential(0.0) == 1.0);
    CHECK(DoubleWell::potential(2.0) == 9.0);
}

TEST_CASE("double-well drift is the exact negative potential gradient") {
    // dU/dx formed symbolically: U = (x^2-1)^2, dU/dx = 4x(x^2-1)
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    auto spec = make_double_well(1.0, 0.01);
    for (int i = 0; i < 100; ++i) {
        const double x = u(rng);
        const double du = 4.0 * x * (x * x - 1.0);
        double b = 0.0;
        spec.drift({&x, 1}, 0.0, {&b, 1});
        CHECK(b + du == 0.0);
    }
    // critical point of U
    const double xc = -1.0;
    double b = 0.0;
    spec.drift({&xc, 1}, 0.0, {&b, 1});
    CHECK(b == 0.0);
}

TEST_CASE("regularised exit cost takes exactly two values") {
    auto spec = make_double_well(1.0, 0.01);
    const double inside = -std::log(0.01);
    const double outside = -std::log(1.01);
    for (double x : {-3.0, -1.0, -0.5, -1e-12}) {
        CHECK(spec.terminal_cost({&x, 1}) == doctest::Approx(inside));
    }
    for (double x : {0.0, 1e-12, 0.5, 2.0}) {
        CHECK(spec.terminal_cost({&x, 1}) == doctest::Approx(outside));
    }
    const double x0 = 0.0, x1 = -1.0;
    CHECK(spec.terminal_cost({&x0, 1}) == doctest::Approx(-std::log(1.01)).epsilon(1e-12));
    CHECK(spec.terminal_cost({&x1, 1}) == doctest::Approx(4.6052).epsilon(1e-4));
}

TEST_CASE("double-well construction validates inputs") {
    CHECK_THROWS_AS(make_double_well(0.0, 0.01), std::invalid_argument);
    CHECK_THROWS_AS(make_double_well(-1.0, 0.01), std::invalid_argument);
    CHECK_THROWS_AS(make_double_well(1.0, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(make_double_well(1.0, 1.0), std::invalid_argument);
    auto spec = make_double_well(1.0, 0.01, 5.0);
    CHECK(spec.dim == 1);
    CHECK(spec.noise_dim == 1);
    CHECK(spec.horizon == 5.0);
    double sig = 0.0;
    const double x = -1.0;
    spec.diffusion({&x, 1}, {&sig, 1});
    CHECK(sig == 1.0);
    CHECK(spec.running_cost({&x, 1}, 0.3) == 0.0);
    CHECK(spec.domain_indicator({&x, 1}));
    const double xo = 0.0;
    CHECK_FALSE(spec.domain_indicator({&xo, 1}));
}

TEST_CASE("exit probability from the regularised value") {
    // certain exit saturates the formula
    auto certain = exit_probability_from_value(-std::log(1.01), 0.01);
    CHECK(certain.value == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_FALSE(certain.clamped);

    // no-exit floor
    auto floor = exit_probability_from_value(-std::log(0.01), 0.01);
    CHECK(floor.value == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));

    // benchmark row 1 reference value
    auto row1 = exit_probability_from_value(0.3949, 0.01);
    CHECK(row1.value == doctest::Approx(0.6637).epsilon(2e-4));

    // statistical overshoot beyond the floor is flagged
    auto clamped = exit_probability_from_value(5.0, 0.01);
    CHECK(clamped.value == 0.0);
    CHECK(clamped.clamped);
}

TEST_CASE("exit probability is monotone decreasing in gamma") {
    double prev = 2.0;
    for (double g = -0.5; g < 5.0; g += 0.1) {
        const double p = exit_probability_from_value(g, 0.01).value;
        CHECK(p <= prev + 1e-15);
        prev = p;
    }
}

TEST_SUITE_END();
