#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "fbsde/rng.hpp"

using namespace fbsde;

TEST_SUITE_BEGIN("rng");

TEST_CASE("philox4x32-10 known-answer vectors") {
    // Random123 reference vectors
    auto zero = philox4x32(0, 0, 0);
    CHECK(zero[0] == 0x6627e8d5u);
    CHECK(zero[1] == 0xe169c58du);
    CHECK(zero[2] == 0xbc57ac4cu);
    CHECK(zero[3] == 0x9b00dbd8u);

    auto ones = philox4x32(~0ull, ~0ull, ~0ull);
    CHECK(ones[0] == 0x408f276du);
    CHECK(ones[1] == 0x41c83b0eu);
    CHECK(ones[2] == 0xa20bc7c6u);
    CHECK(ones[3] == 0x6d5451fdu);

    const std::uint64_t ctr = (0x85a308d3ull << 32) | 0x243f6a88ull;
    const std::uint64_t stream = (0x03707344ull << 32) | 0x13198a2eull;
    const std::uint64_t key = (0x299f31d0ull << 32) | 0xa4093822ull;
    auto pi = philox4x32(key, stream, ctr);
    CHECK(pi[0] == 0xd16cfe09u);
    CHECK(pi[1] == 0x94fdccebu);
    CHECK(pi[2] == 0x5001e420u);
    CHECK(pi[3] == 0x24126ea1u);
}

TEST_CASE("normal stream moments") {
    NormalStream rng(42, 0);
    const int n = 200000;
    double s = 0.0, s2 = 0.0, s3 = 0.0, s4 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.next();
        s += x;
        s2 += x * x;
        s3 += x * x * x;
        s4 += x * x * x * x;
    }
    CHECK(std::abs(s / n) < 0.01);
    CHECK(s2 / n == doctest::Approx(1.0).epsilon(0.02));
    CHECK(std::abs(s3 / n) < 0.03);
    CHECK(s4 / n == doctest::Approx(3.0).epsilon(0.05));
}

TEST_CASE("streams are reproducible and distinct") {
    NormalStream a(7, 3), b(7, 3), c(7, 4), d(8, 3);
    bool all_equal_ac = true, all_equal_ad = true;
    for (int i = 0; i < 64; ++i) {
        const double va = a.next();
        CHECK(va == b.next());
        all_equal_ac = all_equal_ac && (va == c.next());
        all_equal_ad = all_equal_ad && (va == d.next());
    }
    CHECK_FALSE(all_equal_ac);
    CHECK_FALSE(all_equal_ad);
}

TEST_CASE("derived seeds separate named substreams") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t seed : {0ull, 1ull, 42ull}) {
        seen.insert(derive_seed(seed, stream_tag::centres));
        seen.insert(derive_seed(seed, stream_tag::vanilla));
        seen.insert(derive_seed(seed, stream_tag::importance));
        seen.insert(seed);
    }
    CHECK(seen.size() == 12);
}

TEST_SUITE_END();
