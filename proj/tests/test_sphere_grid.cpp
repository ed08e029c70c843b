#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"

#include "josa/errors.hpp"
#include "josa/field.hpp"
#include "josa/sphere_grid.hpp"

using namespace josa;
constexpr double pi = std::numbers::pi;

TEST_CASE("4x8 grid samples theta at cell centres") {
    const GridSpec g = make_grid(4, 8);
    CHECK(g.theta(0) == doctest::Approx(pi / 8).epsilon(1e-15));
    CHECK(g.theta(1) == doctest::Approx(3 * pi / 8).epsilon(1e-15));
    CHECK(g.theta(2) == doctest::Approx(5 * pi / 8).epsilon(1e-15));
    CHECK(g.theta(3) == doctest::Approx(7 * pi / 8).epsilon(1e-15));
    CHECK(g.phi(0) == 0.0);
    CHECK(g.phi(4) == doctest::Approx(pi));
}

TEST_CASE("64x128 grid has 8192 cells") {
    CHECK(make_grid(64, 128).cells() == 8192);
}

TEST_CASE("grid preconditions") {
    CHECK_THROWS_AS(make_grid(3, 8), DimensionError);
    CHECK_THROWS_AS(make_grid(4, 6), DimensionError);
    CHECK_THROWS_AS(make_grid(4, 9), DimensionError);
    CHECK_NOTHROW(make_grid(4, 8));
}

TEST_CASE("area weights: closed form, row symmetry, longitude invariance") {
    const AreaWeights w4(make_grid(4, 8));
    for (int j = 0; j < 8; ++j) {
        CHECK(w4.at(0, j) == doctest::Approx(0.38268343236).epsilon(1e-10));
    }
    const GridSpec g = make_grid(32, 64);
    const AreaWeights w(g);
    for (int i = 0; i < g.height; ++i) {
        CHECK(w.row(i) == doctest::Approx(w.row(g.height - 1 - i)).epsilon(1e-14));
        CHECK(w.row(i) > 0.0);
        CHECK(w.row(i) <= 1.0);
        for (int j = 0; j < g.width; ++j) {
            CHECK(w.at(i, j) == w.row(i));
        }
    }
}

TEST_CASE("weighted area approaches 4 pi") {
    auto area_error = [](int h, int w) {
        const GridSpec g = make_grid(h, w);
        return std::abs(AreaWeights(g).total() * g.cell_area() - 4 * pi) / (4 * pi);
    };
    const double e64 = area_error(64, 128);
    CHECK(e64 < 0.01);
    CHECK(area_error(128, 256) < e64);
    CHECK(area_error(16, 32) > e64);
}

TEST_CASE("weighted_norm_sq examples") {
    const GridSpec g = make_grid(4, 8);
    const AreaWeights w(g);
    CHECK(weighted_norm_sq(Field(1, g), w) == 0.0);
    const double expected = 8 * (std::sin(pi / 8) + std::sin(3 * pi / 8) + std::sin(5 * pi / 8) + std::sin(7 * pi / 8));
    CHECK(weighted_norm_sq(Field(1, g, 1.0), w) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("weighted_norm_sq matches a scalar loop and is 2-homogeneous") {
    const GridSpec g = make_grid(16, 32);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    Field f(3, g);
    for (double &x : f.values()) {
        x = n(rng);
    }
    double ref = 0.0;
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < g.height; ++i) {
            for (int j = 0; j < g.width; ++j) {
                ref += std::sin((i + 0.5) * pi / g.height) * f.at(c, i, j) * f.at(c, i, j);
            }
        }
    }
    const AreaWeights w(g);
    const double got = weighted_norm_sq(f, w);
    CHECK(std::abs(got - ref) <= 1e-12 * ref);
    CHECK(weighted_norm_sq(f * 3.0, w) == doctest::Approx(9.0 * got).epsilon(1e-13));
    CHECK(weighted_norm_sq(f * -0.5, w) == doctest::Approx(0.25 * got).epsilon(1e-13));
}

TEST_CASE("weighted_norm_sq rejects a different grid") {
    const AreaWeights w(make_grid(4, 8));
    CHECK_THROWS_AS(weighted_norm_sq(Field(1, make_grid(8, 16)), w), ShapeMismatchError);
}
