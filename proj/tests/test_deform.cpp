#include <cmath>

#include "doctest.h"

#include "josa/deform.hpp"
#include "josa/errors.hpp"
#include "josa/random_field.hpp"

using namespace josa;

namespace {

Field smooth_image(const GridSpec &g) {
    Field f(1, g);
    for (int i = 0; i < g.height; ++i) {
        for (int j = 0; j < g.width; ++j) {
            f.at(0, i, j) = std::sin(2.0 * g.phi(j)) * std::sin(g.theta(i)) + 0.5 * std::cos(2.0 * g.theta(i));
        }
    }
    return f;
}

DeformationField constant_shift(const GridSpec &g, double drow, double dcol) {
    DeformationField d = DeformationField::identity(g);
    d.u.channel(0)[0] = 0.0;
    for (std::size_t p = 0; p < g.cells(); ++p) {
        d.u.channel(0)[p] = drow;
        d.u.channel(1)[p] = dcol;
    }
    return d;
}

VelocityField smooth_velocity(const GridSpec &g, double max_abs_px, std::uint64_t seed) {
    Rng rng(seed);
    const AreaWeights w(g);
    VelocityField v = smooth_random_velocity(g, 8.0, 1.0, w, rng);
    v.v *= max_abs_px / max_abs(v.v);
    return v;
}

// Independent reference for the gradient stencil, written index by index.
double reference_partial(const Field &f, int c, int i, int j, bool along_row) {
    const int H = f.height();
    const int W = f.width();
    if (along_row) {
        if (i == 0) {
            return f.at(c, 1, j) - f.at(c, 0, j);
        }
        if (i == H - 1) {
            return f.at(c, H - 1, j) - f.at(c, H - 2, j);
        }
        return (f.at(c, i + 1, j) - f.at(c, i - 1, j)) / 2.0;
    }
    return (f.at(c, i, (j + 1) % W) - f.at(c, i, (j - 1 + W) % W)) / 2.0;
}

} // namespace

TEST_CASE("warp with identity returns the input exactly") {
    const GridSpec g = make_grid(16, 32);
    const Field img = smooth_image(g);
    CHECK(warp(img, DeformationField::identity(g)) == img);
}

TEST_CASE("integer longitude shift is a circular shift") {
    const GridSpec g = make_grid(8, 16);
    Rng rng(3);
    const Field img = white_noise(2, g, rng);
    const Field out = warp(img, constant_shift(g, 0.0, 3.0));
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < g.height; ++i) {
            for (int j = 0; j < g.width; ++j) {
                CHECK(out.at(c, i, j) == img.at(c, i, (j + 3) % g.width));
            }
        }
    }
}

TEST_CASE("bilinear sample at the centre of a 2x2 patch") {
    Field f(1, 4, 8);
    f.at(0, 1, 1) = 0.0;
    f.at(0, 1, 2) = 1.0;
    f.at(0, 2, 1) = 2.0;
    f.at(0, 2, 2) = 3.0;
    CHECK(sample_bilinear(f, 0, 1.5, 1.5) == doctest::Approx(1.5).epsilon(1e-15));
}

TEST_CASE("pole crossing reflects the row and shifts longitude by half a turn") {
    const GridSpec g = make_grid(4, 8);
    Field f(1, g);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 8; ++j) {
            f.at(0, i, j) = 10.0 * i + j;
        }
    }
    CHECK(sample_bilinear(f, 0, -1.0, 1.0) == f.at(0, 0, 5));
    CHECK(sample_bilinear(f, 0, 4.0, 6.0) == f.at(0, 3, 2));
    CHECK(sample_bilinear(f, 0, -0.5, 2.0) == doctest::Approx(0.5 * (f.at(0, 0, 6) + f.at(0, 0, 2))));
}

TEST_CASE("integrate: zero velocity gives identity") {
    const GridSpec g = make_grid(8, 16);
    CHECK(max_abs(integrate(VelocityField::zeros(g)).u) == 0.0);
    CHECK(max_abs(invert(VelocityField::zeros(g)).u) == 0.0);
}

TEST_CASE("integrate: constant longitude velocity flows to the same constant") {
    const GridSpec g = make_grid(8, 16);
    const double c = 0.3;
    const DeformationField phi = integrate(VelocityField(constant_shift(g, 0.0, c).u));
    for (std::size_t p = 0; p < g.cells(); ++p) {
        CHECK(phi.u.channel(1)[p] == doctest::Approx(c).epsilon(1e-12));
        CHECK(std::abs(phi.u.channel(0)[p]) < 1e-12);
    }
    const DeformationField inv = invert(VelocityField(constant_shift(g, 0.0, c).u));
    CHECK(inv.u.channel(1)[5] == doctest::Approx(-c).epsilon(1e-12));
}

TEST_CASE("integrate rejects non-finite input and bad step counts") {
    const GridSpec g = make_grid(4, 8);
    VelocityField v = VelocityField::zeros(g);
    v.v.at(0, 1, 1) = std::nan("");
    CHECK_THROWS_AS(integrate(v), NonFiniteError);
    CHECK_THROWS_AS(integrate(VelocityField::zeros(g), 0), DimensionError);
}

TEST_CASE("inverse consistency of smooth 2 px fields at 64x128") {
    const GridSpec g = make_grid(64, 128);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const VelocityField v = smooth_velocity(g, 2.0, seed);
        const DeformationField round = compose(integrate(v), invert(v));
        CHECK(max_abs(round.u) < 0.1);
        const DeformationField other = compose(invert(v), integrate(v));
        CHECK(max_abs(other.u) < 0.1);
    }
}

TEST_CASE("scaling and squaring converges in the number of steps") {
    const GridSpec g = make_grid(64, 128);
    const VelocityField v = smooth_velocity(g, 2.0, 11);
    CHECK(max_abs(integrate(v, 7).u - integrate(v, 9).u) < 1e-3);
}

TEST_CASE("double inverse returns the forward field") {
    const GridSpec g = make_grid(64, 128);
    const VelocityField v = smooth_velocity(g, 2.0, 5);
    const DeformationField twice = invert(negate(v));
    CHECK(max_abs(twice.u - integrate(v).u) < 0.05);
}

TEST_CASE("compose identity laws and constant shifts") {
    const GridSpec g = make_grid(16, 32);
    const DeformationField phi = integrate(smooth_velocity(g, 1.5, 9));
    const DeformationField id = DeformationField::identity(g);
    CHECK(compose(id, phi).u == phi.u);
    CHECK(max_abs(compose(phi, id).u - phi.u) < 1e-12);

    const DeformationField ab = compose(constant_shift(g, 0.0, 1.25), constant_shift(g, 0.0, 2.5));
    CHECK(max_abs(ab.u - constant_shift(g, 0.0, 3.75).u) < 1e-12);
}

TEST_CASE("warping with a composition matches sequential warping") {
    const GridSpec g = make_grid(64, 128);
    const Field img = gaussian_smooth(smooth_image(g), 1.0);
    const DeformationField a = integrate(smooth_velocity(g, 1.5, 21));
    const DeformationField b = integrate(smooth_velocity(g, 1.5, 22));
    const Field direct = warp(img, compose(a, b));
    const Field sequential = warp(warp(img, a), b);
    CHECK(max_abs(direct - sequential) < 1e-2);
}

TEST_CASE("spatial gradient: constants, ramps and a loop reference") {
    const GridSpec g = make_grid(8, 16);
    Field constant(2, g, 3.5);
    CHECK(max_abs(spatial_gradient(constant)) == 0.0);

    Field ramp(1, g);
    const double slope = 0.7;
    for (int i = 0; i < g.height; ++i) {
        for (int j = 0; j < g.width; ++j) {
            ramp.at(0, i, j) = slope * j;
        }
    }
    const Field gr = spatial_gradient(ramp);
    for (int i = 0; i < g.height; ++i) {
        for (int j = 1; j < g.width - 1; ++j) {
            CHECK(gr.at(1, i, j) == doctest::Approx(slope));
            CHECK(gr.at(0, i, j) == 0.0);
        }
    }

    Rng rng(4);
    const Field f = white_noise(2, g, rng);
    const Field d = spatial_gradient(f);
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < g.height; ++i) {
            for (int j = 0; j < g.width; ++j) {
                CHECK(d.at(2 * c, i, j) == reference_partial(f, c, i, j, true));
                CHECK(d.at(2 * c + 1, i, j) == reference_partial(f, c, i, j, false));
            }
        }
    }
}

TEST_CASE("spatial_gradient_backward is the transpose of spatial_gradient") {
    const GridSpec g = make_grid(8, 16);
    Rng rng(8);
    const Field x = white_noise(2, g, rng);
    const Field y = white_noise(4, g, rng);
    const Field dx = spatial_gradient(x);
    Field dty(2, g);
    spatial_gradient_backward(y, dty);
    double lhs = 0.0;
    double rhs = 0.0;
    for (std::size_t k = 0; k < dx.size(); ++k) {
        lhs += dx.values()[k] * y.values()[k];
    }
    for (std::size_t k = 0; k < x.size(); ++k) {
        rhs += x.values()[k] * dty.values()[k];
    }
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("jacobian diagnostics") {
    const GridSpec g = make_grid(16, 32);
    CHECK(jacobian_negative_fraction(DeformationField::identity(g)) == 0.0);

    // Columns 10 and 12 trade places: the map reverses orientation at 11.
    DeformationField fold = DeformationField::identity(g);
    for (int i = 0; i < g.height; ++i) {
        fold.u.at(1, i, 10) = 2.0;
        fold.u.at(1, i, 12) = -2.0;
    }
    CHECK(jacobian_negative_fraction(fold) > 0.0);

    // Invariant under longitude rotation.
    const DeformationField phi = integrate(smooth_velocity(g, 3.0, 13) );
    DeformationField rolled = DeformationField::identity(g);
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < g.height; ++i) {
            for (int j = 0; j < g.width; ++j) {
                rolled.u.at(c, i, j) = fold.u.at(c, i, (j + 7) % g.width);
            }
        }
    }
    CHECK(jacobian_negative_fraction(rolled) == jacobian_negative_fraction(fold));
    CHECK(jacobian_negative_fraction(phi) <= 0.01);
}

TEST_CASE("shape mismatches are rejected") {
    const Field img(1, 8, 16);
    CHECK_THROWS_AS(warp(img, DeformationField::identity(make_grid(4, 8))), ShapeMismatchError);
    CHECK_THROWS_AS(compose(DeformationField::identity(make_grid(8, 16)), DeformationField::identity(make_grid(4, 8))),
                    ShapeMismatchError);
    CHECK_THROWS_AS(VelocityField(Field(3, 4, 8)), ShapeMismatchError);
}

TEST_CASE("warp and compose adjoints satisfy the dot-product test") {
    const GridSpec g = make_grid(8, 16);
    Rng rng(17);
    const Field img = white_noise(2, g, rng);
    const DeformationField phi = integrate(smooth_velocity(g, 1.3, 2));
    const Field y = white_noise(2, g, rng);

    // Linear in the image: <warp(x), y> == <x, warp^T y>.
    Field gimg(2, g);
    warp_backward(img, phi, y, &gimg, nullptr);
    const Field wx = warp(img, phi);
    double lhs = 0.0;
    double rhs = 0.0;
    for (std::size_t k = 0; k < wx.size(); ++k) {
        lhs += wx.values()[k] * y.values()[k];
        rhs += img.values()[k] * gimg.values()[k];
    }
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}
