#include "josa/deform.hpp"

#include <cmath>
#include <string>

#include "bilinear.hpp"
#include "josa/errors.hpp"

namespace josa {

using detail::Taps;

namespace {

void require_displacement(const Field &f, const char *what) {
    if (f.channels() != 2) {
        throw ShapeMismatchError(std::string(what) + ": displacement fields need 2 channels, got " +
                                 std::to_string(f.channels()));
    }
}

void require_same_grid(const Field &a, const Field &b, const char *what) {
    if (a.height() != b.height() || a.width() != b.width()) {
        throw ShapeMismatchError(std::string(what) + ": grids differ (" + std::to_string(a.height()) + "x" +
                                 std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                                 std::to_string(b.width()) + ")");
    }
}

} // namespace

VelocityField::VelocityField(Field field) : v(std::move(field)) { require_displacement(v, "VelocityField"); }

VelocityField VelocityField::zeros(const GridSpec &grid) { return VelocityField(Field(2, grid)); }

DeformationField::DeformationField(Field field) : u(std::move(field)) {
    require_displacement(u, "DeformationField");
}

DeformationField DeformationField::identity(const GridSpec &grid) { return DeformationField(Field(2, grid)); }

VelocityField negate(const VelocityField &v) { return VelocityField(v.v * -1.0); }

double sample_bilinear(const Field &image, int channel, double row, double col) {
    Taps t;
    detail::make_taps(image.height(), image.width(), row, col, t);
    return detail::apply(t, image.channel(channel).data());
}

double sample_displacement(const Field &disp, int component, double row, double col) {
    Taps t;
    detail::make_taps(disp.height(), disp.width(), row, col, t);
    const double *plane = disp.channel(component).data();
    return component == 0 ? detail::apply_signed(t, plane) : detail::apply(t, plane);
}

Field warp(const Field &image, const DeformationField &phi) {
    require_same_grid(image, phi.u, "warp");
    const int H = image.height();
    const int W = image.width();
    const int C = image.channels();
    Field out(C, H, W);
    const double *ur = phi.u.channel(0).data();
    const double *uc = phi.u.channel(1).data();
    Taps t;
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            const std::size_t p = static_cast<std::size_t>(i) * W + j;
            detail::make_taps(H, W, i + ur[p], j + uc[p], t);
            for (int c = 0; c < C; ++c) {
                out.channel(c)[p] = detail::apply(t, image.channel(c).data());
            }
        }
    }
    return out;
}

void warp_backward(const Field &image, const DeformationField &phi, const Field &grad_out, Field *grad_image,
                   Field *grad_disp) {
    require_same_grid(image, phi.u, "warp_backward");
    require_same_shape(image, grad_out, "warp_backward");
    const int H = image.height();
    const int W = image.width();
    const int C = image.channels();
    const double *ur = phi.u.channel(0).data();
    const double *uc = phi.u.channel(1).data();
    double *gr = grad_disp ? grad_disp->channel(0).data() : nullptr;
    double *gc = grad_disp ? grad_disp->channel(1).data() : nullptr;
    Taps t;
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            const std::size_t p = static_cast<std::size_t>(i) * W + j;
            detail::make_taps(H, W, i + ur[p], j + uc[p], t);
            double acc_r = 0.0;
            double acc_c = 0.0;
            for (int c = 0; c < C; ++c) {
                const double g = grad_out.channel(c)[p];
                if (g == 0.0) {
                    continue;
                }
                const double *plane = image.channel(c).data();
                if (grad_image) {
                    detail::scatter(t, g, grad_image->channel(c).data());
                }
                acc_r += g * detail::apply_dr(t, plane);
                acc_c += g * detail::apply_dc(t, plane);
            }
            if (grad_disp) {
                gr[p] += acc_r;
                gc[p] += acc_c;
            }
        }
    }
}

DeformationField compose(const DeformationField &outer, const DeformationField &inner) {
    require_same_grid(outer.u, inner.u, "compose");
    const int H = inner.u.height();
    const int W = inner.u.width();
    Field out(2, H, W);
    const double *ir = inner.u.channel(0).data();
    const double *ic = inner.u.channel(1).data();
    const double *orow = outer.u.channel(0).data();
    const double *ocol = outer.u.channel(1).data();
    double *pr = out.channel(0).data();
    double *pc = out.channel(1).data();
    Taps t;
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            const std::size_t p = static_cast<std::size_t>(i) * W + j;
            detail::make_taps(H, W, i + ir[p], j + ic[p], t);
            pr[p] = ir[p] + detail::apply_signed(t, orow);
            pc[p] = ic[p] + detail::apply(t, ocol);
        }
    }
    return DeformationField(std::move(out));
}

void compose_backward(const DeformationField &outer, const DeformationField &inner, const Field &grad_out,
                      Field *grad_outer, Field *grad_inner) {
    require_same_grid(outer.u, inner.u, "compose_backward");
    const int H = inner.u.height();
    const int W = inner.u.width();
    const double *ir = inner.u.channel(0).data();
    const double *ic = inner.u.channel(1).data();
    const double *orow = outer.u.channel(0).data();
    const double *ocol = outer.u.channel(1).data();
    const double *gpr = grad_out.channel(0).data();
    const double *gpc = grad_out.channel(1).data();
    Taps t;
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            const std::size_t p = static_cast<std::size_t>(i) * W + j;
            const double g_r = gpr[p];
            const double g_c = gpc[p];
            if (g_r == 0.0 && g_c == 0.0) {
                continue;
            }
            detail::make_taps(H, W, i + ir[p], j + ic[p], t);
            if (grad_outer) {
                detail::scatter_signed(t, g_r, grad_outer->channel(0).data());
                detail::scatter(t, g_c, grad_outer->channel(1).data());
            }
            if (grad_inner) {
                grad_inner->channel(0)[p] +=
                    g_r + g_r * detail::apply_dr_signed(t, orow) + g_c * detail::apply_dr(t, ocol);
                grad_inner->channel(1)[p] +=
                    g_c + g_r * detail::apply_dc_signed(t, orow) + g_c * detail::apply_dc(t, ocol);
            }
        }
    }
}

DeformationField integrate(const VelocityField &v, int steps, IntegrationTape &tape) {
    if (steps < 1) {
        throw DimensionError("integrate: steps must be >= 1, got " + std::to_string(steps));
    }
    if (!v.v.all_finite()) {
        throw NonFiniteError("integrate: velocity field contains non-finite values");
    }
    tape.steps = steps;
    tape.stages.clear();
    tape.stages.reserve(static_cast<std::size_t>(steps));
    DeformationField u(v.v * std::ldexp(1.0, -steps));
    for (int k = 0; k < steps; ++k) {
        tape.stages.push_back(u.u);
        u = compose(u, u);
    }
    if (!u.u.all_finite()) {
        throw NonFiniteError("integrate: displacement became non-finite");
    }
    return u;
}

DeformationField integrate(const VelocityField &v, int steps) {
    IntegrationTape tape;
    return integrate(v, steps, tape);
}

Field integrate_backward(const IntegrationTape &tape, const Field &grad_u) {
    Field g = grad_u;
    for (int k = tape.steps - 1; k >= 0; --k) {
        const DeformationField stage(tape.stages[static_cast<std::size_t>(k)]);
        Field prev(2, g.height(), g.width());
        compose_backward(stage, stage, g, &prev, &prev);
        g = std::move(prev);
    }
    g *= std::ldexp(1.0, -tape.steps);
    return g;
}

DeformationField invert(const VelocityField &v, int steps) { return integrate(negate(v), steps); }

namespace {

// d/drow at row i: central inside, one-sided at the first/last row.
struct RowStencil {
    int lo, hi;
    double scale;
};

RowStencil row_stencil(int i, int H) {
    if (i == 0) {
        return {0, 1, 1.0};
    }
    if (i == H - 1) {
        return {H - 2, H - 1, 1.0};
    }
    return {i - 1, i + 1, 0.5};
}

} // namespace

Field spatial_gradient(const Field &field) {
    const int H = field.height();
    const int W = field.width();
    Field out(2 * field.channels(), H, W);
    for (int c = 0; c < field.channels(); ++c) {
        const double *f = field.channel(c).data();
        double *dr = out.channel(2 * c).data();
        double *dc = out.channel(2 * c + 1).data();
        for (int i = 0; i < H; ++i) {
            const RowStencil s = row_stencil(i, H);
            for (int j = 0; j < W; ++j) {
                const std::size_t p = static_cast<std::size_t>(i) * W + j;
                const int jm = j == 0 ? W - 1 : j - 1;
                const int jp = j == W - 1 ? 0 : j + 1;
                dr[p] = s.scale * (f[static_cast<std::size_t>(s.hi) * W + j] - f[static_cast<std::size_t>(s.lo) * W + j]);
                dc[p] = 0.5 * (f[static_cast<std::size_t>(i) * W + jp] - f[static_cast<std::size_t>(i) * W + jm]);
            }
        }
    }
    return out;
}

void spatial_gradient_backward(const Field &grad_gradient, Field &grad_field) {
    const int H = grad_field.height();
    const int W = grad_field.width();
    for (int c = 0; c < grad_field.channels(); ++c) {
        double *g = grad_field.channel(c).data();
        const double *gr = grad_gradient.channel(2 * c).data();
        const double *gc = grad_gradient.channel(2 * c + 1).data();
        for (int i = 0; i < H; ++i) {
            const RowStencil s = row_stencil(i, H);
            for (int j = 0; j < W; ++j) {
                const std::size_t p = static_cast<std::size_t>(i) * W + j;
                const int jm = j == 0 ? W - 1 : j - 1;
                const int jp = j == W - 1 ? 0 : j + 1;
                g[static_cast<std::size_t>(s.hi) * W + j] += s.scale * gr[p];
                g[static_cast<std::size_t>(s.lo) * W + j] -= s.scale * gr[p];
                g[static_cast<std::size_t>(i) * W + jp] += 0.5 * gc[p];
                g[static_cast<std::size_t>(i) * W + jm] -= 0.5 * gc[p];
            }
        }
    }
}

Field jacobian_determinant(const DeformationField &phi) {
    const Field grad = spatial_gradient(phi.u);
    const int H = phi.u.height();
    const int W = phi.u.width();
    Field det(1, H, W);
    for (std::size_t p = 0; p < det.plane_size(); ++p) {
        const double a = 1.0 + grad.channel(0)[p]; // d u_row / d row
        const double b = grad.channel(1)[p];       // d u_row / d col
        const double c = grad.channel(2)[p];       // d u_col / d row
        const double d = 1.0 + grad.channel(3)[p]; // d u_col / d col
        det.channel(0)[p] = a * d - b * c;
    }
    return det;
}

double jacobian_negative_fraction(const DeformationField &phi) {
    const Field det = jacobian_determinant(phi);
    std::size_t negative = 0;
    for (double x : det.values()) {
        if (x <= 0.0) {
            ++negative;
        }
    }
    return static_cast<double>(negative) / static_cast<double>(det.size());
}

} // namespace josa
