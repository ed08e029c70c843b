#pragma once

#include <vector>

#include "josa/field.hpp"
#include "josa/sphere_grid.hpp"

namespace josa {

inline constexpr int kDefaultSteps = 7;

// Displacement components are in grid units: channel 0 is the row (latitude)
// component, channel 1 the column (longitude) component.
struct VelocityField {
    Field v;

    VelocityField() = default;
    explicit VelocityField(Field field);
    static VelocityField zeros(const GridSpec &grid);
    GridSpec grid() const { return v.grid(); }
};

// phi = Id + u
struct DeformationField {
    Field u;

    DeformationField() = default;
    explicit DeformationField(Field field);
    static DeformationField identity(const GridSpec &grid);
    GridSpec grid() const { return u.grid(); }
};

VelocityField negate(const VelocityField &v);

// Bilinear sample of one channel at fractional grid coordinates. Longitude
// wraps; crossing a pole reflects the row and shifts longitude by width/2.
double sample_bilinear(const Field &image, int channel, double row, double col);

// As sample_bilinear for a displacement component: the row component changes
// sign when the sample reaches across a pole.
double sample_displacement(const Field &disp, int component, double row, double col);

// output(p) = image(p + u(p)); channels are treated as scalars.
Field warp(const Field &image, const DeformationField &phi);

// psi(p) = outer(inner(p)), u_psi(p) = u_inner(p) + u_outer(p + u_inner(p))
DeformationField compose(const DeformationField &outer, const DeformationField &inner);

// exp(v) by scaling and squaring. Throws NonFiniteError on non-finite input.
DeformationField integrate(const VelocityField &v, int steps = kDefaultSteps);

// exp(-v)
DeformationField invert(const VelocityField &v, int steps = kDefaultSteps);

// Per-component first partials by central differences (longitude periodic,
// one-sided at the first and last rows). Output channel 2k is d/drow of
// input channel k, channel 2k+1 is d/dcol.
Field spatial_gradient(const Field &field);

// det(d phi / dp) per pixel, single channel.
Field jacobian_determinant(const DeformationField &phi);

// Fraction of pixels whose Jacobian determinant is <= 0.
double jacobian_negative_fraction(const DeformationField &phi);

// Adjoints. Each *_backward accumulates into the non-null outputs, which must
// already have the right shape.

struct IntegrationTape {
    int steps = 0;
    std::vector<Field> stages; // u_0 .. u_{steps-1}
};

DeformationField integrate(const VelocityField &v, int steps, IntegrationTape &tape);

// Gradient with respect to v, given the gradient with respect to exp(v).
Field integrate_backward(const IntegrationTape &tape, const Field &grad_u);

void warp_backward(const Field &image, const DeformationField &phi, const Field &grad_out, Field *grad_image,
                   Field *grad_disp);

void compose_backward(const DeformationField &outer, const DeformationField &inner, const Field &grad_out,
                      Field *grad_outer, Field *grad_inner);

// Transpose of spatial_gradient applied to grad_gradient, accumulated.
void spatial_gradient_backward(const Field &grad_gradient, Field &grad_field);

} // namespace josa
