#include "josa/sphere_grid.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "josa/errors.hpp"
#include "josa/field.hpp"

namespace josa {

GridSpec make_grid(int height, int width) {
    if (height < 4 || width < 8 || width % 2 != 0) {
        throw DimensionError("grid " + std::to_string(height) + "x" + std::to_string(width) +
                             " too small: need height >= 4 and an even width >= 8");
    }
    GridSpec g;
    g.height = height;
    g.width = width;
    g.dtheta = std::numbers::pi / height;
    g.dphi = 2.0 * std::numbers::pi / width;
    return g;
}

AreaWeights::AreaWeights(const GridSpec &grid) : grid_(grid) {
    rows_.resize(static_cast<std::size_t>(grid.height));
    w_.resize(grid.cells());
    for (int i = 0; i < grid.height; ++i) {
        const double s = std::sin(grid.theta(i));
        rows_[static_cast<std::size_t>(i)] = s;
        for (int j = 0; j < grid.width; ++j) {
            w_[static_cast<std::size_t>(i) * grid.width + j] = s;
        }
    }
}

double AreaWeights::total() const {
    double s = 0.0;
    for (double r : rows_) {
        s += r;
    }
    return s * grid_.width;
}

AreaWeights area_weights(const GridSpec &grid) { return AreaWeights(grid); }

double weighted_norm_sq(const Field &image, const AreaWeights &weights) {
    const GridSpec &g = weights.grid();
    if (!image.on_grid(g)) {
        throw ShapeMismatchError("weighted_norm_sq: image is " + std::to_string(image.height()) + "x" +
                                 std::to_string(image.width()) + ", weights are " + std::to_string(g.height) +
                                 "x" + std::to_string(g.width));
    }
    double total = 0.0;
    for (int c = 0; c < image.channels(); ++c) {
        const auto plane = image.channel(c);
        for (int i = 0; i < g.height; ++i) {
            double row_sum = 0.0;
            const double *p = plane.data() + static_cast<std::size_t>(i) * g.width;
            for (int j = 0; j < g.width; ++j) {
                row_sum += p[j] * p[j];
            }
            total += weights.row(i) * row_sum;
        }
    }
    return total;
}

} // namespace josa
