#pragma once

#include <cstddef>
#include <vector>

namespace josa {

class Field;

// Equirectangular parameterization of the unit sphere. Rows sample the
// polar angle at cell centres, columns sample longitude periodically.
struct GridSpec {
    int height = 0;
    int width = 0;
    double dtheta = 0.0; // radians per row
    double dphi = 0.0;   // radians per column

    double theta(int row) const { return (row + 0.5) * dtheta; }
    double phi(int col) const { return col * dphi; }
    std::size_t cells() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
    double cell_area() const { return dtheta * dphi; }

    bool operator==(const GridSpec &other) const { return height == other.height && width == other.width; }
};

// Throws DimensionError unless height >= 4, width >= 8 and width is even.
GridSpec make_grid(int height, int width);

// sin(theta) per pixel, constant along rows.
class AreaWeights {
public:
    explicit AreaWeights(const GridSpec &grid);

    const GridSpec &grid() const { return grid_; }
    double row(int i) const { return rows_[static_cast<std::size_t>(i)]; }
    double at(int i, int j) const { return w_[static_cast<std::size_t>(i) * grid_.width + j]; }
    const std::vector<double> &values() const { return w_; }
    double total() const;

private:
    GridSpec grid_;
    std::vector<double> rows_;
    std::vector<double> w_;
};

AreaWeights area_weights(const GridSpec &grid);

// sum_c sum_ij w(i,j) * image(c,i,j)^2
double weighted_norm_sq(const Field &image, const AreaWeights &weights);

} // namespace josa
