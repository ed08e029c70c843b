#include "josa/field.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "josa/errors.hpp"

namespace josa {

Field::Field(int channels, int height, int width, double fill)
    : channels_(channels), height_(height), width_(width),
      data_(static_cast<std::size_t>(channels) * height * width, fill) {
    if (channels < 0 || height < 0 || width < 0) {
        throw DimensionError("negative field dimension");
    }
}

Field::Field(int channels, const GridSpec &grid, double fill) : Field(channels, grid.height, grid.width, fill) {}

GridSpec Field::grid() const { return make_grid(height_, width_); }

bool Field::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Field &Field::operator+=(const Field &other) {
    require_same_shape(*this, other, "field +=");
    for (std::size_t k = 0; k < data_.size(); ++k) {
        data_[k] += other.data_[k];
    }
    return *this;
}

Field &Field::operator-=(const Field &other) {
    require_same_shape(*this, other, "field -=");
    for (std::size_t k = 0; k < data_.size(); ++k) {
        data_[k] -= other.data_[k];
    }
    return *this;
}

Field &Field::operator*=(double s) {
    for (double &x : data_) {
        x *= s;
    }
    return *this;
}

void Field::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Field Field::slice_channels(int first, int count) const {
    if (first < 0 || count < 0 || first + count > channels_) {
        throw DimensionError("channel slice out of range");
    }
    Field out(count, height_, width_);
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(first * plane_size()), count * plane_size(),
                out.data_.begin());
    return out;
}

Field operator+(Field a, const Field &b) { return a += b; }
Field operator-(Field a, const Field &b) { return a -= b; }
Field operator*(Field a, double s) { return a *= s; }

double max_abs(const Field &f) {
    double m = 0.0;
    for (double x : f.values()) {
        m = std::max(m, std::abs(x));
    }
    return m;
}

void require_same_shape(const Field &a, const Field &b, const char *what) {
    if (!a.same_shape(b)) {
        throw ShapeMismatchError(std::string(what) + ": shape " + std::to_string(a.channels()) + "x" +
                                 std::to_string(a.height()) + "x" + std::to_string(a.width()) + " vs " +
                                 std::to_string(b.channels()) + "x" + std::to_string(b.height()) + "x" +
                                 std::to_string(b.width()));
    }
}

} // namespace josa
