#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "josa/sphere_grid.hpp"

namespace josa {

// Multi-channel scalar image on the sphere grid, stored channel-planar and
// row-major within each channel.
class Field {
public:
    Field() = default;
    Field(int channels, int height, int width, double fill = 0.0);
    Field(int channels, const GridSpec &grid, double fill = 0.0);

    int channels() const { return channels_; }
    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t plane_size() const { return static_cast<std::size_t>(height_) * width_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    GridSpec grid() const;

    double &at(int c, int i, int j) { return data_[c * plane_size() + static_cast<std::size_t>(i) * width_ + j]; }
    double at(int c, int i, int j) const { return data_[c * plane_size() + static_cast<std::size_t>(i) * width_ + j]; }

    std::span<double> channel(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
    std::span<const double> channel(int c) const { return {data_.data() + c * plane_size(), plane_size()}; }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    bool same_shape(const Field &other) const {
        return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
    }
    bool on_grid(const GridSpec &grid) const { return height_ == grid.height && width_ == grid.width; }
    bool all_finite() const;

    Field &operator+=(const Field &other);
    Field &operator-=(const Field &other);
    Field &operator*=(double s);
    void fill(double value);

    // Copy of a contiguous channel range [first, first + count).
    Field slice_channels(int first, int count) const;

    bool operator==(const Field &other) const = default;

private:
    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

Field operator+(Field a, const Field &b);
Field operator-(Field a, const Field &b);
Field operator*(Field a, double s);

double max_abs(const Field &f);

// Throws ShapeMismatchError with `what` as context.
void require_same_shape(const Field &a, const Field &b, const char *what);

} // namespace josa
