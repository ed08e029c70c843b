#include "josa/random_field.hpp"

#include <cmath>
#include <vector>

#include "bilinear.hpp"

namespace josa {

Field white_noise(int channels, const GridSpec &grid, Rng &rng, double stddev) {
    Field f(channels, grid);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double &x : f.values()) {
        x = stddev * normal(rng);
    }
    return f;
}

Field gaussian_smooth(const Field &field, double sigma_px, bool displacement) {
    if (sigma_px <= 0.0) {
        return field;
    }
    const int H = field.height();
    const int W = field.width();
    const GridSpec grid = make_grid(H, W);

    // Longitude pass: a kernel of sigma_px / sin(theta) columns keeps the
    // physical width constant, so rows near a pole are nearly flat and the
    // result is continuous across the pole.
    std::vector<std::vector<double>> row_kernels(static_cast<std::size_t>(H));
    for (int i = 0; i < H; ++i) {
        const double s = sigma_px / std::sin(grid.theta(i));
        const int radius = std::min(static_cast<int>(std::ceil(3.0 * s)), W / 2);
        auto &k = row_kernels[static_cast<std::size_t>(i)];
        k.resize(static_cast<std::size_t>(2 * radius + 1));
        double ksum = 0.0;
        for (int d = -radius; d <= radius; ++d) {
            // Offsets +-W/2 address the same column; count it once.
            const double w = (2 * radius == W && d == radius) ? 0.0 : std::exp(-0.5 * d * d / (s * s));
            k[static_cast<std::size_t>(d + radius)] = w;
            ksum += w;
        }
        for (double &w : k) {
            w /= ksum;
        }
    }

    const int radius = static_cast<int>(std::ceil(3.0 * sigma_px));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int d = -radius; d <= radius; ++d) {
        const double w = std::exp(-0.5 * d * d / (sigma_px * sigma_px));
        kernel[static_cast<std::size_t>(d + radius)] = w;
        ksum += w;
    }
    for (double &w : kernel) {
        w /= ksum;
    }

    Field tmp(field.channels(), H, W);
    Field out(field.channels(), H, W);
    for (int c = 0; c < field.channels(); ++c) {
        const double *src = field.channel(c).data();
        double *mid = tmp.channel(c).data();
        double *dst = out.channel(c).data();
        for (int i = 0; i < H; ++i) {
            const auto &k = row_kernels[static_cast<std::size_t>(i)];
            const int r = static_cast<int>(k.size() / 2);
            const double *row = src + static_cast<std::size_t>(i) * W;
            for (int j = 0; j < W; ++j) {
                double acc = 0.0;
                for (int d = -r; d <= r; ++d) {
                    const int col = ((j + d) % W + W) % W;
                    acc += k[static_cast<std::size_t>(d + r)] * row[col];
                }
                mid[static_cast<std::size_t>(i) * W + j] = acc;
            }
        }
        const bool odd = displacement && c == 0;
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                double acc = 0.0;
                for (int d = -radius; d <= radius; ++d) {
                    bool crossed = false;
                    const std::size_t q = detail::resolve_index(H, W, i + d, j, &crossed);
                    const double sign = odd && crossed ? -1.0 : 1.0;
                    acc += sign * kernel[static_cast<std::size_t>(d + radius)] * mid[q];
                }
                dst[static_cast<std::size_t>(i) * W + j] = acc;
            }
        }
    }
    return out;
}

double weighted_std(const Field &field, const AreaWeights &weights) {
    const GridSpec &g = weights.grid();
    const double wsum = weights.total();
    double ss = 0.0;
    for (int c = 0; c < field.channels(); ++c) {
        const auto plane = field.channel(c);
        double mean = 0.0;
        for (std::size_t p = 0; p < plane.size(); ++p) {
            mean += weights.values()[p] * plane[p];
        }
        mean /= wsum;
        for (int i = 0; i < g.height; ++i) {
            double row = 0.0;
            for (int j = 0; j < g.width; ++j) {
                const double d = plane[static_cast<std::size_t>(i) * g.width + j] - mean;
                row += d * d;
            }
            ss += weights.row(i) * row;
        }
    }
    return std::sqrt(ss / (wsum * field.channels()));
}

VelocityField smooth_random_velocity(const GridSpec &grid, double smoothing_px, double target_std,
                                     const AreaWeights &weights, Rng &rng) {
    Field noise = white_noise(2, grid, rng);
    if (target_std <= 0.0) {
        return VelocityField::zeros(grid);
    }
    Field smooth = gaussian_smooth(noise, smoothing_px, true);
    const double s = weighted_std(smooth, weights);
    if (s > 0.0) {
        smooth *= target_std / s;
    }
    return VelocityField(std::move(smooth));
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
    // splitmix64 over (master, stream)
    std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace josa
