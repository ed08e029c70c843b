#pragma once

#include <cstdint>
#include <random>

#include "josa/deform.hpp"
#include "josa/field.hpp"
#include "josa/sphere_grid.hpp"

namespace josa {

using Rng = std::mt19937_64;

Field white_noise(int channels, const GridSpec &grid, Rng &rng, double stddev = 1.0);

// Separable Gaussian blur of roughly constant physical width: sigma_px rows in
// latitude, sigma_px / sin(theta) columns in longitude. Latitude uses the same
// pole rule as warp; with `displacement` set, channel 0 is a row component and
// changes sign across the pole.
Field gaussian_smooth(const Field &field, double sigma_px, bool displacement = false);

// Area-weighted standard deviation pooled over channels, each channel centred
// on its own weighted mean.
double weighted_std(const Field &field, const AreaWeights &weights);

// White noise smoothed by a Gaussian of width smoothing_px and rescaled to
// the given area-weighted std (in pixels). target_std == 0 gives zeros.
VelocityField smooth_random_velocity(const GridSpec &grid, double smoothing_px, double target_std,
                                     const AreaWeights &weights, Rng &rng);

// Stable sub-seed derivation so that streams do not depend on call order.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

} // namespace josa
