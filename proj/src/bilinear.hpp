#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>

namespace josa::detail {

// Optional fingerprint of every bilinear cell visited on this thread. The
// finite-difference oracle uses it to tell whether a perturbation stayed on
// one smooth piece of the piecewise-bilinear loss.
struct CellTrace {
    bool enabled = false;
    std::uint64_t hash = 0;
};

inline thread_local CellTrace cell_trace;

// Four bilinear taps with their weights and the weights' derivatives with
// respect to the sample row and column. sign[k] is -1 when tap k was reached
// across a pole: the row component of a displacement changes sign there.
struct Taps {
    std::size_t idx[4];
    double w[4];
    double dw_dr[4];
    double dw_dc[4];
    double sign[4];
};

inline std::size_t resolve_index(int height, int width, int row, int col, bool *crossed = nullptr) {
    bool flipped = false;
    while (row < 0 || row >= height) {
        row = row < 0 ? -1 - row : 2 * height - 1 - row;
        flipped = !flipped;
    }
    if (flipped) {
        col += width / 2;
    }
    col %= width;
    if (col < 0) {
        col += width;
    }
    if (crossed) {
        *crossed = flipped;
    }
    return static_cast<std::size_t>(row) * width + col;
}

inline void make_taps(int height, int width, double r, double c, Taps &t) {
    // Keep pathological coordinates inside int range; a sane fit never gets here.
    r = std::clamp(r, -2.0 * height, 3.0 * height);
    c = std::clamp(c, -64.0 * width, 64.0 * width);
    const double rf = std::floor(r);
    const double cf = std::floor(c);
    const int r0 = static_cast<int>(rf);
    const int c0 = static_cast<int>(cf);
    const double fr = r - rf;
    const double fc = c - cf;
    if (cell_trace.enabled) {
        const std::uint64_t key = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(r0)) << 32) ^
                                  static_cast<std::uint32_t>(c0);
        cell_trace.hash = (cell_trace.hash ^ key) * 0x100000001B3ULL + 0x9E3779B97F4A7C15ULL;
    }

    if (r0 >= 0 && r0 + 1 < height) {
        int ca = c0 % width;
        if (ca < 0) {
            ca += width;
        }
        const int cb = ca + 1 == width ? 0 : ca + 1;
        const std::size_t base0 = static_cast<std::size_t>(r0) * width;
        const std::size_t base1 = base0 + width;
        t.idx[0] = base0 + ca;
        t.idx[1] = base0 + cb;
        t.idx[2] = base1 + ca;
        t.idx[3] = base1 + cb;
        t.sign[0] = t.sign[1] = t.sign[2] = t.sign[3] = 1.0;
    } else {
        bool crossed[4];
        t.idx[0] = resolve_index(height, width, r0, c0, &crossed[0]);
        t.idx[1] = resolve_index(height, width, r0, c0 + 1, &crossed[1]);
        t.idx[2] = resolve_index(height, width, r0 + 1, c0, &crossed[2]);
        t.idx[3] = resolve_index(height, width, r0 + 1, c0 + 1, &crossed[3]);
        for (int k = 0; k < 4; ++k) {
            t.sign[k] = crossed[k] ? -1.0 : 1.0;
        }
    }

    t.w[0] = (1.0 - fr) * (1.0 - fc);
    t.w[1] = (1.0 - fr) * fc;
    t.w[2] = fr * (1.0 - fc);
    t.w[3] = fr * fc;

    t.dw_dr[0] = -(1.0 - fc);
    t.dw_dr[1] = -fc;
    t.dw_dr[2] = 1.0 - fc;
    t.dw_dr[3] = fc;

    t.dw_dc[0] = -(1.0 - fr);
    t.dw_dc[1] = 1.0 - fr;
    t.dw_dc[2] = -fr;
    t.dw_dc[3] = fr;
}

inline double apply(const Taps &t, const double *plane) {
    return t.w[0] * plane[t.idx[0]] + t.w[1] * plane[t.idx[1]] + t.w[2] * plane[t.idx[2]] +
           t.w[3] * plane[t.idx[3]];
}

inline double apply_dr(const Taps &t, const double *plane) {
    return t.dw_dr[0] * plane[t.idx[0]] + t.dw_dr[1] * plane[t.idx[1]] + t.dw_dr[2] * plane[t.idx[2]] +
           t.dw_dr[3] * plane[t.idx[3]];
}

inline double apply_dc(const Taps &t, const double *plane) {
    return t.dw_dc[0] * plane[t.idx[0]] + t.dw_dc[1] * plane[t.idx[1]] + t.dw_dc[2] * plane[t.idx[2]] +
           t.dw_dc[3] * plane[t.idx[3]];
}

inline void scatter(const Taps &t, double value, double *plane) {
    plane[t.idx[0]] += t.w[0] * value;
    plane[t.idx[1]] += t.w[1] * value;
    plane[t.idx[2]] += t.w[2] * value;
    plane[t.idx[3]] += t.w[3] * value;
}

// Signed variants for the row component of displacement fields.

inline double apply_signed(const Taps &t, const double *plane) {
    double acc = 0.0;
    for (int k = 0; k < 4; ++k) {
        acc += t.sign[k] * t.w[k] * plane[t.idx[k]];
    }
    return acc;
}

inline double apply_dr_signed(const Taps &t, const double *plane) {
    double acc = 0.0;
    for (int k = 0; k < 4; ++k) {
        acc += t.sign[k] * t.dw_dr[k] * plane[t.idx[k]];
    }
    return acc;
}

inline double apply_dc_signed(const Taps &t, const double *plane) {
    double acc = 0.0;
    for (int k = 0; k < 4; ++k) {
        acc += t.sign[k] * t.dw_dc[k] * plane[t.idx[k]];
    }
    return acc;
}

inline void scatter_signed(const Taps &t, double value, double *plane) {
    for (int k = 0; k < 4; ++k) {
        plane[t.idx[k]] += t.sign[k] * t.w[k] * value;
    }
}

} // namespace josa::detail
