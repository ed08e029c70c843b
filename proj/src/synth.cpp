#include "josa/synth.hpp"

#include <cmath>
#include <numbers>
#include <algorithm>
#include <cstdio>

#include "josa/errors.hpp"
#include "josa/random_field.hpp"

namespace josa {

void SynthConfig::validate() const {
    make_grid(height, width);
    if (n_subjects < 1 || geom_channels < 1 || func_channels < 1) {
        throw ConfigError("synth: need at least one subject and one channel per group");
    }
    for (double x : {joint_std, geom_std, func_std, smoothing_px, noise_geom, noise_func, blob_sigma_px}) {
        if (!(x >= 0.0) || !std::isfinite(x)) {
            throw ConfigError("synth: scales must be finite and non-negative");
        }
    }
    if (joint_std > 0.0 && (joint_std <= geom_std || joint_std <= func_std)) {
        throw ConfigError("synth: joint_std must exceed geom_std and func_std");
    }
    if (joint_std == 0.0 && (geom_std > 0.0 || func_std > 0.0)) {
        throw ConfigError("synth: joint_std must exceed geom_std and func_std");
    }
    if (geom_order < 1) {
        throw ConfigError("synth: geom_order must be >= 1");
    }
    if (blob_count < 0) {
        throw ConfigError("synth: blob_count must be >= 0");
    }
    if (!(offset_fraction >= 0.0 && offset_fraction <= 1.0)) {
        throw ConfigError("synth: offset_fraction must lie in [0, 1]");
    }
}

namespace {

// sin(theta)^k cos(k phi + p) cos(l theta + q): smooth at the poles.
Field harmonic_field(const GridSpec &g, int max_k, int max_l, Rng &rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    Field f(1, g);
    for (int k = 0; k <= max_k; ++k) {
        for (int l = 1; l <= max_l; ++l) {
            const double a = normal(rng) / (1.0 + 0.5 * (k + l));
            const double p = phase(rng);
            const double q = phase(rng);
            for (int i = 0; i < g.height; ++i) {
                const double th = g.theta(i);
                const double radial = std::pow(std::sin(th), k) * std::cos(l * th + q);
                for (int j = 0; j < g.width; ++j) {
                    f.at(0, i, j) += a * radial * std::cos(k * g.phi(j) + p);
                }
            }
        }
    }
    return f;
}

double great_circle(double th1, double ph1, double th2, double ph2) {
    const double c = std::cos(th1) * std::cos(th2) + std::sin(th1) * std::sin(th2) * std::cos(ph1 - ph2);
    return std::acos(std::clamp(c, -1.0, 1.0));
}

std::pair<Field, Field> render(const Atlas &atlas, const GroundTruth &truth) {
    const DeformationField joint = integrate(truth.v_joint);
    return {warp(atlas.geom, compose(integrate(truth.v_geom), joint)),
            warp(atlas.func, compose(integrate(truth.v_func), joint))};
}

} // namespace

Atlas make_atlas(const SynthConfig &cfg) {
    cfg.validate();
    const GridSpec g = cfg.grid();
    Rng rng(derive_seed(cfg.seed, 0));

    Atlas atlas;
    atlas.geom = Field(cfg.geom_channels, g);
    for (int c = 0; c < cfg.geom_channels; ++c) {
        // Odd channels are finer, like curvature next to sulcal depth.
        const int max_k = c % 2 == 0 ? cfg.geom_order : (3 * cfg.geom_order) / 2;
        const int max_l = std::max(1, (3 * max_k) / 4);
        Field h = harmonic_field(g, max_k, max_l, rng);
        const Field texture = gaussian_smooth(white_noise(1, g, rng), 0.5 * cfg.smoothing_px);
        const double tex_scale = weighted_std(h, AreaWeights(g)) / std::max(weighted_std(texture, AreaWeights(g)), 1e-12);
        for (std::size_t p = 0; p < g.cells(); ++p) {
            h.channel(0)[p] += 0.3 * tex_scale * texture.channel(0)[p];
        }
        std::copy(h.channel(0).begin(), h.channel(0).end(), atlas.geom.channel(c).begin());
    }
    atlas.geom = standardize(atlas.geom);

    atlas.func = Field(cfg.func_channels, g);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double sigma = cfg.blob_sigma_px * g.dtheta;
    for (int c = 0; c < cfg.func_channels; ++c) {
        if (cfg.blob_count == 0) {
            for (int i = 0; i < g.height; ++i) {
                for (int j = 0; j < g.width; ++j) {
                    atlas.func.at(c, i, j) = 1e-3 * std::cos(g.theta(i));
                }
            }
            continue;
        }
        for (int b = 0; b < cfg.blob_count; ++b) {
            const double th = std::acos(1.0 - 2.0 * (0.15 + 0.7 * uni(rng)));
            const double ph = 2.0 * std::numbers::pi * uni(rng);
            const double amp = 1.0 + uni(rng);
            for (int i = 0; i < g.height; ++i) {
                for (int j = 0; j < g.width; ++j) {
                    const double d = great_circle(g.theta(i), g.phi(j), th, ph);
                    atlas.func.at(c, i, j) += amp * std::exp(-0.5 * d * d / (sigma * sigma));
                }
            }
        }
    }
    atlas.func = standardize(atlas.func);
    return atlas;
}

SynthSubject sample_subject(const Atlas &atlas, const SynthConfig &cfg, std::uint64_t subject_seed, std::string id,
                            bool with_offset) {
    const GridSpec g = atlas.grid();
    const AreaWeights w(g);
    Rng rng(subject_seed);

    SynthSubject out;
    out.truth.v_joint = smooth_random_velocity(g, cfg.smoothing_px, cfg.joint_std, w, rng);
    out.truth.v_geom = smooth_random_velocity(g, cfg.smoothing_px, with_offset ? cfg.geom_std : 0.0, w, rng);
    out.truth.v_func = smooth_random_velocity(g, cfg.smoothing_px, with_offset ? cfg.func_std : 0.0, w, rng);

    auto [geom, func] = render(atlas, out.truth);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double &x : geom.values()) {
        x += cfg.noise_geom * normal(rng);
    }
    for (double &x : func.values()) {
        x += cfg.noise_func * normal(rng);
    }
    out.record = make_subject(std::move(id), std::move(geom), std::move(func));
    return out;
}

Cohort make_cohort(const SynthConfig &cfg) {
    Cohort cohort;
    cohort.config = cfg;
    cohort.atlas = make_atlas(cfg);
    const int n_offset = static_cast<int>(std::lround(cfg.offset_fraction * cfg.n_subjects));
    for (int k = 0; k < cfg.n_subjects; ++k) {
        char id[32];
        std::snprintf(id, sizeof id, "sub%03d", k);
        cohort.subjects.push_back(
            sample_subject(cohort.atlas, cfg, derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(k)), id, k < n_offset));
    }
    return cohort;
}

std::vector<SubjectRecord> observations(const Cohort &cohort) {
    std::vector<SubjectRecord> out;
    out.reserve(cohort.subjects.size());
    for (const auto &s : cohort.subjects) {
        out.push_back(s.record);
    }
    return out;
}

std::vector<SubjectRecord> clean_images(const Cohort &cohort) {
    std::vector<SubjectRecord> out;
    out.reserve(cohort.subjects.size());
    for (const auto &s : cohort.subjects) {
        auto [geom, func] = render(cohort.atlas, s.truth);
        out.push_back(make_subject(s.record.id, std::move(geom), std::move(func)));
    }
    return out;
}

} // namespace josa
