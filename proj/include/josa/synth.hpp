#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "josa/deform.hpp"
#include "josa/model.hpp"

namespace josa {

// Synthetic cohort with known atlas and deformations. Displacement scales are
// area-weighted standard deviations in pixels.
struct SynthConfig {
    int n_subjects = 16;
    int height = 64;
    int width = 128;
    int geom_channels = 2;
    int func_channels = 1;
    double joint_std = 4.0;
    double geom_std = 1.5;
    double func_std = 1.5;
    double smoothing_px = 8.0;
    double noise_geom = 0.1;
    double noise_func = 0.3;
    // Highest longitude order of the geometric harmonics; odd channels go 1.5x finer.
    int geom_order = 8;
    int blob_count = 6;
    double blob_sigma_px = 5.0;
    // Leading fraction of subjects that receive modality fields; the rest
    // share phi_joint across geometry and function.
    double offset_fraction = 1.0;
    std::uint64_t seed = 1;

    GridSpec grid() const { return make_grid(height, width); }
    // Throws ConfigError; the joint scale must exceed the modality scales.
    void validate() const;
};

struct GroundTruth {
    VelocityField v_joint;
    VelocityField v_geom;
    VelocityField v_func;
};

struct SynthSubject {
    SubjectRecord record; // observations only, velocities zero
    GroundTruth truth;
};

struct Cohort {
    SynthConfig config;
    Atlas atlas;
    std::vector<SynthSubject> subjects;
};

// Geometric channels: low-order harmonics plus smoothed noise; functional
// channels: Gaussian blobs at seeded positions. Every channel standardized.
// With no blobs the functional channel becomes a faint cos(theta) ramp so
// that standardization stays defined.
Atlas make_atlas(const SynthConfig &cfg);

// Forward model: geom = A_g∘(phi_g∘phi_j) + noise, func = A_f∘(phi_f∘phi_j) + noise.
SynthSubject sample_subject(const Atlas &atlas, const SynthConfig &cfg, std::uint64_t subject_seed,
                            std::string id, bool with_offset = true);

Cohort make_cohort(const SynthConfig &cfg);

std::vector<SubjectRecord> observations(const Cohort &cohort);

// Noise-free images regenerated from the ground truth, for evaluation only.
std::vector<SubjectRecord> clean_images(const Cohort &cohort);

} // namespace josa
